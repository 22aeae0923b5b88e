//! Fractional metrical task systems on weighted trees: state representations,
//! the entropic projection and online update, potential-based audits, offline
//! optimum, tree reshaping, random tree embeddings, and a continuous-limit
//! numerical study.

pub mod continuous;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod mirror;
pub mod offline;
pub mod potentials;
pub mod reshape;
pub mod projection;
pub mod tree;

pub use error::{MtsError, Result};
