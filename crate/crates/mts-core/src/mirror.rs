use crate::error::{MtsError, Result};
use crate::potentials;
use crate::projection::{project_node, ProjectionInput, ProjectionOutput};
use crate::tree::{
    delta_map, epsilon_threshold, psi, validate_conditional, weighted_l1, weighted_l1_pos,
    NodeParams, Tree,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct OnlineState {
    pub q: Vec<f64>,
    pub x: Vec<f64>,
    pub steps: u64,
}

impl OnlineState {
    pub fn new(tree: &Tree, q: Vec<f64>) -> Result<OnlineState> {
        validate_conditional(tree, &q)?;
        let x = delta_map(tree, &q);
        Ok(OnlineState { q, x, steps: 0 })
    }
}

/// Per-step accounting; for split steps, service and movement accumulate over
/// sub-steps and the multipliers are those of the most recent sub-step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepAudit {
    pub service: f64,
    pub movement: f64,
    pub pos_movement: f64,
    pub psi_before: f64,
    pub psi_after: f64,
    pub psi_aux_before: f64,
    pub psi_aux_after: f64,
    /// Simplex multiplier per node (zero at leaves).
    pub beta: Vec<f64>,
    pub max_alpha: f64,
    pub substeps: u64,
}

/// Per-node projection record of a single step, for lemma-level audits.
#[derive(Debug, Clone)]
pub struct NodeProjection {
    pub node: usize,
    pub input: ProjectionInput,
    pub output: ProjectionOutput,
}

#[derive(Debug, Clone)]
pub struct StepDetail {
    /// Derived costs per node (leaf entries are the input costs).
    pub chat: Vec<f64>,
    pub projections: Vec<NodeProjection>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub q0: Vec<f64>,
    pub x0: Vec<f64>,
    /// Conditional state after each step.
    pub states: Vec<Vec<f64>>,
    pub audits: Vec<StepAudit>,
    pub s_on: f64,
    pub m_on: f64,
}

fn validate_cost(tree: &Tree, c: &[f64]) -> Result<()> {
    if c.len() != tree.n_leaves() {
        return Err(MtsError::InvalidInput(format!(
            "cost vector has {} entries for {} leaves",
            c.len(),
            tree.n_leaves()
        )));
    }
    for (i, &v) in c.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(MtsError::InvalidInput(format!(
                "cost[{i}] = {v} must be finite and nonnegative"
            )));
        }
    }
    Ok(())
}

fn service_at(tree: &Tree, c: &[f64], x: &[f64]) -> f64 {
    tree.leaves
        .iter()
        .enumerate()
        .map(|(i, &l)| c[i] * x[l])
        .sum()
}

/// One application of the online update: bottom-up derived costs and per-node
/// projections, service charged at the post-move state.
pub fn step_detailed(
    tree: &Tree,
    params: &NodeParams,
    state: &OnlineState,
    c: &[f64],
    kappa: f64,
) -> Result<(OnlineState, StepAudit, StepDetail)> {
    validate_cost(tree, c)?;
    let n = tree.nodes.len();
    let mut q_new = state.q.clone();
    let mut chat = vec![0.0; n];
    for (i, &l) in tree.leaves.iter().enumerate() {
        chat[l] = c[i];
    }
    let mut projections = Vec::new();
    let mut beta = vec![0.0; n];
    let mut max_alpha = 0.0f64;

    for u in 0..n {
        let children = &tree.nodes[u].children;
        if children.is_empty() {
            continue;
        }
        let equal = children.iter().all(|&v| chat[v] == chat[children[0]]);
        let input = ProjectionInput {
            q: children.iter().map(|&v| state.q[v]).collect(),
            cost: children.iter().map(|&v| chat[v]).collect(),
            w: children.iter().map(|&v| tree.nodes[v].weight).collect(),
            eta: children.iter().map(|&v| params.eta[v]).collect(),
            delta: children.iter().map(|&v| params.delta[v]).collect(),
            kappa,
        };
        let output = if equal {
            // Equal derived costs are absorbed by the simplex multiplier:
            // the state is unchanged and the parent cost is exact.
            ProjectionOutput {
                p: input.q.clone(),
                alpha: vec![0.0; children.len()],
                beta: input.cost[0],
                iterations: 0,
                residual: 0.0,
                rescale: 1.0,
            }
        } else {
            project_node(&input)?
        };
        for (slot, &v) in children.iter().enumerate() {
            q_new[v] = output.p[slot];
        }
        chat[u] = if equal {
            input.cost[0]
        } else {
            output
                .p
                .iter()
                .zip(&input.cost)
                .map(|(p, cc)| p * cc)
                .sum()
        };
        beta[u] = output.beta;
        for &a in &output.alpha {
            max_alpha = max_alpha.max(a);
        }
        projections.push(NodeProjection {
            node: u,
            input,
            output,
        });
    }

    let x_new = delta_map(tree, &q_new);
    let audit = StepAudit {
        service: service_at(tree, c, &x_new),
        movement: weighted_l1(tree, &state.x, &x_new),
        pos_movement: weighted_l1_pos(tree, &state.x, &x_new),
        psi_before: psi(tree, &state.x),
        psi_after: psi(tree, &x_new),
        psi_aux_before: potentials::psi_aux(tree, params, &state.q, kappa),
        psi_aux_after: potentials::psi_aux(tree, params, &q_new, kappa),
        beta,
        max_alpha,
        substeps: 1,
    };
    let new_state = OnlineState {
        q: q_new,
        x: x_new,
        steps: state.steps + 1,
    };
    Ok((new_state, audit, StepDetail { chat, projections }))
}

pub fn step(
    tree: &Tree,
    params: &NodeParams,
    state: &OnlineState,
    c: &[f64],
    kappa: f64,
) -> Result<(OnlineState, StepAudit)> {
    let (s, a, _) = step_detailed(tree, params, state, c, kappa)?;
    Ok((s, a))
}

/// The deployed update: split the cost into M = ceil(||c||_inf / eps_T)
/// pieces and apply `step` to each. Once a sub-step leaves the state
/// bitwise unchanged the remaining sub-steps are identical, so their service
/// is added in closed form.
pub fn split_step(
    tree: &Tree,
    params: &NodeParams,
    state: &OnlineState,
    c: &[f64],
    kappa: f64,
    tau: f64,
) -> Result<(OnlineState, StepAudit)> {
    validate_cost(tree, c)?;
    let eps = epsilon_threshold(tree, kappa, tau)?;
    let c_max = c.iter().fold(0.0f64, |a, &b| a.max(b));

    if c_max == 0.0 {
        let psi_now = psi(tree, &state.x);
        let psi_aux_now = potentials::psi_aux(tree, params, &state.q, kappa);
        let audit = StepAudit {
            service: 0.0,
            movement: 0.0,
            pos_movement: 0.0,
            psi_before: psi_now,
            psi_after: psi_now,
            psi_aux_before: psi_aux_now,
            psi_aux_after: psi_aux_now,
            beta: vec![0.0; tree.nodes.len()],
            max_alpha: 0.0,
            substeps: 1,
        };
        let new_state = OnlineState {
            q: state.q.clone(),
            x: state.x.clone(),
            steps: state.steps + 1,
        };
        return Ok((new_state, audit));
    }

    let m = (c_max / eps).ceil().max(1.0) as u64;
    let m_f = m as f64;
    let cs: Vec<f64> = c.iter().map(|&v| v / m_f).collect();

    let psi_before = psi(tree, &state.x);
    let psi_aux_before = potentials::psi_aux(tree, params, &state.q, kappa);
    let mut cur = OnlineState {
        q: state.q.clone(),
        x: state.x.clone(),
        steps: state.steps,
    };
    let mut service = 0.0;
    let mut movement = 0.0;
    let mut pos_movement = 0.0;
    let mut beta = vec![0.0; tree.nodes.len()];
    let mut max_alpha = 0.0f64;

    let mut j = 1;
    while j <= m {
        let (next, audit) = step(tree, params, &cur, &cs, kappa)?;
        if next.q == cur.q {
            // Fixed point: sub-steps j..=m all serve the same state.
            service += service_at(tree, c, &cur.x) * ((m - j + 1) as f64 / m_f);
            beta = audit.beta;
            max_alpha = max_alpha.max(audit.max_alpha);
            break;
        }
        service += audit.service;
        movement += audit.movement;
        pos_movement += audit.pos_movement;
        beta = audit.beta;
        max_alpha = max_alpha.max(audit.max_alpha);
        cur = next;
        j += 1;
    }

    let audit = StepAudit {
        service,
        movement,
        pos_movement,
        psi_before,
        psi_after: psi(tree, &cur.x),
        psi_aux_before,
        psi_aux_after: potentials::psi_aux(tree, params, &cur.q, kappa),
        beta,
        max_alpha,
        substeps: m,
    };
    cur.steps = state.steps + 1;
    Ok((cur, audit))
}

pub fn run(
    tree: &Tree,
    params: &NodeParams,
    q0: Vec<f64>,
    costs: &[Vec<f64>],
    kappa: f64,
    tau: f64,
) -> Result<Trajectory> {
    let state0 = OnlineState::new(tree, q0)?;
    let mut traj = Trajectory {
        q0: state0.q.clone(),
        x0: state0.x.clone(),
        states: Vec::with_capacity(costs.len()),
        audits: Vec::with_capacity(costs.len()),
        s_on: 0.0,
        m_on: 0.0,
    };
    let mut cur = state0;
    for (t, c) in costs.iter().enumerate() {
        let (next, audit) = split_step(tree, params, &cur, c, kappa, tau).map_err(|e| {
            MtsError::InvalidInput(format!("step {t}: {e}"))
        })?;
        traj.s_on += audit.service;
        traj.m_on += audit.movement;
        traj.states.push(next.q.clone());
        traj.audits.push(audit);
        cur = next;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{derive_params, point_mass_q, uniform_q};

    fn star2() -> (Tree, NodeParams) {
        let t = Tree::star(&[1.0, 1.0]).unwrap();
        let p = derive_params(&t);
        (t, p)
    }

    #[test]
    fn zero_cost_is_noop() {
        let (t, p) = star2();
        let s = OnlineState::new(&t, uniform_q(&t, &p)).unwrap();
        let (s2, a) = step(&t, &p, &s, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(s2.q, s.q);
        assert_eq!(a.service, 0.0);
        assert_eq!(a.movement, 0.0);

        let (s3, a3) = split_step(&t, &p, &s, &[0.0, 0.0], 1.0, 7.0).unwrap();
        assert_eq!(s3.q, s.q);
        assert_eq!(a3.substeps, 1);
        assert_eq!(a3.service, 0.0);
    }

    #[test]
    fn constant_cost_is_fixed_point() {
        let (t, p) = star2();
        let s = OnlineState::new(&t, uniform_q(&t, &p)).unwrap();
        let (s2, a) = step(&t, &p, &s, &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(s2.q, s.q);
        assert_eq!(a.movement, 0.0);
        assert!((a.service - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_two_leaf_step() {
        let (t, p) = star2();
        let s = OnlineState::new(&t, uniform_q(&t, &p)).unwrap();
        let (s2, a) = step(&t, &p, &s, &[0.1, 0.0], 1.0).unwrap();
        let (l1, l2) = (t.leaves[0], t.leaves[1]);
        assert!((s2.q[l1] - 0.43283170597971254).abs() < 1e-10);
        assert!((s2.q[l2] - 0.5671682940202875).abs() < 1e-10);
        assert!((a.service - 0.1 * 0.43283170597971254).abs() < 1e-10);
        assert!((a.movement - 2.0 * (0.5 - 0.43283170597971254)).abs() < 1e-10);
        assert!((a.pos_movement - (0.5 - 0.43283170597971254)).abs() < 1e-10);
    }

    #[test]
    fn split_count_matches_threshold() {
        let (t, p) = star2();
        let s = OnlineState::new(&t, uniform_q(&t, &p)).unwrap();
        let (_, a) = split_step(&t, &p, &s, &[1.0, 0.0], 1.0, 7.0).unwrap();
        assert_eq!(a.substeps, 10);
    }

    #[test]
    fn constant_one_split_is_exact() {
        let (t, p) = star2();
        let leaf = t.leaves[0];
        let s = OnlineState::new(&t, point_mass_q(&t, &p, leaf)).unwrap();
        let traj = run(&t, &p, s.q.clone(), &vec![vec![1.0, 1.0]; 50], 1.0, 7.0).unwrap();
        assert_eq!(traj.s_on, 50.0);
        assert_eq!(traj.m_on, 0.0);
    }

    #[test]
    fn split_discrepancy_shrinks_with_kappa() {
        let (t, p) = star2();
        let gap = |kappa: f64| {
            let s = OnlineState::new(&t, uniform_q(&t, &p)).unwrap();
            let (single, _) = step(&t, &p, &s, &[0.5, 0.0], kappa).unwrap();
            let (split, _) = split_step(&t, &p, &s, &[0.5, 0.0], kappa, 7.0).unwrap();
            single
                .q
                .iter()
                .zip(&split.q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
        };
        assert!(gap(4.0) < gap(1.0));
    }

    #[test]
    fn spike_cost_fast_forwards() {
        let (t, p) = star2();
        let s = OnlineState::new(&t, uniform_q(&t, &p)).unwrap();
        let (s2, a) = split_step(&t, &p, &s, &[1e6, 0.0], 1.0, 7.0).unwrap();
        assert!(a.substeps > 1_000_000);
        assert!(s2.q[t.leaves[0]] == 0.0);
        assert!(s2.q[t.leaves[1]] == 1.0);
        assert!(a.service.is_finite() && a.movement <= 2.0 + 1e-12);
    }

    #[test]
    fn empty_run() {
        let (t, p) = star2();
        let traj = run(&t, &p, uniform_q(&t, &p), &[], 1.0, 7.0).unwrap();
        assert_eq!(traj.states.len(), 0);
        assert_eq!(traj.s_on, 0.0);
        assert_eq!(traj.m_on, 0.0);
    }

    #[test]
    fn errors_carry_step_index() {
        let (t, p) = star2();
        let err = run(
            &t,
            &p,
            uniform_q(&t, &p),
            &[vec![0.0, 0.0], vec![-1.0, 0.0]],
            1.0,
            7.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("step 1"));
    }

    #[test]
    fn deterministic_repeat() {
        let (t, p) = star2();
        let costs = vec![vec![0.3, 0.1], vec![0.0, 0.9], vec![0.5, 0.5]];
        let a = run(&t, &p, uniform_q(&t, &p), &costs, 1.0, 7.0).unwrap();
        let b = run(&t, &p, uniform_q(&t, &p), &costs, 1.0, 7.0).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.s_on, b.s_on);
        assert_eq!(a.m_on, b.m_on);
    }
}
