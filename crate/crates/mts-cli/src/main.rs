use clap::{Parser, Subcommand};
use mts_core::continuous::{convergence_study, log_slope, CostSchedule};
use mts_core::embedding::{frt_embed, FiniteMetric};
use mts_core::harness::{
    audit_trajectory, run_experiment, trajectory_from_json, trajectory_to_json, ExperimentConfig,
    RATIO_CSV_HEADER,
};
use mts_core::offline::{self, OfflineTrajectory};
use mts_core::tree::{derive_params, point_mass_q, validate_tree, Tree};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mts", version, about = "Fractional metrical task systems on weighted trees")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check that a tree file is a well-formed tau-HST.
    Validate {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long, default_value_t = 7.0)]
        tau: f64,
    },
    /// Rebuild a tree as a balanced 7-HST dominating the original metric.
    Reshape {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON report with depth, node counts, and distortion range.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the online algorithm over a cost sequence.
    Run {
        #[arg(long)]
        tree: PathBuf,
        /// JSON array of per-step leaf cost vectors in canonical leaf order.
        #[arg(long)]
        costs: PathBuf,
        /// Start leaf label; defaults to the first canonical leaf.
        #[arg(long)]
        start: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long, default_value_t = 7.0)]
        tau: f64,
        /// Self-contained trajectory file (tree, costs, states, audits).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the offline optimum for a cost sequence.
    Offline {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        costs: PathBuf,
        #[arg(long)]
        start: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-audit a stored trajectory against an offline comparator.
    Check {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        offline: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Embed a finite metric into a random dominating 2-HST.
    Embed {
        #[arg(long)]
        metric: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Discretization self-distances d_M for a continuous cost schedule.
    Converge {
        #[arg(long)]
        tree: PathBuf,
        /// JSON {"ends": [...], "costs": [[...], ...]} of a piecewise schedule.
        #[arg(long)]
        schedule: PathBuf,
        /// Comma-separated increasing list of step counts, e.g. 8,16,32.
        #[arg(long)]
        mlist: String,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        /// CSV output (columns m,distance).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a configured experiment end to end and append its ratio row.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config kappa.
        #[arg(long)]
        kappa: Option<f64>,
        /// Override the config tau.
        #[arg(long)]
        tau: Option<f64>,
    },
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), String> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_costs(path: &Path) -> Result<Vec<Vec<f64>>, String> {
    serde_json::from_value(read_json(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn run_cmd(cmd: Cmd) -> Result<ExitCode, String> {
    match cmd {
        Cmd::Validate { tree, tau } => {
            let t = Tree::load(&tree).map_err(|e| e.to_string())?;
            let violations = validate_tree(&t, tau);
            if violations.is_empty() {
                println!(
                    "ok: {} leaves, depth {}, valid {tau}-HST",
                    t.n_leaves(),
                    t.depth
                );
                Ok(ExitCode::SUCCESS)
            } else {
                for v in &violations {
                    println!("violation: {}", v.message);
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Cmd::Reshape { tree, out, report } => {
            let t = Tree::load(&tree).map_err(|e| e.to_string())?;
            let (t7, rep) = mts_core::reshape::reshape(&t).map_err(|e| e.to_string())?;
            write_json(&out, &t7.to_json())?;
            let rep_json = serde_json::to_value(&rep).map_err(|e| e.to_string())?;
            match report {
                Some(p) => write_json(&p, &rep_json)?,
                None => println!("{rep_json}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run { tree, costs, start, kappa, tau, out } => {
            let t = Tree::load(&tree).map_err(|e| e.to_string())?;
            let c = load_costs(&costs)?;
            let params = derive_params(&t);
            let leaf = match &start {
                Some(label) => t
                    .leaf_by_label(label)
                    .ok_or_else(|| format!("start leaf {label:?} not found"))?,
                None => t.leaves[0],
            };
            let q0 = point_mass_q(&t, &params, leaf);
            let traj =
                mts_core::mirror::run(&t, &params, q0, &c, kappa, tau).map_err(|e| e.to_string())?;
            println!("service {} movement {}", traj.s_on, traj.m_on);
            write_json(&out, &trajectory_to_json(&t, &c, kappa, tau, &traj))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Offline { tree, costs, start, out } => {
            let t = Tree::load(&tree).map_err(|e| e.to_string())?;
            let c = load_costs(&costs)?;
            let leaf = t
                .leaf_by_label(&start)
                .ok_or_else(|| format!("start leaf {start:?} not found"))?;
            let off = offline::optimal(&t, &c, leaf).map_err(|e| e.to_string())?;
            println!(
                "service {} movement {} total {}",
                off.service, off.movement, off.total
            );
            write_json(&out, &off.to_json(&t))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check { traj, offline: off_path, report } => {
            let loaded = trajectory_from_json(&read_json(&traj)?).map_err(|e| e.to_string())?;
            let off = OfflineTrajectory::from_json(&read_json(&off_path)?, &loaded.tree)
                .map_err(|e| e.to_string())?;
            let audit = audit_trajectory(&loaded, &off).map_err(|e| e.to_string())?;
            write_json(&report, &serde_json::to_value(&audit).map_err(|e| e.to_string())?)?;
            println!(
                "steps {} violations {} fine_certified {}",
                audit.steps.len(),
                audit.violations,
                audit.fine.certified()
            );
            Ok(if audit.violations == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Embed { metric, seed, out } => {
            let m = FiniteMetric::load(&metric).map_err(|e| e.to_string())?;
            let t = frt_embed(&m, seed).map_err(|e| e.to_string())?;
            println!("tree: {} leaves, depth {}", t.n_leaves(), t.depth);
            write_json(&out, &t.to_json())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Converge { tree, schedule, mlist, kappa, out } => {
            let t = Tree::load(&tree).map_err(|e| e.to_string())?;
            let params = derive_params(&t);
            let sched_json = read_json(&schedule)?;
            let ends: Vec<f64> = serde_json::from_value(sched_json["ends"].clone())
                .map_err(|e| format!("schedule ends: {e}"))?;
            let costs: Vec<Vec<f64>> = serde_json::from_value(sched_json["costs"].clone())
                .map_err(|e| format!("schedule costs: {e}"))?;
            let sched = CostSchedule::new(ends, costs).map_err(|e| e.to_string())?;
            let ms: Vec<u64> = mlist
                .split(',')
                .map(|s| s.trim().parse::<u64>().map_err(|e| format!("mlist: {e}")))
                .collect::<Result<_, _>>()?;
            let rows =
                convergence_study(&t, &params, &sched, &ms, kappa).map_err(|e| e.to_string())?;
            let mut text = String::from("m,distance\n");
            for r in &rows {
                text.push_str(&format!("{},{}\n", r.m, r.distance));
            }
            std::fs::write(&out, text).map_err(|e| format!("{}: {e}", out.display()))?;
            println!("log-log slope {}", log_slope(&rows));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Experiment { config, out_dir, seed, kappa, tau } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(|e| e.to_string())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(k) = kappa {
                cfg.kappa = Some(k);
            }
            if let Some(t) = tau {
                cfg.tau = t;
            }
            let row = run_experiment(&cfg, &out_dir).map_err(|e| e.to_string())?;
            println!("{RATIO_CSV_HEADER}");
            println!("{}", row.to_csv());
            Ok(if row.audit_violations == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_cmd(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
