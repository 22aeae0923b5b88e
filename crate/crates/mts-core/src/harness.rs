use crate::embedding::FiniteMetric;
use crate::error::{MtsError, Result};
use crate::mirror::{split_step, OnlineState, StepAudit, Trajectory};
use crate::offline::{self, OfflineTrajectory};
use crate::potentials::{
    check_fine_competitiveness, check_movement_inequality, check_service_inequality, CheckOutcome,
    FineReport,
};
use crate::reshape::reshape;
use crate::tree::{derive_params, point_mass_q, point_mass_x, validate_tree, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Cost generators. `chase` depends on the online state, so costs are drawn
/// step by step against the current marginals.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CostKind {
    Constant { value: f64 },
    Spike,
    Chase,
    Random { density: f64 },
}

pub struct CostStream {
    kind: CostKind,
    rng: ChaCha8Rng,
    spike_value: f64,
}

impl CostStream {
    pub fn new(kind: CostKind, tree: &Tree, seed: u64) -> Result<CostStream> {
        if let CostKind::Random { density } = &kind {
            if !(0.0..=1.0).contains(density) {
                return Err(MtsError::InvalidInput(format!(
                    "zeroing probability {density} outside [0, 1]"
                )));
            }
        }
        if let CostKind::Constant { value } = &kind {
            if !value.is_finite() || *value < 0.0 {
                return Err(MtsError::InvalidInput(format!("invalid constant cost {value}")));
            }
        }
        Ok(CostStream {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spike_value: 1e6 * tree.max_weight(),
        })
    }

    /// Next cost vector given the current marginal state x.
    pub fn next(&mut self, tree: &Tree, x: &[f64]) -> Vec<f64> {
        let n = tree.n_leaves();
        match &self.kind {
            CostKind::Constant { value } => vec![*value; n],
            CostKind::Spike => {
                let mut c = vec![0.0; n];
                c[self.rng.gen_range(0..n)] = self.spike_value;
                c
            }
            CostKind::Chase => {
                let mut arg = 0;
                for (i, &l) in tree.leaves.iter().enumerate() {
                    if x[l] > x[tree.leaves[arg]] {
                        arg = i;
                    }
                }
                let mut c = vec![0.0; n];
                c[arg] = 1.0;
                c
            }
            CostKind::Random { density } => {
                let density = *density;
                (0..n)
                    .map(|_| {
                        let v = self.rng.gen::<f64>();
                        if self.rng.gen::<f64>() < density {
                            0.0
                        } else {
                            v
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Pre-generates a cost sequence for state-independent kinds.
pub fn generate_costs(kind: CostKind, tree: &Tree, horizon: u64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if kind == CostKind::Chase {
        return Err(MtsError::InvalidInput(
            "chase costs depend on the online state; use CostStream".into(),
        ));
    }
    let mut stream = CostStream::new(kind, tree, seed)?;
    let x = vec![0.0; tree.nodes.len()];
    Ok((0..horizon).map(|_| stream.next(tree, &x)).collect())
}

/// Random tree with exactly `n_leaves` leaves, depth at most `max_depth`,
/// branching 2..=4, and child/parent weight ratios drawn uniformly from
/// [ratio_lo, ratio_hi]. With ratio_hi <= 1/tau the output is a tau-HST.
pub fn random_hst(
    rng: &mut ChaCha8Rng,
    n_leaves: usize,
    max_depth: usize,
    ratio_lo: f64,
    ratio_hi: f64,
) -> Result<Tree> {
    if n_leaves == 0 || max_depth == 0 {
        return Err(MtsError::InvalidInput("need at least one leaf and depth".into()));
    }
    if 4usize.pow(max_depth as u32) < n_leaves {
        return Err(MtsError::InvalidInput(format!(
            "{n_leaves} leaves do not fit in depth {max_depth} with branching 4"
        )));
    }
    use crate::tree::TreeDef;
    fn build(
        rng: &mut ChaCha8Rng,
        n: usize,
        depth_left: usize,
        weight: f64,
        lo: f64,
        hi: f64,
    ) -> TreeDef {
        if n == 1 {
            return TreeDef::Leaf { weight, label: String::new() };
        }
        let k = if depth_left == 1 {
            n
        } else {
            // Children must fit their leaves within the remaining depth.
            let cap = 4usize.pow((depth_left - 1) as u32);
            let min_k = n.div_ceil(cap).max(2);
            rng.gen_range(min_k..=4.min(n).max(min_k))
        };
        let mut parts = vec![1usize; k];
        for _ in 0..(n - k) {
            // Keep parts under the subtree capacity.
            let cap = if depth_left == 1 { 1 } else { 4usize.pow((depth_left - 1) as u32) };
            let open: Vec<usize> = (0..k).filter(|&i| parts[i] < cap).collect();
            let i = open[rng.gen_range(0..open.len())];
            parts[i] += 1;
        }
        let children = parts
            .into_iter()
            .map(|p| {
                let w = weight * (lo + (hi - lo) * rng.gen::<f64>());
                build(rng, p, depth_left - 1, w, lo, hi)
            })
            .collect();
        TreeDef::Internal { weight, children }
    }
    let top_weight = 1.0 + rng.gen::<f64>();
    let root_children = if n_leaves == 1 {
        vec![TreeDef::Leaf { weight: top_weight, label: String::new() }]
    } else {
        // Split at the root so leaves stay within max_depth levels.
        let cap = 4usize.pow((max_depth - 1) as u32);
        let min_k = n_leaves.div_ceil(cap).max(2);
        let k = rng.gen_range(min_k..=4.min(n_leaves).max(min_k));
        let mut parts = vec![1usize; k];
        for _ in 0..(n_leaves - k) {
            let open: Vec<usize> = (0..k).filter(|&i| parts[i] < cap).collect();
            let i = open[rng.gen_range(0..open.len())];
            parts[i] += 1;
        }
        parts
            .into_iter()
            .map(|p| {
                let w = top_weight * (0.75 + 0.5 * rng.gen::<f64>());
                build(rng, p, max_depth - 1, w, ratio_lo, ratio_hi)
            })
            .collect()
    };
    let mut tree = Tree::from_def(root_children)?;
    // Attach distinct labels in canonical order.
    for (i, &l) in tree.leaves.clone().iter().enumerate() {
        tree.nodes[l].label = Some(format!("n{i}"));
    }
    Ok(tree)
}

/// Random 7-HST suitable for the online algorithm.
pub fn random_hst7(rng: &mut ChaCha8Rng, n_leaves: usize, max_depth: usize) -> Result<Tree> {
    random_hst(rng, n_leaves, max_depth, 0.2 / 7.0, 1.0 / 7.0)
}

/// Random conditional state with interior coordinates.
pub fn random_conditional(tree: &Tree, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut q = vec![1.0; tree.nodes.len()];
    for node in &tree.nodes {
        if node.is_leaf() {
            continue;
        }
        let mut parts: Vec<f64> = node.children.iter().map(|_| rng.gen::<f64>() + 1e-3).collect();
        let s: f64 = parts.iter().sum();
        parts.iter_mut().for_each(|v| *v /= s);
        for (slot, &v) in node.children.iter().enumerate() {
            q[v] = parts[slot];
        }
        crate::tree::fix_group_sum(&mut q, &node.children);
    }
    q
}

/// Random configuration z in K_T (marginals over nodes), occasionally zeroing
/// whole subtrees.
pub fn random_configuration(tree: &Tree, rng: &mut ChaCha8Rng, allow_zeros: bool) -> Vec<f64> {
    let mut z = vec![0.0; tree.nodes.len()];
    z[tree.root] = 1.0;
    for u in (0..tree.nodes.len()).rev() {
        let children = tree.nodes[u].children.clone();
        if children.is_empty() || z[u] == 0.0 {
            continue;
        }
        let mut parts: Vec<f64> = children.iter().map(|_| rng.gen::<f64>() + 1e-3).collect();
        if allow_zeros && children.len() > 1 && rng.gen_bool(0.2) {
            parts[rng.gen_range(0..children.len())] = 0.0;
        }
        let s: f64 = parts.iter().sum();
        for (slot, &v) in children.iter().enumerate() {
            z[v] = z[u] * parts[slot] / s;
        }
    }
    z
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TreeSource {
    File { path: String },
    Generated { leaves: usize, max_depth: usize },
    Metric { path: String },
}

fn default_tau() -> f64 {
    7.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub label: String,
    pub tree: TreeSource,
    pub costs: CostKind,
    pub horizon: u64,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub seed: u64,
    #[serde(default)]
    pub reshape: bool,
    #[serde(default)]
    pub start: Option<String>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One row of the ratio table; the CSV column order is fixed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioRow {
    pub label: String,
    pub seed: u64,
    pub n: usize,
    pub horizon: u64,
    pub kappa: f64,
    pub tau: f64,
    pub s_on: f64,
    pub m_on: f64,
    pub s_off: f64,
    pub m_off: f64,
    pub cost_star: f64,
    pub service_ratio: f64,
    pub movement_ratio: f64,
    pub fine_service_slack: f64,
    pub fine_movement_slack: f64,
    pub audit_violations: u64,
}

pub const RATIO_CSV_HEADER: &str = "label,seed,n,horizon,kappa,tau,s_on,m_on,s_off,m_off,cost_star,service_ratio,movement_ratio,fine_service_slack,fine_movement_slack,audit_violations";

impl RatioRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.label,
            self.seed,
            self.n,
            self.horizon,
            self.kappa,
            self.tau,
            self.s_on,
            self.m_on,
            self.s_off,
            self.m_off,
            self.cost_star,
            self.service_ratio,
            self.movement_ratio,
            self.fine_service_slack,
            self.fine_movement_slack,
            self.audit_violations
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepChecks {
    pub step: usize,
    pub service: CheckOutcome,
    pub movement: Vec<CheckOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub steps: Vec<StepChecks>,
    pub fine: FineReport,
    pub violations: u64,
}

/// Serialize a trajectory with everything needed to re-audit it.
pub fn trajectory_to_json(
    tree: &Tree,
    costs: &[Vec<f64>],
    kappa: f64,
    tau: f64,
    traj: &Trajectory,
) -> serde_json::Value {
    serde_json::json!({
        "tree": tree.to_json(),
        "costs": costs,
        "kappa": kappa,
        "tau": tau,
        "q0": traj.q0,
        "states": traj.states,
        "audits": traj.audits,
        "s_on": traj.s_on,
        "m_on": traj.m_on,
    })
}

pub struct LoadedTrajectory {
    pub tree: Tree,
    pub costs: Vec<Vec<f64>>,
    pub kappa: f64,
    pub tau: f64,
    pub trajectory: Trajectory,
}

pub fn trajectory_from_json(value: &serde_json::Value) -> Result<LoadedTrajectory> {
    let bad = |m: &str| MtsError::InvalidInput(format!("trajectory file: {m}"));
    let tree = Tree::from_json(&value["tree"])?;
    let costs: Vec<Vec<f64>> = serde_json::from_value(value["costs"].clone())?;
    let kappa = value["kappa"].as_f64().ok_or_else(|| bad("missing kappa"))?;
    let tau = value["tau"].as_f64().ok_or_else(|| bad("missing tau"))?;
    let q0: Vec<f64> = serde_json::from_value(value["q0"].clone())?;
    let states: Vec<Vec<f64>> = serde_json::from_value(value["states"].clone())?;
    let audits: Vec<StepAudit> = serde_json::from_value(value["audits"].clone())?;
    let s_on = value["s_on"].as_f64().ok_or_else(|| bad("missing s_on"))?;
    let m_on = value["m_on"].as_f64().ok_or_else(|| bad("missing m_on"))?;
    if states.len() != costs.len() || audits.len() != costs.len() {
        return Err(bad("states/audits/costs length mismatch"));
    }
    let x0 = crate::tree::delta_map(&tree, &q0);
    Ok(LoadedTrajectory {
        tree,
        costs,
        kappa,
        tau,
        trajectory: Trajectory { q0, x0, states, audits, s_on, m_on },
    })
}

/// Re-run the potential audits of a stored trajectory against an offline
/// comparator trajectory.
pub fn audit_trajectory(
    loaded: &LoadedTrajectory,
    off: &OfflineTrajectory,
) -> Result<AuditReport> {
    let tree = &loaded.tree;
    let params = derive_params(tree);
    let traj = &loaded.trajectory;
    if off.states.len() != loaded.costs.len() + 1 {
        return Err(MtsError::InvalidInput(
            "offline trajectory length does not match costs".into(),
        ));
    }
    let mut steps = Vec::new();
    let mut violations = 0u64;
    let mut q_prev = traj.q0.clone();
    for (t, c) in loaded.costs.iter().enumerate() {
        let q_next = &traj.states[t];
        let audit = &traj.audits[t];
        let z = point_mass_x(tree, off.states[t + 1]);
        let service = check_service_inequality(
            tree,
            &params,
            &q_prev,
            q_next,
            audit.service,
            c,
            &z,
            loaded.kappa,
            audit.substeps,
        )?;
        let movement = check_movement_inequality(
            tree,
            &params,
            &q_prev,
            q_next,
            audit.service,
            audit.movement,
            audit.pos_movement,
            c,
            loaded.kappa,
            loaded.tau,
            audit.substeps,
        )?;
        violations += u64::from(!service.certified);
        violations += movement.iter().filter(|m| !m.certified).count() as u64;
        steps.push(StepChecks { step: t, service, movement });
        q_prev = q_next.clone();
    }
    let fine = check_fine_competitiveness(
        tree,
        &params,
        traj,
        &loaded.costs,
        &off.states,
        off.service,
        off.movement,
        loaded.kappa,
        loaded.tau,
    )?;
    violations += u64::from(!fine.service_check.certified);
    violations += u64::from(!fine.movement_check.certified);
    Ok(AuditReport { steps, fine, violations })
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| MtsError::InvalidInput(format!("{name}: {e}")))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Run one experiment end to end and write traj.json, off.json, audit.json,
/// and a ratios.csv row under `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RatioRow> {
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Stage: tree acquisition.
    let mut metric = None;
    let raw_tree = match &config.tree {
        TreeSource::File { path } => stage("load tree", Tree::load(Path::new(path)))?,
        TreeSource::Generated { leaves, max_depth } => {
            stage("generate tree", random_hst7(&mut rng, *leaves, *max_depth))?
        }
        TreeSource::Metric { path } => {
            let m = stage("load metric", FiniteMetric::load(Path::new(path)))?;
            let seed = rng.gen::<u64>();
            let t = stage("embed metric", crate::embedding::frt_embed(&m, seed))?;
            metric = Some(m);
            t
        }
    };
    let needs_reshape = config.reshape || matches!(config.tree, TreeSource::Metric { .. });
    let tree = if needs_reshape {
        let (t, report) = stage("reshape", reshape(&raw_tree))?;
        write_json(&out_dir.join("reshape.json"), &serde_json::to_value(&report)?)?;
        t
    } else {
        raw_tree
    };
    let violations = validate_tree(&tree, config.tau);
    if !violations.is_empty() {
        return Err(MtsError::InvalidInput(format!(
            "validate: tree is not a {}-HST at node {} (ratio {:.6})",
            config.tau, violations[0].child, violations[0].ratio
        )));
    }
    if let Some(m) = &metric {
        // Realized stretch of the tree actually used for the run.
        let mut max = 0.0f64;
        let mut sum = 0.0;
        let mut pairs = 0u64;
        for i in 0..m.labels.len() {
            for j in (i + 1)..m.labels.len() {
                let a = tree.leaf_by_label(&m.labels[i]).ok_or_else(|| {
                    MtsError::InvalidInput(format!("embed: leaf {} lost", m.labels[i]))
                })?;
                let b = tree.leaf_by_label(&m.labels[j]).ok_or_else(|| {
                    MtsError::InvalidInput(format!("embed: leaf {} lost", m.labels[j]))
                })?;
                let s = tree.leaf_distance(a, b) / m.dist[i][j];
                max = max.max(s);
                sum += s;
                pairs += 1;
            }
        }
        write_json(
            &out_dir.join("stretch.json"),
            &serde_json::json!({
                "pairs": pairs,
                "max": max,
                "mean": if pairs > 0 { sum / pairs as f64 } else { 1.0 },
            }),
        )?;
    }

    let params = derive_params(&tree);
    let n = tree.n_leaves();
    let kappa = config
        .kappa
        .unwrap_or_else(|| match &config.tree {
            TreeSource::Metric { .. } => 8.0 * (n.max(2) as f64).ln(),
            _ => 1.0,
        })
        .max(1.0);

    let start = match &config.start {
        Some(label) => tree
            .leaf_by_label(label)
            .ok_or_else(|| MtsError::InvalidInput(format!("start leaf {label:?} not found")))?,
        None => tree.leaves[0],
    };

    // Stage: online run with streamed costs.
    let mut stream = CostStream::new(config.costs.clone(), &tree, rng.gen::<u64>())?;
    let q0 = point_mass_q(&tree, &params, start);
    let state0 = stage("run", OnlineState::new(&tree, q0))?;
    let mut traj = Trajectory {
        q0: state0.q.clone(),
        x0: state0.x.clone(),
        states: Vec::new(),
        audits: Vec::new(),
        s_on: 0.0,
        m_on: 0.0,
    };
    let mut costs: Vec<Vec<f64>> = Vec::new();
    let mut cur = state0;
    for t in 0..config.horizon {
        let c = stream.next(&tree, &cur.x);
        let (next, audit) = stage(
            "run",
            split_step(&tree, &params, &cur, &c, kappa, config.tau)
                .map_err(|e| MtsError::InvalidInput(format!("step {t}: {e}"))),
        )?;
        traj.s_on += audit.service;
        traj.m_on += audit.movement;
        traj.states.push(next.q.clone());
        traj.audits.push(audit);
        costs.push(c);
        cur = next;
    }

    // Stage: offline optimum from the same start.
    let off = stage("offline", offline::optimal(&tree, &costs, start))?;

    // Stage: audits.
    let loaded = LoadedTrajectory {
        tree: tree.clone(),
        costs: costs.clone(),
        kappa,
        tau: config.tau,
        trajectory: traj,
    };
    let report = stage("audit", audit_trajectory(&loaded, &off))?;

    write_json(
        &out_dir.join("traj.json"),
        &trajectory_to_json(&tree, &costs, kappa, config.tau, &loaded.trajectory),
    )?;
    write_json(&out_dir.join("off.json"), &off.to_json(&tree))?;
    write_json(&out_dir.join("audit.json"), &serde_json::to_value(&report)?)?;

    let traj = &loaded.trajectory;
    let row = RatioRow {
        label: config.label.clone(),
        seed: config.seed,
        n,
        horizon: config.horizon,
        kappa,
        tau: config.tau,
        s_on: traj.s_on,
        m_on: traj.m_on,
        s_off: off.service,
        m_off: off.movement,
        cost_star: off.total,
        service_ratio: traj.s_on / off.total,
        movement_ratio: traj.m_on / (kappa * traj.s_on),
        fine_service_slack: report.fine.service_check.margin,
        fine_movement_slack: report.fine.movement_check.margin,
        audit_violations: report.violations,
    };
    let csv_path = out_dir.join("ratios.csv");
    let fresh = !csv_path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)?;
    if fresh {
        writeln!(file, "{RATIO_CSV_HEADER}")?;
    }
    writeln!(file, "{}", row.to_csv())?;
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::delta_map;

    #[test]
    fn constant_costs_are_all_ones() {
        let t = Tree::star(&[1.0, 1.0]).unwrap();
        let costs = generate_costs(CostKind::Constant { value: 1.0 }, &t, 5, 0).unwrap();
        assert_eq!(costs, vec![vec![1.0, 1.0]; 5]);
    }

    #[test]
    fn chase_targets_first_leaf_on_uniform_tie() {
        let t = Tree::star(&[1.0, 1.0]).unwrap();
        let params = derive_params(&t);
        let q = crate::tree::uniform_q(&t, &params);
        let x = delta_map(&t, &q);
        let mut stream = CostStream::new(CostKind::Chase, &t, 9).unwrap();
        let c = stream.next(&t, &x);
        assert_eq!(c, vec![1.0, 0.0]);
        assert!(generate_costs(CostKind::Chase, &t, 3, 0).is_err());
    }

    #[test]
    fn random_costs_deterministic_per_seed() {
        let t = Tree::star(&[1.0, 1.0, 1.0]).unwrap();
        let a = generate_costs(CostKind::Random { density: 0.5 }, &t, 10, 7).unwrap();
        let b = generate_costs(CostKind::Random { density: 0.5 }, &t, 10, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_costs(CostKind::Random { density: 0.5 }, &t, 10, 8).unwrap();
        assert_ne!(a, c);
        let zeros = a.iter().flatten().filter(|&&v| v == 0.0).count();
        assert!(zeros > 0);
    }

    #[test]
    fn spike_hits_one_leaf_with_scaled_value() {
        let t = Tree::star(&[1.0, 2.0]).unwrap();
        let costs = generate_costs(CostKind::Spike, &t, 20, 3).unwrap();
        for c in costs {
            let nz: Vec<f64> = c.iter().copied().filter(|&v| v > 0.0).collect();
            assert_eq!(nz, vec![2e6]);
        }
    }

    #[test]
    fn random_hst7_is_valid_with_exact_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let n = rng.gen_range(2..=32);
            let depth = rng.gen_range(3..=5);
            let t = random_hst7(&mut rng, n, depth).unwrap();
            assert_eq!(t.n_leaves(), n);
            assert!(t.depth <= depth);
            assert!(validate_tree(&t, 7.0).is_empty());
            crate::tree::validate_conditional(&t, &random_conditional(&t, &mut rng)).unwrap();
            let z = random_configuration(&t, &mut rng, true);
            assert!((z[t.root] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn experiment_constant_one_has_unit_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig {
            label: "const".into(),
            tree: TreeSource::Generated { leaves: 4, max_depth: 3 },
            costs: CostKind::Constant { value: 1.0 },
            horizon: 10,
            kappa: Some(1.0),
            tau: 7.0,
            seed: 5,
            reshape: false,
            start: None,
        };
        let row = run_experiment(&config, dir.path()).unwrap();
        assert_eq!(row.s_on, 10.0);
        assert_eq!(row.m_on, 0.0);
        assert_eq!(row.service_ratio, 1.0);
        assert_eq!(row.audit_violations, 0);
        for f in ["traj.json", "off.json", "audit.json", "ratios.csv"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
    }

    #[test]
    fn experiment_reproducible_bytes() {
        let config = ExperimentConfig {
            label: "rep".into(),
            tree: TreeSource::Generated { leaves: 6, max_depth: 4 },
            costs: CostKind::Random { density: 0.4 },
            horizon: 15,
            kappa: Some(2.0),
            tau: 7.0,
            seed: 99,
            reshape: false,
            start: None,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_experiment(&config, d1.path()).unwrap();
        run_experiment(&config, d2.path()).unwrap();
        for f in ["traj.json", "off.json", "audit.json", "ratios.csv"] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical runs");
        }
    }

    #[test]
    fn audit_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig {
            label: "chase".into(),
            tree: TreeSource::Generated { leaves: 5, max_depth: 3 },
            costs: CostKind::Chase,
            horizon: 12,
            kappa: Some(1.0),
            tau: 7.0,
            seed: 1,
            reshape: false,
            start: None,
        };
        let row = run_experiment(&config, dir.path()).unwrap();
        assert_eq!(row.audit_violations, 0);

        let text = std::fs::read_to_string(dir.path().join("traj.json")).unwrap();
        let loaded = trajectory_from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        let off_text = std::fs::read_to_string(dir.path().join("off.json")).unwrap();
        let off =
            OfflineTrajectory::from_json(&serde_json::from_str(&off_text).unwrap(), &loaded.tree)
                .unwrap();
        let report = audit_trajectory(&loaded, &off).unwrap();
        assert_eq!(report.violations, 0);
        assert_eq!(report.steps.len(), 12);
    }

    #[test]
    fn experiment_start_label_and_stage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = ExperimentConfig {
            label: "start".into(),
            tree: TreeSource::Generated { leaves: 3, max_depth: 2 },
            costs: CostKind::Constant { value: 0.5 },
            horizon: 2,
            kappa: Some(1.0),
            tau: 7.0,
            seed: 2,
            reshape: false,
            start: Some("n2".into()),
        };
        run_experiment(&config, dir.path()).unwrap();
        config.start = Some("missing".into());
        assert!(run_experiment(&config, dir.path()).is_err());
        config.start = None;
        config.tree = TreeSource::File { path: "/nonexistent/tree.json".into() };
        let err = run_experiment(&config, dir.path()).unwrap_err().to_string();
        assert!(err.contains("load tree"), "{err}");
    }
}
