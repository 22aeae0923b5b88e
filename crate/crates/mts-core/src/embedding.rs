use crate::error::{MtsError, Result};
use crate::mirror::{run, Trajectory};
use crate::offline::{self, OfflineTrajectory};
use crate::potentials::{check_fine_competitiveness, FineReport};
use crate::reshape::{reshape, ReshapeReport};
use crate::tree::{derive_params, point_mass_q, Tree, TreeDef};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct FiniteMetric {
    pub labels: Vec<String>,
    pub dist: Vec<Vec<f64>>,
}

impl FiniteMetric {
    pub fn new(labels: Vec<String>, dist: Vec<Vec<f64>>) -> Result<FiniteMetric> {
        let m = FiniteMetric { labels, dist };
        m.validate()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn uniform(n: usize) -> FiniteMetric {
        let labels = (0..n).map(|i| format!("p{i}")).collect();
        let dist = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        FiniteMetric { labels, dist }
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let bad = |m: String| MtsError::InvalidInput(format!("metric: {m}"));
        if n == 0 {
            return Err(bad("no points".into()));
        }
        if self.dist.len() != n || self.dist.iter().any(|r| r.len() != n) {
            return Err(bad(format!("distance matrix must be {n}x{n}")));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.labels {
            if !seen.insert(l) {
                return Err(bad(format!("duplicate label {l:?}")));
            }
        }
        for i in 0..n {
            if self.dist[i][i] != 0.0 {
                return Err(bad(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let d = self.dist[i][j];
                if !d.is_finite() || d < 0.0 {
                    return Err(bad(format!("invalid distance d[{i}][{j}] = {d}")));
                }
                if i != j && d == 0.0 {
                    return Err(bad(format!("distinct points {i}, {j} at distance 0")));
                }
                if (d - self.dist[j][i]).abs() > 1e-12 * (1.0 + d) {
                    return Err(bad(format!("asymmetry at ({i}, {j})")));
                }
                for k in 0..n {
                    if d > self.dist[i][k] + self.dist[k][j] + 1e-9 * (1.0 + d) {
                        return Err(bad(format!(
                            "triangle violation: d({i},{j}) > d({i},{k}) + d({k},{j})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "labels": self.labels, "dist": self.dist })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<FiniteMetric> {
        let labels: Vec<String> = serde_json::from_value(value["labels"].clone())?;
        let dist: Vec<Vec<f64>> = serde_json::from_value(value["dist"].clone())?;
        FiniteMetric::new(labels, dist)
    }

    pub fn load(path: &std::path::Path) -> Result<FiniteMetric> {
        let text = std::fs::read_to_string(path)?;
        FiniteMetric::from_json(&serde_json::from_str(&text)?)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

fn pow2(k: i32) -> f64 {
    2f64.powi(k)
}

/// Random 2-HST embedding by hierarchical ball carving: radius scale
/// beta = 2^U with U uniform on [0,1), a uniform random center permutation,
/// and level-k carves of radius beta 2^(k-2). A cluster split at level k puts
/// each part under a node of weight beta 2^(k-1); single-part carves descend
/// a level without creating a node. The tree distance between points split at
/// level k is at least beta 2^k, which bounds the cluster diameter, so the
/// output dominates the input metric for every draw.
pub fn frt_embed(metric: &FiniteMetric, seed: u64) -> Result<Tree> {
    metric.validate()?;
    let n = metric.n();
    if n == 1 {
        return Tree::from_def(vec![TreeDef::Leaf {
            weight: 1.0,
            label: metric.labels[0].clone(),
        }]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = 2f64.powf(rng.gen::<f64>());
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            dmin = dmin.min(metric.dist[i][j]);
            dmax = dmax.max(metric.dist[i][j]);
        }
    }
    let norm: Vec<Vec<f64>> = metric
        .dist
        .iter()
        .map(|row| row.iter().map(|&d| d / dmin).collect())
        .collect();
    let diam = dmax / dmin;

    let mut k_top = 0;
    while beta * pow2(k_top) < diam {
        k_top += 1;
    }

    struct Ctx<'a> {
        norm: &'a [Vec<f64>],
        perm: &'a [usize],
        labels: &'a [String],
        beta: f64,
        scale: f64,
    }

    fn carve(ctx: &Ctx, cluster: &[usize], radius: f64) -> Vec<Vec<usize>> {
        let mut assigned = vec![false; cluster.len()];
        let mut parts = Vec::new();
        for &c in ctx.perm {
            let mut part = Vec::new();
            for (slot, &x) in cluster.iter().enumerate() {
                if !assigned[slot] && ctx.norm[x][c] <= radius {
                    assigned[slot] = true;
                    part.push(x);
                }
            }
            if !part.is_empty() {
                parts.push(part);
            }
        }
        parts
    }

    fn subtree(ctx: &Ctx, cluster: Vec<usize>, k: i32, weight: f64) -> TreeDef {
        if cluster.len() == 1 {
            return TreeDef::Leaf {
                weight,
                label: ctx.labels[cluster[0]].clone(),
            };
        }
        let mut kk = k;
        loop {
            let parts = carve(ctx, &cluster, ctx.beta * pow2(kk - 2));
            if parts.len() > 1 {
                let child_w = ctx.beta * pow2(kk - 1) * ctx.scale;
                let children = parts
                    .into_iter()
                    .map(|part| subtree(ctx, part, kk - 1, child_w))
                    .collect();
                return TreeDef::Internal { weight, children };
            }
            kk -= 1;
        }
    }

    let ctx = Ctx {
        norm: &norm,
        perm: &perm,
        labels: &metric.labels,
        beta,
        scale: dmin,
    };

    // The root is weightless; descend until the whole space first splits.
    let mut kk = k_top;
    let all: Vec<usize> = (0..n).collect();
    let root_children = loop {
        let parts = carve(&ctx, &all, beta * pow2(kk - 2));
        if parts.len() > 1 {
            let child_w = beta * pow2(kk - 1) * dmin;
            break parts
                .into_iter()
                .map(|part| subtree(&ctx, part, kk - 1, child_w))
                .collect::<Vec<_>>();
        }
        kk -= 1;
    };
    Tree::from_def(root_children)
}

#[derive(Debug, Clone)]
pub struct StretchReport {
    /// Mean of d_T/d_X over samples, per pair (diagonal zero).
    pub mean: Vec<Vec<f64>>,
    pub max_mean: f64,
    pub samples: u64,
}

/// Monte-Carlo per-pair stretch of the embedding.
pub fn estimate_stretch(metric: &FiniteMetric, samples: u64, seed: u64) -> Result<StretchReport> {
    if samples == 0 {
        return Err(MtsError::InvalidInput("need at least one sample".into()));
    }
    let n = metric.n();
    let mut acc = vec![vec![0.0f64; n]; n];
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let tree = frt_embed(metric, seeder.gen())?;
        let leaf_of: Vec<usize> = metric
            .labels
            .iter()
            .map(|l| tree.leaf_by_label(l).expect("leaf set = point set"))
            .collect();
        for i in 0..n {
            for j in (i + 1)..n {
                let r = tree.leaf_distance(leaf_of[i], leaf_of[j]) / metric.dist[i][j];
                acc[i][j] += r;
                acc[j][i] += r;
            }
        }
    }
    let mut max_mean = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            acc[i][j] /= samples as f64;
            max_mean = max_mean.max(acc[i][j]);
        }
    }
    Ok(StretchReport { mean: acc, max_mean, samples })
}

/// Exact earth-mover distance between two distributions over metric points,
/// by successive shortest augmenting paths on the transportation graph.
/// Intended for n <= 64.
pub fn earth_mover(metric: &FiniteMetric, a: &[f64], b: &[f64]) -> Result<f64> {
    let n = metric.n();
    if a.len() != n || b.len() != n {
        return Err(MtsError::InvalidInput("distribution length mismatch".into()));
    }
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    if (sa - sb).abs() > 1e-9 {
        return Err(MtsError::InvalidInput(format!(
            "mass mismatch: {sa} vs {sb}"
        )));
    }
    let mut supply: Vec<f64> = Vec::new();
    let mut demand: Vec<f64> = Vec::new();
    let mut src: Vec<usize> = Vec::new();
    let mut snk: Vec<usize> = Vec::new();
    for i in 0..n {
        let diff = a[i] - b[i];
        if diff > 1e-15 {
            supply.push(diff);
            src.push(i);
        } else if diff < -1e-15 {
            demand.push(-diff);
            snk.push(i);
        }
    }
    let (ns, nt) = (src.len(), snk.len());
    if ns == 0 {
        return Ok(0.0);
    }
    let mut flow = vec![vec![0.0f64; nt]; ns];
    let mut total = 0.0;
    let mut rounds = 0usize;
    loop {
        rounds += 1;
        if rounds > 4 * (ns + 1) * (nt + 1) {
            return Err(MtsError::Solver("transport augmentation did not converge".into()));
        }
        let rs: Vec<usize> = (0..ns).filter(|&i| supply[i] > 1e-15).collect();
        let rt: Vec<usize> = (0..nt).filter(|&j| demand[j] > 1e-15).collect();
        if rs.is_empty() || rt.is_empty() {
            break;
        }
        // Bellman-Ford over the bipartite residual graph: forward arcs
        // (i -> j) cost d, backward arcs (j -> i) cost -d where flow > 0.
        let big = f64::INFINITY;
        let mut dist_s = vec![big; ns];
        let mut dist_t = vec![big; nt];
        let mut parent_t: Vec<Option<usize>> = vec![None; nt];
        let mut parent_s: Vec<Option<usize>> = vec![None; ns];
        for &i in &rs {
            dist_s[i] = 0.0;
        }
        for _ in 0..(ns + nt + 1) {
            let mut changed = false;
            for i in 0..ns {
                if dist_s[i] == big {
                    continue;
                }
                for j in 0..nt {
                    let c = metric.dist[src[i]][snk[j]];
                    if dist_s[i] + c < dist_t[j] - 1e-15 {
                        dist_t[j] = dist_s[i] + c;
                        parent_t[j] = Some(i);
                        changed = true;
                    }
                }
            }
            for j in 0..nt {
                if dist_t[j] == big {
                    continue;
                }
                for i in 0..ns {
                    if flow[i][j] > 1e-15 {
                        let c = metric.dist[src[i]][snk[j]];
                        if dist_t[j] - c < dist_s[i] - 1e-15 {
                            dist_s[i] = dist_t[j] - c;
                            parent_s[i] = Some(j);
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut best: Option<usize> = None;
        for &j in &rt {
            if dist_t[j] < big && best.is_none_or(|b| dist_t[j] < dist_t[b]) {
                best = Some(j);
            }
        }
        let Some(end) = best else { break };

        // Trace back the augmenting path and find its bottleneck.
        let mut path: Vec<(usize, usize, bool)> = Vec::new(); // (i, j, forward)
        let mut j = end;
        let mut bottleneck = demand[end];
        loop {
            let i = parent_t[j].expect("path into sink");
            path.push((i, j, true));
            match parent_s[i] {
                None => {
                    bottleneck = bottleneck.min(supply[i]);
                    break;
                }
                Some(jp) => {
                    bottleneck = bottleneck.min(flow[i][jp]);
                    path.push((i, jp, false));
                    j = jp;
                }
            }
        }
        for &(i, j, fwd) in &path {
            if fwd {
                flow[i][j] += bottleneck;
            } else {
                flow[i][j] -= bottleneck;
            }
        }
        let (i0, _, _) = *path.last().unwrap();
        supply[i0] -= bottleneck;
        demand[end] -= bottleneck;
        total += bottleneck * dist_t[end];
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub tree: Tree,
    pub reshape_report: ReshapeReport,
    pub kappa: f64,
    pub trajectory: Trajectory,
    pub offline: OfflineTrajectory,
    pub fine: FineReport,
    /// Movement priced in the original metric (earth mover for n <= 64,
    /// otherwise the dominating tree movement).
    pub movement_metric: f64,
}

/// Embed, reshape to a 7-HST, then run the online algorithm from a point mass
/// on the first canonical leaf against the DP offline optimum. Costs are rows
/// over metric point order.
pub fn general_metric_pipeline(
    metric: &FiniteMetric,
    costs: &[Vec<f64>],
    kappa: Option<f64>,
    tau: f64,
    seed: u64,
) -> Result<PipelineRun> {
    let n = metric.n();
    if n < 2 {
        return Err(MtsError::InvalidInput(
            "pipeline needs at least two points".into(),
        ));
    }
    for (t, c) in costs.iter().enumerate() {
        if c.len() != n {
            return Err(MtsError::InvalidInput(format!(
                "cost {t} has {} entries for {n} points",
                c.len()
            )));
        }
    }
    let kappa = kappa.unwrap_or_else(|| 8.0 * (n as f64).ln()).max(1.0);
    let embedded = frt_embed(metric, seed)?;
    let (tree, reshape_report) = reshape(&embedded)?;
    let params = derive_params(&tree);

    // Reorder cost rows into the reshaped tree's canonical leaf order.
    let point_of_leaf: Vec<usize> = tree
        .leaves
        .iter()
        .map(|&l| {
            metric
                .index_of(tree.label_of(l))
                .expect("leaf labels come from the metric")
        })
        .collect();
    let tree_costs: Vec<Vec<f64>> = costs
        .iter()
        .map(|c| point_of_leaf.iter().map(|&p| c[p]).collect())
        .collect();

    let start = tree.leaves[0];
    let q0 = point_mass_q(&tree, &params, start);
    let trajectory = run(&tree, &params, q0, &tree_costs, kappa, tau)?;
    let offline = offline::optimal(&tree, &tree_costs, start)?;
    let fine = check_fine_competitiveness(
        &tree,
        &params,
        &trajectory,
        &tree_costs,
        &offline.states,
        offline.service,
        offline.movement,
        kappa,
        tau,
    )?;

    let movement_metric = if n <= 64 {
        let mut prev = leaf_distribution(&tree, &trajectory.x0, &point_of_leaf, n);
        let mut total = 0.0;
        for q in &trajectory.states {
            let x = crate::tree::delta_map(&tree, q);
            let cur = leaf_distribution(&tree, &x, &point_of_leaf, n);
            total += earth_mover(metric, &prev, &cur)?;
            prev = cur;
        }
        total
    } else {
        trajectory.m_on
    };

    Ok(PipelineRun {
        tree,
        reshape_report,
        kappa,
        trajectory,
        offline,
        fine,
        movement_metric,
    })
}

fn leaf_distribution(tree: &Tree, x: &[f64], point_of_leaf: &[usize], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, &l) in tree.leaves.iter().enumerate() {
        out[point_of_leaf[i]] += x[l];
    }
    out
}
