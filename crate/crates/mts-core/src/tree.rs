use crate::error::{MtsError, Result};
use serde::{Deserialize, Serialize};

/// Centralized numeric tolerances used across solvers, validators and audits.
pub mod tol {
    /// Bisection termination on the simplex mass equation |g(beta) - 1|.
    pub const SOLVER_G: f64 = 1e-13;
    /// Max bisection iterations.
    pub const SOLVER_ITERS: u32 = 200;
    /// KKT stationarity residual accepted from the projection solver.
    pub const KKT_RESIDUAL: f64 = 1e-8;
    /// Conditional/marginal states must sum correctly to this absolute error.
    pub const STATE_SUM: f64 = 1e-12;
    /// Per-step inequality audits: relative slack (times the instance scale).
    pub const PER_STEP_REL: f64 = 1e-8;
    /// Cumulative (whole-trajectory) audits: relative slack.
    pub const CUMULATIVE_REL: f64 = 1e-6;
    /// Slack for the per-projection lemma checks.
    pub const LEMMA_SLACK: f64 = 1e-9;
    /// Multipliers recovered for clipped coordinates may undershoot zero by this much.
    pub const ALPHA_CLAMP: f64 = 1e-10;
    /// Relative slack when validating HST weight ratios.
    pub const HST_RATIO_SLACK: f64 = 1e-12;
}

#[derive(Debug, Clone)]
pub struct Node {
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Edge weight of the node (metric units); 0.0 at the root, which carries none.
    pub weight: f64,
    pub label: Option<String>,
    pub leaf_count: usize,
    pub depth: usize,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Rooted weighted tree in canonical post-order indexing (children before
/// parents, root last). Canonical leaf order is post-order appearance.
#[derive(Debug, Clone)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub root: usize,
    pub leaves: Vec<usize>,
    /// Combinatorial depth: max number of edges on a root-leaf path.
    pub depth: usize,
    /// Root-to-node weight sums (weight of the node included; 0 at root).
    path_sum: Vec<f64>,
}

/// Per-node derived parameters, indexed like the tree nodes.
/// Entries at the root are unused placeholders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeParams {
    /// Conditional probability of the uniform leaf distribution.
    pub theta: Vec<f64>,
    /// Per-node learning rate: 1 + ln(1/theta).
    pub eta: Vec<f64>,
    /// Per-node noise floor: theta / eta.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HstViolation {
    pub parent: usize,
    pub child: usize,
    pub ratio: f64,
    pub limit: f64,
    pub message: String,
}

/// Nested construction helper for generators and tests.
#[derive(Debug, Clone)]
pub enum TreeDef {
    Leaf { weight: f64, label: String },
    Internal { weight: f64, children: Vec<TreeDef> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum WeightRepr {
    Float(f64),
    Decimal(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeRepr {
    id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<WeightRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TreeRepr {
    root: u64,
    nodes: Vec<NodeRepr>,
}

struct RawNode {
    parent: Option<usize>,
    children: Vec<usize>,
    weight: f64,
    label: Option<String>,
}

impl Tree {
    /// Assemble from parallel arrays in arbitrary order; `parent[i] == None`
    /// exactly for the root. Children keep the relative order of appearance.
    pub fn from_parts(
        parents: Vec<Option<usize>>,
        weights: Vec<f64>,
        labels: Vec<Option<String>>,
    ) -> Result<Tree> {
        let n = parents.len();
        if weights.len() != n || labels.len() != n {
            return Err(MtsError::Structure("mismatched node arrays".into()));
        }
        let mut roots = Vec::new();
        let mut raw: Vec<RawNode> = Vec::with_capacity(n);
        for i in 0..n {
            match parents[i] {
                None => roots.push(i),
                Some(p) if p < n && p != i => {}
                Some(p) => {
                    return Err(MtsError::Structure(format!(
                        "node {i} has invalid parent {p}"
                    )))
                }
            }
            raw.push(RawNode {
                parent: parents[i],
                children: Vec::new(),
                weight: weights[i],
                label: labels[i].clone(),
            });
        }
        if roots.len() != 1 {
            return Err(MtsError::Structure(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        for i in 0..n {
            if let Some(p) = raw[i].parent {
                raw[p].children.push(i);
            }
        }
        for (i, node) in raw.iter().enumerate() {
            if i != root && !(node.weight.is_finite() && node.weight > 0.0) {
                return Err(MtsError::Structure(format!(
                    "node {i} has nonpositive or non-finite weight {}",
                    node.weight
                )));
            }
        }

        // Iterative post-order; also detects cycles/unreachable nodes.
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![(root, 0usize)];
        while let Some((u, ci)) = stack.pop() {
            if ci < raw[u].children.len() {
                stack.push((u, ci + 1));
                stack.push((raw[u].children[ci], 0));
            } else {
                order.push(u);
            }
        }
        if order.len() != n {
            return Err(MtsError::Structure(
                "tree has unreachable nodes or a cycle".into(),
            ));
        }
        let mut index = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            index[old] = new;
        }

        let mut nodes: Vec<Node> = order
            .iter()
            .map(|&old| Node {
                parent: raw[old].parent.map(|p| index[p]),
                children: raw[old].children.iter().map(|&c| index[c]).collect(),
                weight: if old == root { 0.0 } else { raw[old].weight },
                label: raw[old].label.clone(),
                leaf_count: 0,
                depth: 0,
            })
            .collect();
        let root = index[root];

        for i in 0..n {
            if nodes[i].is_leaf() {
                nodes[i].leaf_count = 1;
            } else {
                nodes[i].leaf_count = nodes[i].children.iter().map(|&c| nodes[c].leaf_count).sum();
            }
        }
        let mut path_sum = vec![0.0; n];
        for i in (0..n).rev() {
            if let Some(p) = nodes[i].parent {
                nodes[i].depth = nodes[p].depth + 1;
                path_sum[i] = path_sum[p] + nodes[i].weight;
            }
        }
        let mut leaves = Vec::new();
        let mut next_auto = 0usize;
        for i in 0..n {
            if nodes[i].is_leaf() {
                leaves.push(i);
                if nodes[i].label.is_none() {
                    nodes[i].label = Some(format!("n{next_auto}"));
                }
                next_auto += 1;
            }
        }
        let depth = leaves.iter().map(|&l| nodes[l].depth).max().unwrap_or(0);
        Ok(Tree {
            nodes,
            root,
            leaves,
            depth,
            path_sum,
        })
    }

    pub fn from_def(root_children: Vec<TreeDef>) -> Result<Tree> {
        let mut parents = vec![None];
        let mut weights = vec![0.0];
        let mut labels: Vec<Option<String>> = vec![None];
        fn add(
            def: &TreeDef,
            parent: usize,
            parents: &mut Vec<Option<usize>>,
            weights: &mut Vec<f64>,
            labels: &mut Vec<Option<String>>,
        ) {
            let id = parents.len();
            parents.push(Some(parent));
            match def {
                TreeDef::Leaf { weight, label } => {
                    weights.push(*weight);
                    labels.push(Some(label.clone()));
                }
                TreeDef::Internal { weight, children } => {
                    weights.push(*weight);
                    labels.push(None);
                    for c in children {
                        add(c, id, parents, weights, labels);
                    }
                }
            }
        }
        for c in &root_children {
            add(c, 0, &mut parents, &mut weights, &mut labels);
        }
        Tree::from_parts(parents, weights, labels)
    }

    /// Star with the given leaf weights; labels `n0, n1, ...`.
    pub fn star(weights: &[f64]) -> Result<Tree> {
        Tree::from_def(
            weights
                .iter()
                .enumerate()
                .map(|(i, &w)| TreeDef::Leaf {
                    weight: w,
                    label: format!("n{i}"),
                })
                .collect(),
        )
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn label_of(&self, node: usize) -> &str {
        self.nodes[node].label.as_deref().unwrap_or("")
    }

    pub fn leaf_by_label(&self, label: &str) -> Option<usize> {
        self.leaves
            .iter()
            .copied()
            .find(|&l| self.nodes[l].label.as_deref() == Some(label))
    }

    /// Canonical index (position in `leaves`) of a node known to be a leaf.
    pub fn leaf_index(&self, node: usize) -> Option<usize> {
        self.leaves.iter().position(|&l| l == node)
    }

    pub fn leaf_depth(&self, leaf: usize) -> usize {
        self.nodes[leaf].depth
    }

    /// Tree metric between two leaves: sum of weights along the connecting path.
    pub fn leaf_distance(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 0.0;
        }
        let mut u = a;
        let mut v = b;
        while self.nodes[u].depth > self.nodes[v].depth {
            u = self.nodes[u].parent.unwrap();
        }
        while self.nodes[v].depth > self.nodes[u].depth {
            v = self.nodes[v].parent.unwrap();
        }
        while u != v {
            u = self.nodes[u].parent.unwrap();
            v = self.nodes[v].parent.unwrap();
        }
        self.path_sum[a] + self.path_sum[b] - 2.0 * self.path_sum[u]
    }

    pub fn max_weight(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.weight)
            .fold(0.0f64, |a, b| a.max(b))
    }

    pub fn min_leaf_weight(&self) -> f64 {
        self.leaves
            .iter()
            .map(|&l| self.nodes[l].weight)
            .fold(f64::INFINITY, |a, b| a.min(b))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let nodes = (0..self.nodes.len())
            .map(|i| NodeRepr {
                id: i as u64,
                parent: self.nodes[i].parent.map(|p| p as u64),
                weight: if i == self.root {
                    None
                } else {
                    Some(WeightRepr::Float(self.nodes[i].weight))
                },
                label: self.nodes[i].label.clone(),
            })
            .collect();
        serde_json::to_value(TreeRepr {
            root: self.root as u64,
            nodes,
        })
        .expect("tree serialization cannot fail")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Tree> {
        let repr: TreeRepr = serde_json::from_value(value.clone())?;
        let n = repr.nodes.len();
        let mut id_to_ix = std::collections::BTreeMap::new();
        for (ix, node) in repr.nodes.iter().enumerate() {
            if id_to_ix.insert(node.id, ix).is_some() {
                return Err(MtsError::Structure(format!("duplicate node id {}", node.id)));
            }
        }
        let root_ix = *id_to_ix
            .get(&repr.root)
            .ok_or_else(|| MtsError::Structure(format!("root id {} not present", repr.root)))?;
        let mut parents = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for (ix, node) in repr.nodes.iter().enumerate() {
            let parent = match node.parent {
                None => None,
                Some(p) => Some(*id_to_ix.get(&p).ok_or_else(|| {
                    MtsError::Structure(format!("node {} references missing parent {p}", node.id))
                })?),
            };
            if parent.is_none() && ix != root_ix {
                return Err(MtsError::Structure(format!(
                    "node {} has no parent but is not the declared root",
                    node.id
                )));
            }
            let weight = match &node.weight {
                None => {
                    if ix != root_ix {
                        return Err(MtsError::Structure(format!(
                            "non-root node {} lacks a weight",
                            node.id
                        )));
                    }
                    0.0
                }
                Some(WeightRepr::Float(w)) => *w,
                Some(WeightRepr::Decimal(s)) => s.parse::<f64>().map_err(|_| {
                    MtsError::Structure(format!("node {}: unparseable weight {s:?}", node.id))
                })?,
            };
            parents.push(parent);
            weights.push(weight);
            labels.push(node.label.clone());
        }
        Tree::from_parts(parents, weights, labels)
    }

    pub fn load(path: &std::path::Path) -> Result<Tree> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        Tree::from_json(&value)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_json())?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Empty report iff the tree is a tau-HST: weights non-increasing along
/// root-leaf paths and shrinking by a factor tau below every weighted node.
pub fn validate_tree(tree: &Tree, tau: f64) -> Vec<HstViolation> {
    let mut out = Vec::new();
    for (u, node) in tree.nodes.iter().enumerate() {
        if u == tree.root {
            continue;
        }
        for &v in &node.children {
            let ratio = tree.nodes[v].weight / node.weight;
            let limit = 1.0 / tau;
            if ratio > limit * (1.0 + tol::HST_RATIO_SLACK) {
                out.push(HstViolation {
                    parent: u,
                    child: v,
                    ratio,
                    limit,
                    message: format!(
                        "edge ({u}, {v}): weight ratio {ratio} exceeds 1/tau = {limit}"
                    ),
                });
            }
        }
    }
    out
}

/// theta, eta, delta per node. theta is the exact leaf-count ratio converted
/// to float once; all logarithms natural.
pub fn derive_params(tree: &Tree) -> NodeParams {
    let n = tree.nodes.len();
    let mut theta = vec![1.0; n];
    let mut eta = vec![1.0; n];
    let mut delta = vec![1.0; n];
    for u in 0..n {
        if let Some(p) = tree.nodes[u].parent {
            theta[u] = tree.nodes[u].leaf_count as f64 / tree.nodes[p].leaf_count as f64;
            eta[u] = 1.0 + (1.0 / theta[u]).ln();
            delta[u] = theta[u] / eta[u];
        }
    }
    NodeParams { theta, eta, delta }
}

/// Adjust the largest coordinate of a sibling group so it sums to 1 exactly.
/// Nudge coordinates of a near-simplex vector so its left-to-right sum is
/// exactly 1.0. The last positive coordinate is replaced by the rounded
/// complement of its prefix sum: for prefix in [1/2, 1] the complement is
/// exact (Sterbenz), otherwise it is within a half ulp of numbers in (1/2, 1],
/// and 1 + delta with |delta| <= 2^-54 rounds to 1.0. Trailing zeros add
/// exactly, so they are left untouched.
pub fn exact_simplex_fix(p: &mut [f64]) {
    let mut j = p.len();
    while j > 0 {
        j -= 1;
        if p[j] == 0.0 && j > 0 {
            continue;
        }
        let prefix: f64 = p[..j].iter().sum();
        if prefix <= 1.0 {
            p[j] = 1.0 - prefix;
            return;
        }
        // The prefix alone exceeds 1 by rounding; this coordinate was at most
        // ulps of mass, absorb it and move left.
        p[j] = 0.0;
    }
}

pub fn fix_group_sum(q: &mut [f64], group: &[usize]) {
    let mut tmp: Vec<f64> = group.iter().map(|&v| q[v]).collect();
    exact_simplex_fix(&mut tmp);
    for (slot, &v) in group.iter().enumerate() {
        q[v] = tmp[slot];
    }
}

/// Conditional state of the uniform leaf distribution (q = theta, with exact
/// per-group sums).
pub fn uniform_q(tree: &Tree, params: &NodeParams) -> Vec<f64> {
    let mut q = params.theta.clone();
    q[tree.root] = 1.0;
    for node in &tree.nodes {
        if !node.is_leaf() {
            fix_group_sum(&mut q, &node.children);
        }
    }
    q
}

/// Point mass on `leaf`: along the root path children get 1 (siblings 0);
/// sibling groups off the path keep the uniform conditionals.
pub fn point_mass_q(tree: &Tree, params: &NodeParams, leaf: usize) -> Vec<f64> {
    let mut q = uniform_q(tree, params);
    let mut u = leaf;
    while let Some(p) = tree.nodes[u].parent {
        for &v in &tree.nodes[p].children {
            q[v] = if v == u { 1.0 } else { 0.0 };
        }
        u = p;
    }
    q
}

pub fn validate_conditional(tree: &Tree, q: &[f64]) -> Result<()> {
    if q.len() != tree.nodes.len() {
        return Err(MtsError::InvalidInput(
            "conditional state length mismatch".into(),
        ));
    }
    for (u, node) in tree.nodes.iter().enumerate() {
        if node.is_leaf() {
            continue;
        }
        let mut sum = 0.0;
        for &v in &node.children {
            if !(q[v] >= 0.0) || !q[v].is_finite() {
                return Err(MtsError::InvalidInput(format!(
                    "conditional q[{v}] = {} invalid",
                    q[v]
                )));
            }
            sum += q[v];
        }
        if (sum - 1.0).abs() > tol::STATE_SUM {
            return Err(MtsError::InvalidInput(format!(
                "children of node {u} sum to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// Marginal subtree masses x from conditional probabilities q; x[root] = 1.
pub fn delta_map(tree: &Tree, q: &[f64]) -> Vec<f64> {
    let n = tree.nodes.len();
    let mut x = vec![0.0; n];
    x[tree.root] = 1.0;
    for u in (0..n).rev() {
        if u == tree.root {
            continue;
        }
        let p = tree.nodes[u].parent.unwrap();
        x[u] = x[p] * q[u];
    }
    x
}

/// Marginal K_T state of the point mass on a leaf.
pub fn point_mass_x(tree: &Tree, leaf: usize) -> Vec<f64> {
    let mut x = vec![0.0; tree.nodes.len()];
    x[tree.root] = 1.0;
    let mut u = leaf;
    loop {
        x[u] = 1.0;
        match tree.nodes[u].parent {
            Some(p) => u = p,
            None => break,
        }
    }
    x
}

pub fn weighted_l1(tree: &Tree, x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for u in 0..tree.nodes.len() {
        if u != tree.root {
            s += tree.nodes[u].weight * (x[u] - y[u]).abs();
        }
    }
    s
}

/// Positive part: only mass leaving each subtree is charged.
pub fn weighted_l1_pos(tree: &Tree, x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for u in 0..tree.nodes.len() {
        if u != tree.root {
            s += tree.nodes[u].weight * (x[u] - y[u]).max(0.0);
        }
    }
    s
}

/// psi(x) = sum of w_u x_u over non-root nodes.
pub fn psi(tree: &Tree, x: &[f64]) -> f64 {
    let mut s = 0.0;
    for u in 0..tree.nodes.len() {
        if u != tree.root {
            s += tree.nodes[u].weight * x[u];
        }
    }
    s
}

/// Per-piece cost cap for the split step:
/// w_min / (2 (2 D_T + ln n)) * (tau - 3) / (tau kappa).
pub fn epsilon_threshold(tree: &Tree, kappa: f64, tau: f64) -> Result<f64> {
    if !(tau > 3.0) {
        return Err(MtsError::Domain(format!(
            "epsilon threshold requires tau > 3, got {tau}"
        )));
    }
    if !(kappa >= 1.0) {
        return Err(MtsError::Domain(format!("kappa must be >= 1, got {kappa}")));
    }
    let n = tree.n_leaves() as f64;
    let w_min = tree.min_leaf_weight();
    Ok(w_min / (2.0 * (2.0 * tree.depth as f64 + n.ln())) * (tau - 3.0) / (tau * kappa))
}
