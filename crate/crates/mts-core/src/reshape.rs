use crate::error::{MtsError, Result};
use crate::tree::Tree;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReshapeReport {
    pub original_depth: usize,
    pub new_depth: usize,
    pub original_nodes: usize,
    pub new_nodes: usize,
    /// Range of d_new / d_old over leaf pairs (after scaling).
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Weight multiplier applied to restore distance dominance (1.0 if none).
    pub scale_factor: f64,
    pub degenerate: bool,
}

/// Smallest integer k with 7^k >= w, with a relative slack so weights already
/// equal to a power of 7 (up to float noise) round to themselves.
fn power_exponent(w: f64) -> i32 {
    let target = w * (1.0 - 1e-12);
    let mut k = (w.ln() / 7f64.ln()).ceil() as i32;
    while pow7(k) < target {
        k += 1;
    }
    while k > i32::MIN + 1 && pow7(k - 1) >= target {
        k -= 1;
    }
    k
}

fn pow7(k: i32) -> f64 {
    7f64.powi(k)
}

struct Scratch {
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    k: Vec<i32>,
    label: Vec<Option<String>>,
    alive: Vec<bool>,
    root: usize,
}

impl Scratch {
    fn from_tree(tree: &Tree) -> Scratch {
        let n = tree.nodes.len();
        let mut s = Scratch {
            parent: vec![None; n],
            children: vec![Vec::new(); n],
            k: vec![0; n],
            label: vec![None; n],
            alive: vec![true; n],
            root: tree.root,
        };
        for (u, node) in tree.nodes.iter().enumerate() {
            s.parent[u] = node.parent;
            s.children[u] = node.children.clone();
            s.label[u] = node.label.clone();
            if u != tree.root {
                s.k[u] = power_exponent(node.weight);
            }
        }
        s
    }

    fn is_leaf(&self, u: usize) -> bool {
        self.children[u].is_empty()
    }

    /// Remove node u, splicing its children into its parent at u's position.
    fn splice(&mut self, u: usize) {
        let p = self.parent[u].expect("cannot splice the root");
        let pos = self.children[p].iter().position(|&c| c == u).unwrap();
        let kids = std::mem::take(&mut self.children[u]);
        for &c in &kids {
            self.parent[c] = Some(p);
        }
        self.children[p].splice(pos..pos + 1, kids);
        self.alive[u] = false;
    }

    /// Merge a single-leaf node u into its parent p: p becomes the leaf,
    /// keeping its own edge weight and taking u's label.
    fn merge_leaf(&mut self, u: usize) {
        let p = self.parent[u].expect("cannot merge the root");
        self.label[p] = self.label[u].take();
        self.children[p].clear();
        self.alive[u] = false;
    }

    fn leaf_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.parent.len()];
        let mut stack = vec![(self.root, 0usize)];
        while let Some((u, ci)) = stack.pop() {
            if ci < self.children[u].len() {
                stack.push((u, ci + 1));
                stack.push((self.children[u][ci], 0));
            } else if self.is_leaf(u) {
                counts[u] = 1;
                if let Some(p) = self.parent[u] {
                    counts[p] += counts[u];
                }
            } else if let Some(p) = self.parent[u] {
                counts[p] += counts[u];
            }
        }
        counts
    }

    fn nodes_in_postorder(&self) -> Vec<usize> {
        let mut order = Vec::new();
        let mut stack = vec![(self.root, 0usize)];
        while let Some((u, ci)) = stack.pop() {
            if ci < self.children[u].len() {
                stack.push((u, ci + 1));
                stack.push((self.children[u][ci], 0));
            } else {
                order.push(u);
            }
        }
        order
    }

    fn to_tree(&self) -> Result<Tree> {
        // Preorder renumbering keeps sibling order under from_parts, which
        // attaches children in ascending input id.
        let mut order = Vec::new();
        let mut stack = vec![self.root];
        while let Some(u) = stack.pop() {
            order.push(u);
            for &c in self.children[u].iter().rev() {
                stack.push(c);
            }
        }
        let mut index = vec![usize::MAX; self.parent.len()];
        for (new, &old) in order.iter().enumerate() {
            index[old] = new;
        }
        let parents: Vec<Option<usize>> = order
            .iter()
            .map(|&old| self.parent[old].map(|p| index[p]))
            .collect();
        let weights: Vec<f64> = order
            .iter()
            .map(|&old| if old == self.root { 0.0 } else { pow7(self.k[old]) })
            .collect();
        let labels: Vec<Option<String>> = order.iter().map(|&old| self.label[old].clone()).collect();
        Tree::from_parts(parents, weights, labels)
    }
}

fn validate_hst_input(tree: &Tree) -> Result<()> {
    for (u, node) in tree.nodes.iter().enumerate() {
        if u == tree.root {
            continue;
        }
        let p = node.parent.unwrap();
        if p != tree.root && tree.nodes[p].weight < node.weight * (1.0 - 1e-12) {
            return Err(MtsError::InvalidInput(format!(
                "weights increase along edge {p} -> {u}: {} < {}",
                tree.nodes[p].weight, node.weight
            )));
        }
    }
    Ok(())
}

fn pair_ratios(original: &Tree, reshaped: &Tree) -> Result<(f64, f64)> {
    let n = original.n_leaves();
    if reshaped.n_leaves() != n {
        return Err(MtsError::InvalidInput("leaf sets differ in size".into()));
    }
    let mut to_new = Vec::with_capacity(n);
    for &l in &original.leaves {
        let label = original.label_of(l);
        let m = reshaped
            .leaf_by_label(label)
            .ok_or_else(|| MtsError::InvalidInput(format!("leaf {label:?} missing after reshape")))?;
        to_new.push(m);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    // Exhaustive up to 512 leaves, evenly strided beyond that.
    let stride = if n <= 512 { 1 } else { n / 512 + 1 };
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n {
            let d_old = original.leaf_distance(original.leaves[i], original.leaves[j]);
            let d_new = reshaped.leaf_distance(to_new[i], to_new[j]);
            let r = d_new / d_old;
            lo = lo.min(r);
            hi = hi.max(r);
            j += stride;
        }
        i += stride;
    }
    if !lo.is_finite() {
        lo = 1.0;
        hi = 1.0;
    }
    Ok((lo, hi))
}

/// Distortion of the reshaped tree relative to the original: exact min/max of
/// d_new/d_old over leaf pairs, matched by label.
pub fn distortion_report(original: &Tree, reshaped: &Tree) -> Result<ReshapeReport> {
    let (ratio_min, ratio_max) = pair_ratios(original, reshaped)?;
    Ok(ReshapeReport {
        original_depth: original.depth,
        new_depth: reshaped.depth,
        original_nodes: original.nodes.len(),
        new_nodes: reshaped.nodes.len(),
        ratio_min,
        ratio_max,
        scale_factor: 1.0,
        degenerate: original.n_leaves() < 2,
    })
}

/// Reshape an HST into a 7-HST with depth <= ceil(log2 n) and uniform leaf
/// depth, preserving leaf labels and dominating the original metric:
/// 1. round weights up to powers of 7;
/// 2. contract internal edges with equal exponents;
/// 3. contract edges whose lower node holds more than half the parent leaves;
/// 4. cap leaf exponents one below their parent;
/// 5. pad shallow leaves with weight/7 chains to uniform depth;
/// 6. scale all weights by a power of 7 if any pair distance shrank.
pub fn reshape(tree: &Tree) -> Result<(Tree, ReshapeReport)> {
    if tree.n_leaves() < 2 {
        let out = tree.clone();
        let mut report = distortion_report(tree, &out)?;
        report.degenerate = true;
        return Ok((out, report));
    }
    validate_hst_input(tree)?;
    let mut s = Scratch::from_tree(tree);

    // Step 2: equal-exponent contraction (internal, non-root, non-root parent).
    loop {
        let mut contracted = false;
        for u in s.nodes_in_postorder() {
            if u == s.root || s.is_leaf(u) {
                continue;
            }
            let p = s.parent[u].unwrap();
            if p != s.root && s.k[u] == s.k[p] {
                s.splice(u);
                contracted = true;
                break;
            }
        }
        if !contracted {
            break;
        }
    }

    // Step 3: heavy-edge contraction halves leaf counts along every path.
    loop {
        let counts = s.leaf_counts();
        let mut contracted = false;
        for u in s.nodes_in_postorder() {
            if u == s.root {
                continue;
            }
            let p = s.parent[u].unwrap();
            if 2 * counts[u] > counts[p] {
                if s.is_leaf(u) {
                    s.merge_leaf(u);
                } else {
                    s.splice(u);
                }
                contracted = true;
                break;
            }
        }
        if !contracted {
            break;
        }
    }

    // Step 4: leaf edges may still match their parent's exponent.
    for u in s.nodes_in_postorder() {
        if u == s.root || !s.is_leaf(u) {
            continue;
        }
        let p = s.parent[u].unwrap();
        if p != s.root {
            s.k[u] = s.k[u].min(s.k[p] - 1);
        }
    }

    // Step 5: pad shallow leaves with descending chains; the label moves to
    // the bottom of the chain.
    let mut depth = vec![0usize; s.parent.len()];
    let mut max_depth = 0;
    for u in s.nodes_in_postorder().into_iter().rev() {
        if let Some(p) = s.parent[u] {
            depth[u] = depth[p] + 1;
        }
        if s.is_leaf(u) {
            max_depth = max_depth.max(depth[u]);
        }
    }
    let leaves: Vec<usize> = s
        .nodes_in_postorder()
        .into_iter()
        .filter(|&u| s.is_leaf(u) && u != s.root)
        .collect();
    for u in leaves {
        let missing = max_depth - depth[u];
        if missing == 0 {
            continue;
        }
        let label = s.label[u].take();
        let mut anchor = u;
        for step in 1..=missing {
            let id = s.parent.len();
            s.parent.push(Some(anchor));
            s.children.push(Vec::new());
            s.k.push(s.k[u] - step as i32);
            s.label.push(None);
            s.alive.push(true);
            s.children[anchor].push(id);
            anchor = id;
        }
        s.label[anchor] = label;
    }

    let unscaled = s.to_tree()?;

    // Step 6: restore dominance d_new >= d_old by a power-of-7 blowup.
    let mut to_new = Vec::with_capacity(tree.n_leaves());
    for &l in &tree.leaves {
        let m = unscaled
            .leaf_by_label(tree.label_of(l))
            .ok_or_else(|| MtsError::Structure("leaf lost during reshape".into()))?;
        to_new.push(m);
    }
    let mut shrink = 1.0f64;
    for i in 0..tree.n_leaves() {
        for j in (i + 1)..tree.n_leaves() {
            let d_old = tree.leaf_distance(tree.leaves[i], tree.leaves[j]);
            let d_new = unscaled.leaf_distance(to_new[i], to_new[j]);
            shrink = shrink.max(d_old / d_new);
        }
    }
    let (out, scale_factor) = if shrink > 1.0 + 1e-12 {
        let mut m = 0;
        while pow7(m) < shrink * (1.0 - 1e-12) {
            m += 1;
        }
        for k in s.k.iter_mut() {
            *k += m;
        }
        (s.to_tree()?, pow7(m))
    } else {
        (unscaled, 1.0)
    };

    let (ratio_min, ratio_max) = pair_ratios(tree, &out)?;
    let report = ReshapeReport {
        original_depth: tree.depth,
        new_depth: out.depth,
        original_nodes: tree.nodes.len(),
        new_nodes: out.nodes.len(),
        ratio_min,
        ratio_max,
        scale_factor,
        degenerate: false,
    };
    Ok((out, report))
}
