use crate::error::{MtsError, Result};
use crate::tree::{weighted_l1, Tree};

/// A leaf trajectory with its cost split. `total` is defined as
/// `service + movement` so the decomposition identity is exact.
#[derive(Debug, Clone)]
pub struct OfflineTrajectory {
    pub start: usize,
    /// Leaf node ids rho_0..rho_T (rho_0 == start).
    pub states: Vec<usize>,
    pub service: f64,
    pub movement: f64,
    pub total: f64,
}

impl OfflineTrajectory {
    pub fn to_json(&self, tree: &Tree) -> serde_json::Value {
        serde_json::json!({
            "start": tree.label_of(self.start),
            "states": self.states.iter().map(|&l| tree.label_of(l)).collect::<Vec<_>>(),
            "service": self.service,
            "movement": self.movement,
            "total": self.total,
        })
    }

    pub fn from_json(value: &serde_json::Value, tree: &Tree) -> Result<OfflineTrajectory> {
        let bad = |m: &str| MtsError::InvalidInput(format!("offline trajectory: {m}"));
        let start_label = value["start"].as_str().ok_or_else(|| bad("missing start"))?;
        let start = tree
            .leaf_by_label(start_label)
            .ok_or_else(|| bad(&format!("unknown start leaf {start_label:?}")))?;
        let states = value["states"]
            .as_array()
            .ok_or_else(|| bad("missing states"))?
            .iter()
            .map(|s| {
                let label = s.as_str().ok_or_else(|| bad("state is not a string"))?;
                tree.leaf_by_label(label)
                    .ok_or_else(|| bad(&format!("unknown leaf {label:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        if states.first() != Some(&start) {
            return Err(bad("states must begin at start"));
        }
        let service = value["service"].as_f64().ok_or_else(|| bad("missing service"))?;
        let movement = value["movement"].as_f64().ok_or_else(|| bad("missing movement"))?;
        let total = value["total"].as_f64().ok_or_else(|| bad("missing total"))?;
        Ok(OfflineTrajectory { start, states, service, movement, total })
    }
}

/// Pairwise leaf distances indexed by canonical leaf order.
pub fn distance_matrix(tree: &Tree) -> Vec<Vec<f64>> {
    let n = tree.n_leaves();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = tree.leaf_distance(tree.leaves[i], tree.leaves[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

fn validate_costs(tree: &Tree, costs: &[Vec<f64>]) -> Result<()> {
    for (t, c) in costs.iter().enumerate() {
        if c.len() != tree.n_leaves() {
            return Err(MtsError::InvalidInput(format!(
                "cost {t} has {} entries for {} leaves",
                c.len(),
                tree.n_leaves()
            )));
        }
        for (i, &v) in c.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(MtsError::InvalidInput(format!(
                    "cost[{t}][{i}] = {v} must be finite and nonnegative"
                )));
            }
        }
    }
    Ok(())
}

/// Optimal leaf trajectory for the cost sequence by dynamic programming:
/// f_t(l) = c_t(l) + min_{l'} (f_{t-1}(l') + d(l', l)), f_0(start) = 0.
/// Argmin ties resolve to staying put, then to the lowest leaf index.
pub fn optimal(tree: &Tree, costs: &[Vec<f64>], start_leaf: usize) -> Result<OfflineTrajectory> {
    let n = tree.n_leaves();
    let start_idx = tree
        .leaf_index(start_leaf)
        .ok_or_else(|| MtsError::InvalidInput(format!("node {start_leaf} is not a leaf")))?;
    validate_costs(tree, costs)?;
    let d = distance_matrix(tree);

    let mut f = vec![f64::INFINITY; n];
    f[start_idx] = 0.0;
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(costs.len());

    for c in costs {
        let mut f_next = vec![0.0; n];
        let mut bp = vec![0usize; n];
        for l in 0..n {
            // Consider staying first so exact ties keep the server in place.
            let mut best = f[l];
            let mut arg = l;
            for l2 in 0..n {
                if l2 == l {
                    continue;
                }
                let cand = f[l2] + d[l2][l];
                if cand < best {
                    best = cand;
                    arg = l2;
                }
            }
            f_next[l] = c[l] + best;
            bp[l] = arg;
        }
        back.push(bp);
        f = f_next;
    }

    let mut cur = 0;
    for l in 1..n {
        if f[l] < f[cur] {
            cur = l;
        }
    }
    let mut rev = vec![cur];
    for bp in back.iter().rev() {
        cur = bp[cur];
        rev.push(cur);
    }
    rev.reverse();
    let states: Vec<usize> = rev.into_iter().map(|i| tree.leaves[i]).collect();

    let (service, movement) = decompose(tree, costs, &states)?;
    Ok(OfflineTrajectory {
        start: start_leaf,
        states,
        service,
        movement,
        total: service + movement,
    })
}

/// Service/movement split of a leaf trajectory rho_0..rho_T.
pub fn decompose(tree: &Tree, costs: &[Vec<f64>], states: &[usize]) -> Result<(f64, f64)> {
    if states.len() != costs.len() + 1 {
        return Err(MtsError::InvalidInput(format!(
            "trajectory has {} states for {} costs",
            states.len(),
            costs.len()
        )));
    }
    validate_costs(tree, costs)?;
    let mut service = 0.0;
    let mut movement = 0.0;
    for (t, c) in costs.iter().enumerate() {
        let here = tree
            .leaf_index(states[t + 1])
            .ok_or_else(|| MtsError::InvalidInput(format!("state {} is not a leaf", t + 1)))?;
        let prev = tree
            .leaf_index(states[t])
            .ok_or_else(|| MtsError::InvalidInput(format!("state {t} is not a leaf")))?;
        service += c[here];
        movement += tree.leaf_distance(tree.leaves[prev], tree.leaves[here]);
    }
    Ok((service, movement))
}

/// Service/movement split of a fractional trajectory z_0..z_T in K_T
/// (marginal coordinates); movement uses the weighted l1 metric.
pub fn decompose_fractional(
    tree: &Tree,
    costs: &[Vec<f64>],
    states: &[Vec<f64>],
) -> Result<(f64, f64)> {
    if states.len() != costs.len() + 1 {
        return Err(MtsError::InvalidInput(format!(
            "trajectory has {} states for {} costs",
            states.len(),
            costs.len()
        )));
    }
    validate_costs(tree, costs)?;
    let mut service = 0.0;
    let mut movement = 0.0;
    for (t, c) in costs.iter().enumerate() {
        let z = &states[t + 1];
        if z.len() != tree.nodes.len() {
            return Err(MtsError::InvalidInput(format!("state {} length mismatch", t + 1)));
        }
        for (i, &l) in tree.leaves.iter().enumerate() {
            service += c[i] * z[l];
        }
        movement += weighted_l1(tree, &states[t], z);
    }
    Ok((service, movement))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TreeDef;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn star2() -> Tree {
        Tree::star(&[1.0, 1.0]).unwrap()
    }

    fn random_costs(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect()
    }

    #[test]
    fn zero_costs_stay_put() {
        let t = star2();
        let costs = vec![vec![0.0, 0.0]; 4];
        let off = optimal(&t, &costs, t.leaves[1]).unwrap();
        assert_eq!(off.states, vec![t.leaves[1]; 5]);
        assert_eq!(off.total, 0.0);
    }

    #[test]
    fn expensive_leaf_forces_immediate_move() {
        let t = star2();
        let costs = vec![vec![5.0, 0.0], vec![5.0, 0.0]];
        let off = optimal(&t, &costs, t.leaves[0]).unwrap();
        assert_eq!(off.states, vec![t.leaves[0], t.leaves[1], t.leaves[1]]);
        assert_eq!(off.service, 0.0);
        assert_eq!(off.movement, 2.0);
        assert_eq!(off.total, 2.0);
    }

    #[test]
    fn alternating_movement_on_star() {
        let t = star2();
        let (a, b) = (t.leaves[0], t.leaves[1]);
        let costs = vec![vec![0.0, 0.0]; 3];
        let (service, movement) = decompose(&t, &costs, &[a, b, a, b]).unwrap();
        assert_eq!(service, 0.0);
        assert_eq!(movement, 6.0);
    }

    #[test]
    fn stationary_decompose_has_no_movement() {
        let t = star2();
        let costs = vec![vec![0.3, 0.7]; 3];
        let (service, movement) = decompose(&t, &costs, &[t.leaves[0]; 4]).unwrap();
        assert!((service - 0.9).abs() < 1e-15);
        assert_eq!(movement, 0.0);
    }

    #[test]
    fn decomposition_matches_total() {
        let t = balanced_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let costs = random_costs(&mut rng, t.n_leaves(), 20);
            let off = optimal(&t, &costs, t.leaves[0]).unwrap();
            let (s, m) = decompose(&t, &costs, &off.states).unwrap();
            assert_eq!(off.service, s);
            assert_eq!(off.movement, m);
            assert_eq!(off.total, s + m);
        }
    }

    fn balanced_tree() -> Tree {
        Tree::from_def(vec![
            TreeDef::Internal {
                weight: 7.0,
                children: vec![
                    TreeDef::Leaf { weight: 1.0, label: "a".into() },
                    TreeDef::Leaf { weight: 1.0, label: "b".into() },
                ],
            },
            TreeDef::Internal {
                weight: 7.0,
                children: vec![
                    TreeDef::Leaf { weight: 1.0, label: "c".into() },
                    TreeDef::Leaf { weight: 1.0, label: "d".into() },
                ],
            },
        ])
        .unwrap()
    }

    #[test]
    fn appending_costs_never_decreases_optimum() {
        let t = balanced_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let costs = random_costs(&mut rng, t.n_leaves(), 30);
        let mut prev = 0.0;
        for k in 0..=costs.len() {
            let off = optimal(&t, &costs[..k], t.leaves[0]).unwrap();
            assert!(off.total >= prev - 1e-12);
            prev = off.total;
        }
    }

    #[test]
    fn distance_matrix_is_a_metric() {
        let t = balanced_tree();
        let d = distance_matrix(&t);
        let n = t.n_leaves();
        for i in 0..n {
            assert_eq!(d[i][i], 0.0);
            for j in 0..n {
                assert_eq!(d[i][j], d[j][i]);
                for k in 0..n {
                    assert!(d[i][k] <= d[i][j] + d[j][k] + 1e-12);
                }
            }
        }
        assert_eq!(d[0][1], 2.0);
        assert_eq!(d[0][2], 16.0);
    }

    #[test]
    fn fractional_decompose_matches_integral_on_point_masses() {
        let t = balanced_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let costs = random_costs(&mut rng, t.n_leaves(), 10);
        let off = optimal(&t, &costs, t.leaves[2]).unwrap();
        let zs: Vec<Vec<f64>> = off
            .states
            .iter()
            .map(|&l| crate::tree::point_mass_x(&t, l))
            .collect();
        let (s, m) = decompose_fractional(&t, &costs, &zs).unwrap();
        assert!((s - off.service).abs() < 1e-12);
        assert!((m - off.movement).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let t = balanced_tree();
        let costs = vec![vec![1.0, 0.0, 0.0, 0.0]; 2];
        let off = optimal(&t, &costs, t.leaves[0]).unwrap();
        let j = off.to_json(&t);
        let back = OfflineTrajectory::from_json(&j, &t).unwrap();
        assert_eq!(back.states, off.states);
        assert_eq!(back.total, off.total);
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = star2();
        assert!(optimal(&t, &[vec![1.0]], t.leaves[0]).is_err());
        assert!(optimal(&t, &[vec![-1.0, 0.0]], t.leaves[0]).is_err());
        assert!(optimal(&t, &[vec![f64::INFINITY, 0.0]], t.leaves[0]).is_err());
        assert!(optimal(&t, &[], t.root).is_err());
        assert!(decompose(&t, &[vec![0.0, 0.0]], &[t.leaves[0]]).is_err());
    }
}
