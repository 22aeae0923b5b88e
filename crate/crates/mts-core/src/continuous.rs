use crate::error::{MtsError, Result};
use crate::mirror::{step, OnlineState};
use crate::tree::{uniform_q, NodeParams, Tree};

/// Value, gradient, and the nonzero Hessian entries of the regularizer
/// Phi(x) = sum_{u != r} (w_u/eta_u)(x_u + delta_u x_p) ln(x_u/x_p + delta_u).
/// The Hessian is nonzero only on the diagonal and parent-child pairs.
#[derive(Debug, Clone)]
pub struct RegularizerEval {
    pub value: f64,
    /// d Phi / d x_u; zero at the root entry's unused slot only if the root
    /// has no children terms (the root coordinate is still a variable).
    pub grad: Vec<f64>,
    /// d^2 Phi / d x_u^2.
    pub hess_diag: Vec<f64>,
    /// d^2 Phi / (d x_u d x_{p(u)}) indexed by the child u (zero at the root).
    pub hess_parent: Vec<f64>,
}

/// Analytic evaluation at a strictly positive marginal vector.
pub fn phi_and_grad(tree: &Tree, params: &NodeParams, x: &[f64]) -> Result<RegularizerEval> {
    if x.len() != tree.nodes.len() {
        return Err(MtsError::InvalidInput("state length mismatch".into()));
    }
    for (u, &v) in x.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(MtsError::Domain(format!(
                "x[{u}] = {v} is outside the strictly positive domain"
            )));
        }
    }
    let n = tree.nodes.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    let mut hess_diag = vec![0.0; n];
    let mut hess_parent = vec![0.0; n];

    for u in 0..n {
        if u == tree.root {
            continue;
        }
        let p = tree.nodes[u].parent.unwrap();
        let w = tree.nodes[u].weight / params.eta[u];
        let d = params.delta[u];
        let ratio = x[u] / x[p] + d;
        let log_r = ratio.ln();
        let lifted = x[u] + d * x[p];

        value += w * lifted * log_r;

        // Own edge term.
        grad[u] += w * (log_r + 1.0);
        grad[p] += w * (d * log_r - x[u] / x[p]);

        hess_diag[u] += w / lifted;
        hess_diag[p] += w * x[u] * x[u] / (x[p] * x[p] * lifted);
        hess_parent[u] = -w * x[u] / (x[p] * lifted);
    }

    Ok(RegularizerEval { value, grad, hess_diag, hess_parent })
}

/// A piecewise-constant cost schedule on [0, 1]: segment i applies on
/// (end_{i-1}, end_i].
#[derive(Debug, Clone)]
pub struct CostSchedule {
    pub ends: Vec<f64>,
    pub costs: Vec<Vec<f64>>,
}

impl CostSchedule {
    pub fn constant(c: Vec<f64>) -> CostSchedule {
        CostSchedule { ends: vec![1.0], costs: vec![c] }
    }

    pub fn new(ends: Vec<f64>, costs: Vec<Vec<f64>>) -> Result<CostSchedule> {
        if ends.len() != costs.len() || ends.is_empty() {
            return Err(MtsError::InvalidInput("schedule segments mismatch".into()));
        }
        let mut prev = 0.0;
        for &e in &ends {
            if !(e > prev) {
                return Err(MtsError::InvalidInput("segment ends must increase".into()));
            }
            prev = e;
        }
        if (prev - 1.0).abs() > 1e-12 {
            return Err(MtsError::InvalidInput("schedule must cover [0, 1]".into()));
        }
        Ok(CostSchedule { ends, costs })
    }

    pub fn at(&self, t: f64) -> &[f64] {
        for (i, &e) in self.ends.iter().enumerate() {
            if t <= e + 1e-15 {
                return &self.costs[i];
            }
        }
        self.costs.last().map(|c| c.as_slice()).unwrap()
    }
}

/// The M-step discretization: q_j results from one projection step with cost
/// c(j/M)/M. Returns q_0..q_M.
pub fn discretize(
    tree: &Tree,
    params: &NodeParams,
    schedule: &CostSchedule,
    m: u64,
    kappa: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut states = Vec::with_capacity(m as usize + 1);
    let mut cur = OnlineState::new(tree, uniform_q(tree, params))?;
    states.push(cur.q.clone());
    for j in 1..=m {
        let t = j as f64 / m as f64;
        let scaled: Vec<f64> = schedule.at(t).iter().map(|&v| v / m as f64).collect();
        let (next, _) = step(tree, params, &cur, &scaled, kappa)?;
        states.push(next.q.clone());
        cur = next;
    }
    Ok(states)
}

fn interpolate(states: &[Vec<f64>], t: f64) -> Vec<f64> {
    let m = states.len() - 1;
    let pos = t * m as f64;
    let j = (pos.floor() as usize).min(m.saturating_sub(1));
    let frac = pos - j as f64;
    states[j]
        .iter()
        .zip(&states[j + 1])
        .map(|(a, b)| (1.0 - frac) * a + frac * b)
        .collect()
}

/// Sup distance between the piecewise-linear interpolations of an M-grid and
/// a 2M-grid trajectory, evaluated on the union grid (the 2M breakpoints).
fn sup_distance(coarse: &[Vec<f64>], fine: &[Vec<f64>]) -> f64 {
    let grid = fine.len() - 1;
    let mut sup = 0.0f64;
    for i in 0..=grid {
        let t = i as f64 / grid as f64;
        let a = interpolate(coarse, t);
        let b = &fine[i];
        for (x, y) in a.iter().zip(b) {
            sup = sup.max((x - y).abs());
        }
    }
    sup
}

#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub m: u64,
    pub distance: f64,
}

/// d_M = sup_t || q_(M)(t) - q_(2M)(t) ||_inf for each M in the list.
pub fn convergence_study(
    tree: &Tree,
    params: &NodeParams,
    schedule: &CostSchedule,
    m_list: &[u64],
    kappa: f64,
) -> Result<Vec<ConvergenceRow>> {
    for w in m_list.windows(2) {
        if w[1] <= w[0] {
            return Err(MtsError::InvalidInput("M list must increase".into()));
        }
    }
    let mut cache: std::collections::BTreeMap<u64, Vec<Vec<f64>>> = Default::default();
    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        for key in [m, 2 * m] {
            if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(key) {
                slot.insert(discretize(tree, params, schedule, key, kappa)?);
            }
        }
        let d = sup_distance(&cache[&m], &cache[&(2 * m)]);
        rows.push(ConvergenceRow { m, distance: d });
    }
    Ok(rows)
}

/// Least-squares slope of ln(distance) against ln(M).
pub fn log_slope(rows: &[ConvergenceRow]) -> f64 {
    let n = rows.len() as f64;
    let xs: Vec<f64> = rows.iter().map(|r| (r.m as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.distance.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}
