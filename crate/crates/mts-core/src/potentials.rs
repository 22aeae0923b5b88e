use crate::error::{MtsError, Result};
use crate::mirror::{StepDetail, Trajectory};
use crate::tree::{
    delta_map, epsilon_threshold, point_mass_x, psi, tol, weighted_l1, NodeParams, Tree,
};
use serde::{Deserialize, Serialize};

/// Result of one audited inequality; `margin = rhs - lhs` (nonnegative iff
/// certified).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub certified: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

fn outcome(name: &str, lhs: f64, rhs: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        certified: lhs <= rhs,
        lhs,
        rhs,
        margin: rhs - lhs,
    }
}

fn max_cost(c: &[f64]) -> f64 {
    c.iter().fold(0.0f64, |a, &b| a.max(b))
}

/// The audits are homogeneous under cost/weight scaling; tolerances are
/// taken relative to this instance scale.
pub fn audit_scale(tree: &Tree, c_max: f64) -> f64 {
    1.0 + c_max + tree.max_weight()
}

fn validate_marginal(tree: &Tree, z: &[f64]) -> Result<()> {
    if z.len() != tree.nodes.len() {
        return Err(MtsError::InvalidInput("marginal state length mismatch".into()));
    }
    if (z[tree.root] - 1.0).abs() > tol::STATE_SUM {
        return Err(MtsError::InvalidInput(format!(
            "marginal root mass {} is not 1",
            z[tree.root]
        )));
    }
    for (u, node) in tree.nodes.iter().enumerate() {
        if !(z[u] >= 0.0) || !z[u].is_finite() {
            return Err(MtsError::InvalidInput(format!(
                "marginal z[{u}] = {} invalid",
                z[u]
            )));
        }
        if node.is_leaf() {
            continue;
        }
        let s: f64 = node.children.iter().map(|&v| z[v]).sum();
        if (s - z[u]).abs() > 1e-9 {
            return Err(MtsError::InvalidInput(format!(
                "children of node {u} carry {s}, parent has {}",
                z[u]
            )));
        }
        if z[u] == 0.0 {
            for &v in &node.children {
                if z[v] > 0.0 {
                    return Err(MtsError::InvalidInput(format!(
                        "zero-mass node {u} has positive-mass child {v}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Global divergence between an arbitrary configuration z in K_T and a
/// conditional state q. Sibling groups under a zero-mass node contribute 0.
pub fn global_divergence(
    tree: &Tree,
    params: &NodeParams,
    z: &[f64],
    q: &[f64],
    kappa: f64,
) -> Result<f64> {
    validate_marginal(tree, z)?;
    let mut total = 0.0;
    for (u, node) in tree.nodes.iter().enumerate() {
        if node.is_leaf() || z[u] == 0.0 {
            continue;
        }
        for &v in &node.children {
            let d = params.delta[v];
            let w = tree.nodes[v].weight;
            total += w / params.eta[v]
                * ((z[v] + d * z[u]) * ((z[v] / z[u] + d) / (q[v] + d)).ln() + z[u] * q[v] - z[v]);
        }
    }
    Ok(total / kappa)
}

fn node_div_theta(tree: &Tree, params: &NodeParams, u: usize, q: &[f64], kappa: f64) -> f64 {
    let mut s = 0.0;
    for &v in &tree.nodes[u].children {
        let d = params.delta[v];
        let t = params.theta[v];
        s += tree.nodes[v].weight / params.eta[v]
            * ((t + d) * ((t + d) / (q[v] + d)).ln() + q[v] - t);
    }
    s / kappa
}

/// Psi(q) = - sum_u Delta(q)_u D^(u)(theta || q^(u)); nonpositive, zero at
/// the uniform conditionals.
pub fn psi_aux(tree: &Tree, params: &NodeParams, q: &[f64], kappa: f64) -> f64 {
    let x = delta_map(tree, q);
    let mut s = 0.0;
    for (u, node) in tree.nodes.iter().enumerate() {
        if node.is_leaf() {
            continue;
        }
        s -= x[u] * node_div_theta(tree, params, u, q, kappa);
    }
    s
}

fn service_of(tree: &Tree, c: &[f64], x: &[f64]) -> f64 {
    tree.leaves
        .iter()
        .enumerate()
        .map(|(i, &l)| c[i] * x[l])
        .sum()
}

/// Service-cost inequality against a comparator z in K_T:
/// service <= <c, z> + D~(z||q_before) - D~(z||q_after) + tol.
/// For a split step pass the accumulated service and the sub-step count.
#[allow(clippy::too_many_arguments)]
pub fn check_service_inequality(
    tree: &Tree,
    params: &NodeParams,
    q_before: &[f64],
    q_after: &[f64],
    service: f64,
    c: &[f64],
    z: &[f64],
    kappa: f64,
    substeps: u64,
) -> Result<CheckOutcome> {
    let tol_step = tol::PER_STEP_REL * audit_scale(tree, max_cost(c)) * substeps as f64;
    let before = global_divergence(tree, params, z, q_before, kappa)?;
    let after = global_divergence(tree, params, z, q_after, kappa)?;
    let rhs = service_of(tree, c, z) + before - after + tol_step;
    Ok(outcome("service (offline comparator)", service, rhs))
}

/// Movement-side inequalities for one (possibly split) step. Returns the
/// positive-movement lemma, the unconditional form, and, when every sub-step
/// cost is below the threshold, the small-cost form.
#[allow(clippy::too_many_arguments)]
pub fn check_movement_inequality(
    tree: &Tree,
    params: &NodeParams,
    q_before: &[f64],
    q_after: &[f64],
    service: f64,
    movement: f64,
    pos_movement: f64,
    c: &[f64],
    kappa: f64,
    tau: f64,
    substeps: u64,
) -> Result<Vec<CheckOutcome>> {
    if !(tau > 3.0) {
        return Err(MtsError::Domain(format!("movement audit requires tau > 3, got {tau}")));
    }
    let c_max = max_cost(c);
    let tol_step = tol::PER_STEP_REL * audit_scale(tree, c_max) * substeps as f64;
    let n = tree.n_leaves() as f64;
    let log_factor = 2.0 * tree.depth as f64 + n.ln();
    let psi_b = psi_aux(tree, params, q_before, kappa);
    let psi_a = psi_aux(tree, params, q_after, kappa);
    let x_b = delta_map(tree, q_before);
    let x_a = delta_map(tree, q_after);

    let mut checks = Vec::new();

    let lhs = (tau - 3.0) / (kappa * tau) * pos_movement;
    let rhs = log_factor * service + psi_b - psi_a + tol_step;
    checks.push(outcome("positive movement", lhs, rhs));

    let pot = psi_b - psi_a + log_factor * service;
    let lhs16 = movement / kappa;
    let rhs16 = (psi(tree, &x_a) - psi(tree, &x_b)) / kappa
        + 2.0 * tau / (tau - 3.0) * pot
        + tol_step;
    checks.push(outcome("movement (unconditional)", lhs16, rhs16));

    let eps = epsilon_threshold(tree, kappa, tau)?;
    if c_max / substeps as f64 <= eps * (1.0 + 1e-9) {
        let rhs17 = (psi(tree, &x_a) - psi(tree, &x_b)) / kappa
            + 4.0 * tau / (tau - 3.0) * pot
            + tol_step;
        checks.push(outcome("movement (small costs)", lhs16, rhs17));
    }
    Ok(checks)
}

/// |D~(z||q) - D~(z'||q)| <= (1/kappa)(2 + 4/tau) ||z - z'|| + tol.
pub fn check_lipschitz(
    tree: &Tree,
    params: &NodeParams,
    q: &[f64],
    z: &[f64],
    z_prime: &[f64],
    kappa: f64,
    tau: f64,
) -> Result<CheckOutcome> {
    let a = global_divergence(tree, params, z, q, kappa)?;
    let b = global_divergence(tree, params, z_prime, q, kappa)?;
    let lhs = (a - b).abs();
    let rhs = (2.0 + 4.0 / tau) / kappa * weighted_l1(tree, z, z_prime)
        + tol::PER_STEP_REL * audit_scale(tree, 0.0);
    Ok(outcome("divergence lipschitz", lhs, rhs))
}

/// Per-node movement lemma, checked from a step's recorded projections:
/// Psi_u(p) - Psi_u(q) <= (2/kappa)(w_u/tau)(x_u - y_u)_+
///                        + sum_v (c_v - alpha_v)(x_v - theta_v x_u) + tol.
/// The weight term vanishes at the root, whose mass never moves.
pub fn check_crucial(
    tree: &Tree,
    params: &NodeParams,
    q_before: &[f64],
    q_after: &[f64],
    detail: &StepDetail,
    kappa: f64,
    tau: f64,
) -> Vec<CheckOutcome> {
    let x = delta_map(tree, q_before);
    let y = delta_map(tree, q_after);
    let mut checks = Vec::new();
    for rec in &detail.projections {
        let u = rec.node;
        let div_q = node_div_theta(tree, params, u, q_before, kappa);
        let div_p = node_div_theta(tree, params, u, q_after, kappa);
        let lhs = -y[u] * div_p + x[u] * div_q;
        let w_term = if u == tree.root {
            0.0
        } else {
            2.0 / kappa * (tree.nodes[u].weight / tau) * (x[u] - y[u]).max(0.0)
        };
        let mut cross = 0.0;
        for (slot, &v) in tree.nodes[u].children.iter().enumerate() {
            cross += (rec.input.cost[slot] - rec.output.alpha[slot])
                * (x[v] - params.theta[v] * x[u]);
        }
        let c_max = max_cost(&rec.input.cost);
        let rhs = w_term + cross + tol::PER_STEP_REL * audit_scale(tree, c_max);
        checks.push(outcome(&format!("per-node movement (node {u})"), lhs, rhs));
    }
    checks
}

/// Derived-cost mass bound for one step:
/// sum_{v != root} eta_v y_v chat_v <= (D_T + ln n) <c, y> + tol,
/// with y the post-step marginals.
pub fn check_cost_mass_bound(
    tree: &Tree,
    params: &NodeParams,
    q_after: &[f64],
    chat: &[f64],
    c: &[f64],
) -> CheckOutcome {
    let y = delta_map(tree, q_after);
    let mut lhs = 0.0;
    for u in 0..tree.nodes.len() {
        if u != tree.root {
            lhs += params.eta[u] * y[u] * chat[u];
        }
    }
    let n = tree.n_leaves() as f64;
    let rhs = (tree.depth as f64 + n.ln()) * service_of(tree, c, &y)
        + tol::PER_STEP_REL * audit_scale(tree, max_cost(c));
    outcome("derived-cost mass", lhs, rhs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineReport {
    pub s_on: f64,
    pub m_on: f64,
    pub s_off: f64,
    pub m_off: f64,
    pub service_check: CheckOutcome,
    pub movement_check: CheckOutcome,
}

impl FineReport {
    pub fn certified(&self) -> bool {
        self.service_check.certified && self.movement_check.certified
    }
}

/// Whole-run fine competitiveness against an offline leaf trajectory:
/// S_on <= S_off + ((2 + 4/tau)/kappa) M_off + D~(z_0||q_0) + tol and
/// M_on/kappa <= [psi(x_T) - psi(x_0)]/kappa
///              + (4 tau/(tau-3)) ([Psi(q_0) - Psi(q_T)] + (2 D_T + ln n) S_on) + tol.
/// The divergence boundary term is exactly 0 when both players start at the
/// same point mass.
#[allow(clippy::too_many_arguments)]
pub fn check_fine_competitiveness(
    tree: &Tree,
    params: &NodeParams,
    traj: &Trajectory,
    costs: &[Vec<f64>],
    off_states: &[usize],
    s_off: f64,
    m_off: f64,
    kappa: f64,
    tau: f64,
) -> Result<FineReport> {
    if off_states.len() != costs.len() + 1 || traj.states.len() != costs.len() {
        return Err(MtsError::InvalidInput(
            "offline/online trajectory length mismatch".into(),
        ));
    }
    let overall_max = costs.iter().map(|c| max_cost(c)).fold(0.0f64, f64::max);
    let tol_cum = tol::CUMULATIVE_REL * audit_scale(tree, overall_max);

    let z0 = point_mass_x(tree, off_states[0]);
    let boundary = global_divergence(tree, params, &z0, &traj.q0, kappa)?;
    let service_rhs = s_off + (2.0 + 4.0 / tau) / kappa * m_off + boundary + tol_cum;
    let service_check = outcome("fine service", traj.s_on, service_rhs);

    let q_last = traj.states.last().unwrap_or(&traj.q0);
    let x_last = delta_map(tree, q_last);
    let n = tree.n_leaves() as f64;
    let log_factor = 2.0 * tree.depth as f64 + n.ln();
    let movement_rhs = (psi(tree, &x_last) - psi(tree, &traj.x0)) / kappa
        + 4.0 * tau / (tau - 3.0)
            * ((psi_aux(tree, params, &traj.q0, kappa) - psi_aux(tree, params, q_last, kappa))
                + log_factor * traj.s_on)
        + tol_cum;
    let movement_check = outcome("fine movement", traj.m_on / kappa, movement_rhs);

    Ok(FineReport {
        s_on: traj.s_on,
        m_on: traj.m_on,
        s_off,
        m_off,
        service_check,
        movement_check,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mirror::{run, split_step, step_detailed, OnlineState};
    use crate::tree::{derive_params, point_mass_q, uniform_q, TreeDef};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn star2() -> (Tree, NodeParams) {
        let t = Tree::star(&[1.0, 1.0]).unwrap();
        let p = derive_params(&t);
        (t, p)
    }

    fn two_level() -> (Tree, NodeParams) {
        let t = Tree::from_def(vec![
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
                    TreeDef::Leaf { weight: 0.5, label: "d".into() },
                ],
            },
        ])
        .unwrap();
        let p = derive_params(&t);
        (t, p)
    }

    fn rand_kt(tree: &Tree, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut z = vec![0.0; tree.nodes.len()];
        z[tree.root] = 1.0;
        for u in (0..tree.nodes.len()).rev() {
            let children = tree.nodes[u].children.clone();
            if children.is_empty() {
                continue;
            }
            let mut parts: Vec<f64> = children.iter().map(|_| rng.gen::<f64>() + 1e-3).collect();
            if children.len() > 1 && rng.gen_bool(0.2) {
                parts[rng.gen_range(0..children.len())] = 0.0;
            }
            let s: f64 = parts.iter().sum();
            for (slot, &v) in children.iter().enumerate() {
                z[v] = z[u] * parts[slot] / s;
            }
        }
        z
    }

    fn rand_q(tree: &Tree, rng: &mut ChaCha8Rng) -> Vec<f64> {
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

    #[test]
    fn divergence_zero_at_own_marginals() {
        let (t, p) = two_level();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = rand_q(&t, &mut rng);
            let z = delta_map(&t, &q);
            let d = global_divergence(&t, &p, &z, &q, 1.0).unwrap();
            // z_v/z_u does not reverse the product x_u * q_v exactly, so the
            // result is only zero up to a few ulps of the weighted terms.
            assert!(d.abs() < 1e-13, "d = {d}");
        }
    }

    #[test]
    fn divergence_frozen_point_mass_example() {
        let (t, p) = star2();
        let q = uniform_q(&t, &p);
        let z = point_mass_x(&t, t.leaves[0]);
        let d = global_divergence(&t, &p, &z, &q, 1.0).unwrap();
        assert!((d - 0.2003684017561232).abs() < 1e-14);
        let d2 = global_divergence(&t, &p, &z, &q, 2.0).unwrap();
        assert!((d2 - d / 2.0).abs() < 1e-16);
    }

    #[test]
    fn divergence_nonnegative_random_sweep() {
        let (t, p) = two_level();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let q = rand_q(&t, &mut rng);
            let z = rand_kt(&t, &mut rng);
            let d = global_divergence(&t, &p, &z, &q, 1.0).unwrap();
            assert!(d >= -1e-12);
        }
    }

    #[test]
    fn divergence_rejects_inconsistent_mass() {
        let (t, p) = star2();
        let q = uniform_q(&t, &p);
        let mut z = vec![0.0; t.nodes.len()];
        z[t.root] = 1.0;
        z[t.leaves[0]] = 0.8;
        z[t.leaves[1]] = 0.1;
        assert!(global_divergence(&t, &p, &z, &q, 1.0).is_err());
    }

    #[test]
    fn psi_aux_sign_and_frozen_value() {
        let (t, p) = star2();
        assert_eq!(psi_aux(&t, &p, &uniform_q(&t, &p), 1.0), 0.0);

        let mut q = uniform_q(&t, &p);
        q[t.leaves[0]] = 0.9;
        q[t.leaves[1]] = 0.1;
        let v = psi_aux(&t, &p, &q, 1.0);
        assert!((v - (-0.13698706542164252)).abs() < 1e-14);

        let (t2, p2) = two_level();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let q = rand_q(&t2, &mut rng);
            assert!(psi_aux(&t2, &p2, &q, 1.0) <= 1e-12);
        }
    }

    #[test]
    fn service_inequality_on_random_steps() {
        let (t, p) = two_level();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eps = epsilon_threshold(&t, 1.0, 7.0).unwrap();
        for _ in 0..300 {
            let q = rand_q(&t, &mut rng);
            let state = OnlineState::new(&t, q).unwrap();
            let c: Vec<f64> = (0..t.n_leaves()).map(|_| rng.gen::<f64>() * eps).collect();
            let (next, audit) = crate::mirror::step(&t, &p, &state, &c, 1.0).unwrap();
            let z = rand_kt(&t, &mut rng);
            let check = check_service_inequality(
                &t, &p, &state.q, &next.q, audit.service, &c, &z, 1.0, 1,
            )
            .unwrap();
            assert!(check.certified, "{check:?}");

            // z = y reduces to monotonicity of the divergence to the new state
            let y = delta_map(&t, &next.q);
            let check_y =
                check_service_inequality(&t, &p, &state.q, &next.q, audit.service, &c, &y, 1.0, 1)
                    .unwrap();
            assert!(check_y.certified, "{check_y:?}");
        }
    }

    #[test]
    fn movement_inequalities_on_random_steps() {
        let (t, p) = two_level();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eps = epsilon_threshold(&t, 1.0, 7.0).unwrap();
        for _ in 0..300 {
            let q = rand_q(&t, &mut rng);
            let state = OnlineState::new(&t, q).unwrap();
            let c: Vec<f64> = (0..t.n_leaves()).map(|_| rng.gen::<f64>() * eps).collect();
            let (next, audit) = crate::mirror::step(&t, &p, &state, &c, 1.0).unwrap();
            let checks = check_movement_inequality(
                &t,
                &p,
                &state.q,
                &next.q,
                audit.service,
                audit.movement,
                audit.pos_movement,
                &c,
                1.0,
                7.0,
                1,
            )
            .unwrap();
            assert_eq!(checks.len(), 3);
            for ch in checks {
                assert!(ch.certified, "{ch:?}");
            }
        }
    }

    #[test]
    fn movement_inequalities_aggregate_over_split_steps() {
        let (t, p) = two_level();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let q = rand_q(&t, &mut rng);
            let state = OnlineState::new(&t, q).unwrap();
            let c: Vec<f64> = (0..t.n_leaves()).map(|_| rng.gen::<f64>() * 3.0).collect();
            let (next, audit) = split_step(&t, &p, &state, &c, 1.0, 7.0).unwrap();
            let checks = check_movement_inequality(
                &t,
                &p,
                &state.q,
                &next.q,
                audit.service,
                audit.movement,
                audit.pos_movement,
                &c,
                1.0,
                7.0,
                audit.substeps,
            )
            .unwrap();
            assert_eq!(checks.len(), 3);
            for ch in checks {
                assert!(ch.certified, "{ch:?}");
            }
        }
    }

    #[test]
    fn lipschitz_on_random_triples() {
        let (t, p) = two_level();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let q = rand_q(&t, &mut rng);
            let z = rand_kt(&t, &mut rng);
            let z2 = rand_kt(&t, &mut rng);
            let kappa = [1.0, 2.0, 8.0][rng.gen_range(0..3)];
            let check = check_lipschitz(&t, &p, &q, &z, &z2, kappa, 7.0).unwrap();
            assert!(check.certified, "{check:?}");
        }
        let q = rand_q(&t, &mut rng);
        let z = rand_kt(&t, &mut rng);
        let check = check_lipschitz(&t, &p, &q, &z, &z, 1.0, 7.0).unwrap();
        assert_eq!(check.lhs, 0.0);
    }

    #[test]
    fn crucial_and_cost_mass_on_random_steps() {
        let (t, p) = two_level();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let eps = epsilon_threshold(&t, 1.0, 7.0).unwrap();
        for _ in 0..300 {
            let q = rand_q(&t, &mut rng);
            let state = OnlineState::new(&t, q).unwrap();
            let c: Vec<f64> = (0..t.n_leaves()).map(|_| rng.gen::<f64>() * eps).collect();
            let (next, _, detail) = step_detailed(&t, &p, &state, &c, 1.0).unwrap();
            for ch in check_crucial(&t, &p, &state.q, &next.q, &detail, 1.0, 7.0) {
                assert!(ch.certified, "{ch:?}");
            }
            let ch = check_cost_mass_bound(&t, &p, &next.q, &detail.chat, &c);
            assert!(ch.certified, "{ch:?}");
        }
    }

    #[test]
    fn fine_competitiveness_constant_costs() {
        let (t, p) = star2();
        let leaf = t.leaves[0];
        let costs = vec![vec![1.0, 1.0]; 5];
        let traj = run(&t, &p, point_mass_q(&t, &p, leaf), &costs, 1.0, 7.0).unwrap();
        assert_eq!(traj.s_on, 5.0);
        assert_eq!(traj.m_on, 0.0);
        let off_states = vec![leaf; 6];
        let report =
            check_fine_competitiveness(&t, &p, &traj, &costs, &off_states, 5.0, 0.0, 1.0, 7.0)
                .unwrap();
        assert!(report.certified(), "{report:?}");
    }
}
