use crate::error::{MtsError, Result};
use crate::tree::tol;

/// One per-node projection problem on the child simplex of a node.
/// Vectors are indexed by child position.
#[derive(Debug, Clone)]
pub struct ProjectionInput {
    /// Prior conditional probabilities (sums to 1).
    pub q: Vec<f64>,
    /// Derived child costs, nonnegative.
    pub cost: Vec<f64>,
    pub w: Vec<f64>,
    pub eta: Vec<f64>,
    pub delta: Vec<f64>,
    pub kappa: f64,
}

#[derive(Debug, Clone)]
pub struct ProjectionOutput {
    pub p: Vec<f64>,
    /// Nonnegativity multipliers; positive only on clipped coordinates.
    pub alpha: Vec<f64>,
    /// Simplex multiplier, in [0, max cost].
    pub beta: f64,
    pub iterations: u32,
    /// |g(beta) - 1| at termination.
    pub residual: f64,
    /// Multiplicative factor applied to make the output sum to 1.
    pub rescale: f64,
}

impl ProjectionInput {
    fn validate(&self) -> Result<()> {
        let k = self.q.len();
        if k == 0 {
            return Err(MtsError::InvalidInput("projection needs a child".into()));
        }
        if self.cost.len() != k || self.w.len() != k || self.eta.len() != k || self.delta.len() != k
        {
            return Err(MtsError::InvalidInput("mismatched child arrays".into()));
        }
        if !(self.kappa >= 1.0) || !self.kappa.is_finite() {
            return Err(MtsError::InvalidInput(format!(
                "kappa must be a finite real >= 1, got {}",
                self.kappa
            )));
        }
        let mut sum = 0.0;
        for i in 0..k {
            if !self.cost[i].is_finite() || self.cost[i] < 0.0 {
                return Err(MtsError::InvalidInput(format!(
                    "cost[{i}] = {} must be finite and nonnegative",
                    self.cost[i]
                )));
            }
            if !self.q[i].is_finite() || self.q[i] < 0.0 {
                return Err(MtsError::InvalidInput(format!(
                    "q[{i}] = {} must be finite and nonnegative",
                    self.q[i]
                )));
            }
            if !(self.w[i] > 0.0) || !(self.eta[i] >= 1.0) || !(self.delta[i] > 0.0) {
                return Err(MtsError::InvalidInput(format!(
                    "bad node parameters at child {i}"
                )));
            }
            sum += self.q[i];
        }
        if (sum - 1.0).abs() > 1e-10 {
            return Err(MtsError::InvalidInput(format!(
                "prior sums to {sum}, not 1"
            )));
        }
        Ok(())
    }

    /// Coordinate value before clipping, at multiplier beta.
    fn lifted(&self, i: usize, beta: f64) -> f64 {
        let e = self.kappa * self.eta[i] / self.w[i] * (beta - self.cost[i]);
        if e == 0.0 {
            // exp(0) = 1, so the lift is q exactly; computing it avoids
            // one-ulp drift that would mask fixed points.
            return self.q[i];
        }
        (self.q[i] + self.delta[i]) * e.exp() - self.delta[i]
    }

    fn mass(&self, beta: f64) -> f64 {
        (0..self.q.len())
            .map(|i| self.lifted(i, beta).max(0.0))
            .sum()
    }
}

/// Shifted-entropy divergence between two points of one child simplex:
/// D(p||q) = (1/kappa) sum_v (w_v/eta_v) [(p_v+delta_v) ln((p_v+delta_v)/(q_v+delta_v)) + q_v - p_v].
pub fn node_divergence(input: &ProjectionInput, p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let d = input.delta[i];
        s += input.w[i] / input.eta[i]
            * ((p[i] + d) * ((p[i] + d) / (q[i] + d)).ln() + q[i] - p[i]);
    }
    s / input.kappa
}

/// Projection objective D(p||q) + <p, cost>; minimized by `project_node`.
pub fn objective(input: &ProjectionInput, p: &[f64]) -> f64 {
    let lin: f64 = p.iter().zip(&input.cost).map(|(a, b)| a * b).sum();
    node_divergence(input, p, &input.q) + lin
}

/// Solve the per-node projection: minimize D(p||q) + <p, cost> over the
/// simplex. Bisection on the simplex multiplier beta; the scalar mass
/// equation g(beta) = sum_v max(0, (q_v+delta_v) e^{kappa eta_v (beta-c_v)/w_v} - delta_v)
/// is nondecreasing with g(0) <= 1 <= g(max cost).
pub fn project_node(input: &ProjectionInput) -> Result<ProjectionOutput> {
    input.validate()?;
    let k = input.q.len();

    if k == 1 {
        return Ok(ProjectionOutput {
            p: vec![1.0],
            alpha: vec![0.0],
            beta: input.cost[0],
            iterations: 0,
            residual: 0.0,
            rescale: 1.0,
        });
    }

    let c_max = input.cost.iter().fold(0.0f64, |a, &b| a.max(b));
    // Equal costs shift uniformly and are absorbed by beta = c; p = q exactly.
    if input.cost.iter().all(|&c| c == input.cost[0]) {
        return Ok(ProjectionOutput {
            p: input.q.clone(),
            alpha: vec![0.0; k],
            beta: input.cost[0],
            iterations: 0,
            residual: 0.0,
            rescale: 1.0,
        });
    }

    let g0 = input.mass(0.0);
    let g1 = input.mass(c_max);
    if g0 > 1.0 + tol::LEMMA_SLACK || g1 < 1.0 - tol::LEMMA_SLACK {
        return Err(MtsError::Solver(format!(
            "mass equation bracket failed: g(0) = {g0}, g(c_max) = {g1}"
        )));
    }

    let mut iterations = 0;
    let (beta, residual) = if g0 >= 1.0 {
        (0.0, (g0 - 1.0).abs())
    } else if g1 <= 1.0 {
        (c_max, (1.0 - g1).abs())
    } else {
        let (mut lo, mut hi) = (0.0, c_max);
        let mut beta = 0.5 * (lo + hi);
        let mut residual = f64::INFINITY;
        while iterations < tol::SOLVER_ITERS {
            beta = 0.5 * (lo + hi);
            let g = input.mass(beta);
            iterations += 1;
            residual = (g - 1.0).abs();
            if residual <= tol::SOLVER_G {
                break;
            }
            if g > 1.0 {
                hi = beta;
            } else {
                lo = beta;
            }
        }
        (beta, residual)
    };

    let mut p: Vec<f64> = (0..k).map(|i| input.lifted(i, beta).max(0.0)).collect();
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(MtsError::Solver(format!(
            "projection collapsed to zero mass at beta = {beta}"
        )));
    }
    let rescale = 1.0 / total;
    for v in p.iter_mut() {
        *v *= rescale;
    }
    crate::tree::exact_simplex_fix(&mut p);

    let mut alpha = vec![0.0; k];
    for i in 0..k {
        if p[i] == 0.0 {
            let a = input.cost[i] - beta
                + input.w[i] / (input.kappa * input.eta[i])
                    * (input.delta[i] / (input.q[i] + input.delta[i])).ln();
            if a < -tol::ALPHA_CLAMP {
                return Err(MtsError::Solver(format!(
                    "clipped multiplier alpha[{i}] = {a} is negative beyond tolerance"
                )));
            }
            alpha[i] = a.max(0.0);
        }
    }

    Ok(ProjectionOutput {
        p,
        alpha,
        beta,
        iterations,
        residual,
        rescale,
    })
}

/// Max-norm KKT stationarity residual over the children:
/// |(w_v/(kappa eta_v)) ln((p_v+delta_v)/(q_v+delta_v)) - beta + c_v - alpha_v|.
pub fn kkt_residual(input: &ProjectionInput, output: &ProjectionOutput) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..input.q.len() {
        let d = input.delta[i];
        let r = input.w[i] / (input.kappa * input.eta[i])
            * ((output.p[i] + d) / (input.q[i] + d)).ln()
            - output.beta
            + input.cost[i]
            - output.alpha[i];
        worst = worst.max(r.abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn star2_input(cost: Vec<f64>, kappa: f64) -> ProjectionInput {
        let eta = 1.0 + 2.0f64.ln();
        ProjectionInput {
            q: vec![0.5, 0.5],
            cost,
            w: vec![1.0, 1.0],
            eta: vec![eta, eta],
            delta: vec![0.5 / eta, 0.5 / eta],
            kappa,
        }
    }

    pub(crate) fn random_input(rng: &mut ChaCha8Rng, k: usize, kappa: f64) -> ProjectionInput {
        let mut q: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = q.iter().sum();
        for v in q.iter_mut() {
            *v /= s;
        }
        let mut argmax = 0;
        for i in 1..k {
            if q[i] > q[argmax] {
                argmax = i;
            }
        }
        let rest: f64 = (0..k).filter(|&i| i != argmax).map(|i| q[i]).sum();
        q[argmax] = 1.0 - rest;
        let w: Vec<f64> = (0..k).map(|_| 7.0f64.powi(rng.gen_range(-2..3))).collect();
        let theta: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..0.95)).collect();
        let eta: Vec<f64> = theta.iter().map(|t| 1.0 + (1.0 / t).ln()).collect();
        let delta: Vec<f64> = theta.iter().zip(&eta).map(|(t, e)| t / e).collect();
        let cost: Vec<f64> = (0..k)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() })
            .collect();
        ProjectionInput {
            q,
            cost,
            w,
            eta,
            delta,
            kappa,
        }
    }

    #[test]
    fn zero_cost_is_identity() {
        let input = star2_input(vec![0.0, 0.0], 1.0);
        let out = project_node(&input).unwrap();
        assert_eq!(out.p, input.q);
        assert_eq!(out.beta, 0.0);
        assert_eq!(out.alpha, vec![0.0, 0.0]);
        assert!(kkt_residual(&input, &out) <= 1e-12);
    }

    #[test]
    fn equal_costs_absorbed_by_beta() {
        let input = star2_input(vec![0.3, 0.3], 1.0);
        let out = project_node(&input).unwrap();
        assert_eq!(out.p, input.q);
        assert_eq!(out.beta, 0.3);
    }

    #[test]
    fn frozen_two_child_example() {
        let input = star2_input(vec![0.1, 0.0], 1.0);
        let out = project_node(&input).unwrap();
        assert!((out.p[0] - 0.43283170597971254).abs() < 1e-10);
        assert!((out.p[1] - 0.5671682940202875).abs() < 1e-10);
        assert!((out.beta - 0.04788608923727224).abs() < 1e-10);
        assert!(kkt_residual(&input, &out) <= tol::KKT_RESIDUAL);
        let s: f64 = out.p.iter().sum();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn single_child_short_circuit() {
        let input = ProjectionInput {
            q: vec![1.0],
            cost: vec![0.7],
            w: vec![2.0],
            eta: vec![1.5],
            delta: vec![0.3],
            kappa: 1.0,
        };
        let out = project_node(&input).unwrap();
        assert_eq!(out.p, vec![1.0]);
        assert_eq!(out.beta, 0.7);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(project_node(&star2_input(vec![-0.1, 0.0], 1.0)).is_err());
        assert!(project_node(&star2_input(vec![f64::NAN, 0.0], 1.0)).is_err());
        let mut bad = star2_input(vec![0.1, 0.0], 1.0);
        bad.q = vec![0.9, 0.3];
        assert!(project_node(&bad).is_err());
        let mut bad2 = star2_input(vec![0.1, 0.0], 1.0);
        bad2.kappa = 0.5;
        assert!(project_node(&bad2).is_err());
    }

    #[test]
    fn residual_detects_perturbed_output() {
        let input = star2_input(vec![0.1, 0.0], 1.0);
        let mut out = project_node(&input).unwrap();
        out.p[0] += 1e-3;
        out.p[1] -= 1e-3;
        assert!(kkt_residual(&input, &out) > 1e-4);
    }

    #[test]
    fn random_sweep_kkt_feasibility_and_lemmas() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let k = rng.gen_range(2..=16);
            let kappa = [1.0, 2.0, 8.0][rng.gen_range(0..3)];
            let input = random_input(&mut rng, k, kappa);
            let out = project_node(&input).unwrap();

            let sum: f64 = out.p.iter().sum();
            assert_eq!(sum, 1.0);
            assert!(out.p.iter().all(|&v| v >= 0.0));
            assert!(kkt_residual(&input, &out) <= tol::KKT_RESIDUAL);
            assert!(out.beta >= 0.0);
            let c_max = input.cost.iter().cloned().fold(0.0f64, f64::max);
            assert!(out.beta <= c_max + 1e-15);

            for i in 0..k {
                // complementary slackness and the alpha <= cost bound
                if out.alpha[i] > tol::LEMMA_SLACK {
                    assert_eq!(out.p[i], 0.0);
                }
                assert!(out.alpha[i] <= input.cost[i] + tol::ALPHA_CLAMP);
            }
        }
    }

    #[test]
    fn optimality_against_random_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let k = rng.gen_range(2..=6);
            let input = random_input(&mut rng, k, 1.0);
            let out = project_node(&input).unwrap();
            let base = objective(&input, &out.p);
            for _ in 0..100 {
                let mut z: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = z.iter().sum();
                for v in z.iter_mut() {
                    *v /= s;
                }
                assert!(objective(&input, &z) >= base - tol::LEMMA_SLACK);
            }
        }
    }

    #[test]
    fn bregman_three_point_inequality() {
        // D(z||p) - D(z||q) <= <cost - alpha, z - p>
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let k = rng.gen_range(2..=8);
            let input = random_input(&mut rng, k, 1.0);
            let out = project_node(&input).unwrap();
            for _ in 0..20 {
                let mut z: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = z.iter().sum();
                for v in z.iter_mut() {
                    *v /= s;
                }
                let lhs = node_divergence(&input, &z, &out.p) - node_divergence(&input, &z, &input.q);
                let rhs: f64 = (0..k)
                    .map(|i| (input.cost[i] - out.alpha[i]) * (z[i] - out.p[i]))
                    .sum();
                assert!(lhs <= rhs + tol::LEMMA_SLACK);
            }
        }
    }

    #[test]
    fn divergence_cap_on_tau_hst_children() {
        // D(r||p) <= (2/kappa) (w_u / tau) for children of a weighted node
        // of a 7-HST: child weights at most w_u / 7.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let tau = 7.0;
        for _ in 0..500 {
            let k = rng.gen_range(2..=8);
            let kappa = [1.0, 4.0][rng.gen_range(0..2)];
            let w_u = 7.0f64.powi(rng.gen_range(0..3));
            let theta: Vec<f64> = {
                let mut t: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = t.iter().sum();
                t.iter_mut().for_each(|v| *v /= s);
                t
            };
            let eta: Vec<f64> = theta.iter().map(|t| 1.0 + (1.0 / t).ln()).collect();
            let delta: Vec<f64> = theta.iter().zip(&eta).map(|(t, e)| t / e).collect();
            let input = ProjectionInput {
                q: theta.clone(),
                cost: vec![0.0; k],
                w: (0..k).map(|_| w_u / tau * rng.gen_range(0.1..1.0)).collect(),
                eta,
                delta,
                kappa,
            };
            let simplex = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                let mut z: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = z.iter().sum();
                z.iter_mut().for_each(|v| *v /= s);
                z
            };
            for _ in 0..20 {
                let r = simplex(&mut rng);
                let p = simplex(&mut rng);
                let d = node_divergence(&input, &r, &p);
                assert!(d <= 2.0 / kappa * (w_u / tau) + tol::LEMMA_SLACK);
            }
        }
    }
}
