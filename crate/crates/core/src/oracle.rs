//! Independent reference solver for small decomposition problems.
//!
//! A deliberately simple projected-subgradient method: take a diminishing
//! subgradient step on the full objective, then restore feasibility with
//! cyclic projections onto each hard constraint, and keep the best
//! objective among (numerically) feasible iterates. It shares only the
//! problem record with the main solver; operators, projections, and the
//! objective evaluation are written separately here, so agreement between
//! the two is meaningful evidence of correctness. Convergence is slow,
//! which restricts its use to instances with a handful of rows and columns.

use crate::sd::{NormMode, SdProblem};
use ndarray::Array2;

/// Outcome of a reference run.
#[derive(Debug, Clone)]
pub struct OracleResult {
    /// Best objective among iterates with `violation <= 1e-7`.
    pub objective: f64,
    /// Constraint violation at the best iterate.
    pub violation: f64,
    pub iterations: usize,
}

/// Feasibility slack below which an iterate counts as a candidate.
const ORACLE_FEAS_TOL: f64 = 1e-7;

const STEP0: f64 = 0.1;

fn dense_second_diff(n: usize) -> Array2<f64> {
    assert!(n >= 3, "second difference needs at least 3 points, got {n}");
    let mut d = Array2::zeros((n - 2, n));
    for i in 0..n - 2 {
        d[(i, i)] = 1.0;
        d[(i, i + 1)] = -2.0;
        d[(i, i + 2)] = 1.0;
    }
    d
}

fn frobenius(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn penalty(norm: f64, mode: NormMode) -> f64 {
    match mode {
        NormMode::Unsquared => norm,
        NormMode::Squared => norm * norm,
    }
}

struct Oracle<'a> {
    prob: &'a SdProblem,
    d2t: Array2<f64>,
    d2p: Array2<f64>,
    /// Squared norms of the basis rows, used by the half-space projections.
    qrow2: Vec<f64>,
}

impl<'a> Oracle<'a> {
    fn new(prob: &'a SdProblem) -> Self {
        let (t, p, _) = prob.shape();
        let qrow2 = (0..p)
            .map(|j| prob.q.row(j).iter().map(|v| v * v).sum())
            .collect();
        Self {
            prob,
            d2t: dense_second_diff(t),
            d2p: dense_second_diff(p),
            qrow2,
        }
    }

    fn objective(&self, z: &Array2<f64>, x3: &Array2<f64>) -> f64 {
        let prob = self.prob;
        let (t, p, k) = prob.shape();
        let zq = z.dot(&prob.q.t());
        let mut l1 = 0.0;
        for i in 0..t {
            for j in 0..p {
                if prob.known_mask[(i, j)] {
                    l1 += (prob.y[(i, j)] - prob.mu[j] - zq[(i, j)] - x3[(i, j)]).abs();
                }
            }
        }
        let mut zw = z.clone();
        for m in 0..k {
            let w = prob.weights[m];
            zw.column_mut(m).mapv_inplace(|v| v * w);
        }
        let par = &prob.params;
        let mode = par.norm_mode;
        l1 + par.lambda_2a * penalty(frobenius(&zw), mode)
            + par.lambda_2b * penalty(frobenius(&self.d2t.dot(z)), mode)
            + par.lambda_3
                * (penalty(frobenius(&self.d2t.dot(x3)), mode)
                    + penalty(frobenius(&x3.dot(&self.d2p.t())), mode))
    }

    fn violation(&self, z: &Array2<f64>, x3: &Array2<f64>) -> f64 {
        let prob = self.prob;
        let zq = z.dot(&prob.q.t());
        let mut gap: f64 = 0.0;
        for ((_, j), &v) in zq.indexed_iter() {
            gap = gap.max(-(prob.mu[j] + v));
        }
        for &v in self.d2t.dot(&zq).iter() {
            gap = gap.max(v);
        }
        for &v in x3.iter() {
            gap = gap.max(v);
        }
        gap.max(0.0)
    }

    /// One cyclic sweep: exact projection onto each violated half-space of
    /// the clear-sky constraints, then the nonpositive orthant for x3.
    /// Returns the worst pre-projection violation seen during the sweep.
    fn projection_pass(&self, z: &mut Array2<f64>, x3: &mut Array2<f64>) -> f64 {
        let prob = self.prob;
        let (t, p, k) = prob.shape();
        let mut worst: f64 = 0.0;
        if k > 0 {
            for i in 0..t {
                for j in 0..p {
                    if self.qrow2[j] < 1e-300 {
                        continue;
                    }
                    let mut v = prob.mu[j];
                    for m in 0..k {
                        v += z[(i, m)] * prob.q[(j, m)];
                    }
                    if v < 0.0 {
                        worst = worst.max(-v);
                        let c = v / self.qrow2[j];
                        for m in 0..k {
                            z[(i, m)] -= c * prob.q[(j, m)];
                        }
                    }
                }
            }
            for i in 0..t - 2 {
                for j in 0..p {
                    if self.qrow2[j] < 1e-300 {
                        continue;
                    }
                    let mut v = 0.0;
                    for m in 0..k {
                        v += (z[(i, m)] - 2.0 * z[(i + 1, m)] + z[(i + 2, m)]) * prob.q[(j, m)];
                    }
                    if v > 0.0 {
                        worst = worst.max(v);
                        let c = v / (6.0 * self.qrow2[j]);
                        for m in 0..k {
                            let step = c * prob.q[(j, m)];
                            z[(i, m)] -= step;
                            z[(i + 1, m)] += 2.0 * step;
                            z[(i + 2, m)] -= step;
                        }
                    }
                }
            }
        }
        x3.mapv_inplace(|v| v.min(0.0));
        worst
    }

    /// Sweeps until a full pass stays well inside the feasibility
    /// tolerance, giving up after `max_passes`.
    fn restore_feasibility(&self, z: &mut Array2<f64>, x3: &mut Array2<f64>, max_passes: usize) {
        for _ in 0..max_passes {
            if self.projection_pass(z, x3) <= 0.1 * ORACLE_FEAS_TOL {
                return;
            }
        }
    }

    fn subgradient(&self, z: &Array2<f64>, x3: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let prob = self.prob;
        let (t, p, k) = prob.shape();
        let par = &prob.params;
        let zq = z.dot(&prob.q.t());
        let mut s = Array2::zeros((t, p));
        for i in 0..t {
            for j in 0..p {
                if prob.known_mask[(i, j)] {
                    let r = prob.y[(i, j)] - prob.mu[j] - zq[(i, j)] - x3[(i, j)];
                    s[(i, j)] = -r.signum() * f64::from(r != 0.0);
                }
            }
        }
        let mut gz = s.dot(&prob.q);
        let mut gx3 = s;

        let mut zw = z.clone();
        for m in 0..k {
            let w = prob.weights[m];
            zw.column_mut(m).mapv_inplace(|v| v * w);
        }
        let nw = frobenius(&zw);
        if nw > 1e-12 {
            let factor = match par.norm_mode {
                NormMode::Unsquared => par.lambda_2a / nw,
                NormMode::Squared => 2.0 * par.lambda_2a,
            };
            for i in 0..t {
                for m in 0..k {
                    gz[(i, m)] += factor * z[(i, m)] * prob.weights[m] * prob.weights[m];
                }
            }
        }

        let dz = self.d2t.dot(z);
        let ndz = frobenius(&dz);
        if ndz > 1e-12 {
            let factor = match par.norm_mode {
                NormMode::Unsquared => par.lambda_2b / ndz,
                NormMode::Squared => 2.0 * par.lambda_2b,
            };
            gz.scaled_add(factor, &self.d2t.t().dot(&dz));
        }

        let dr = self.d2t.dot(x3);
        let ndr = frobenius(&dr);
        if ndr > 1e-12 {
            let factor = match par.norm_mode {
                NormMode::Unsquared => par.lambda_3 / ndr,
                NormMode::Squared => 2.0 * par.lambda_3,
            };
            gx3.scaled_add(factor, &self.d2t.t().dot(&dr));
        }
        let dc = x3.dot(&self.d2p.t());
        let ndc = frobenius(&dc);
        if ndc > 1e-12 {
            let factor = match par.norm_mode {
                NormMode::Unsquared => par.lambda_3 / ndc,
                NormMode::Squared => 2.0 * par.lambda_3,
            };
            gx3.scaled_add(factor, &dc.dot(&self.d2p));
        }
        (gz, gx3)
    }
}

/// Runs the reference method for `iterations` steps with at most
/// `max_passes` feasibility sweeps after each step.
pub fn reference_objective(prob: &SdProblem, iterations: usize, max_passes: usize) -> OracleResult {
    let (t, p, k) = prob.shape();
    let oracle = Oracle::new(prob);
    let mut z = Array2::zeros((t, k));
    let mut x3 = Array2::zeros((t, p));

    let mut best_obj = f64::INFINITY;
    let mut best_viol = f64::INFINITY;
    for it in 1..=iterations {
        let (gz, gx3) = oracle.subgradient(&z, &x3);
        let alpha = STEP0 / (it as f64).sqrt();
        z.scaled_add(-alpha, &gz);
        x3.scaled_add(-alpha, &gx3);
        oracle.restore_feasibility(&mut z, &mut x3, max_passes);
        let viol = oracle.violation(&z, &x3);
        if viol <= ORACLE_FEAS_TOL {
            let obj = oracle.objective(&z, &x3);
            if obj < best_obj {
                best_obj = obj;
                best_viol = viol;
            }
        }
    }
    OracleResult {
        objective: best_obj,
        violation: best_viol,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sd::{self, SdParams};
    use ndarray::Array1;

    /// Orthonormal two-column basis with zero boundary rows over p points.
    fn tiny_basis(p: usize) -> (Array1<f64>, Array2<f64>) {
        let mut mu = Array1::zeros(p);
        for j in 1..p - 1 {
            mu[j] = 0.6 * (std::f64::consts::PI * j as f64 / (p - 1) as f64).sin();
        }
        let mut q = Array2::zeros((p, 2));
        let mut c0 = Array1::zeros(p);
        let mut c1 = Array1::zeros(p);
        for j in 1..p - 1 {
            let t = j as f64 / (p - 1) as f64;
            c0[j] = (2.0 * std::f64::consts::PI * t).sin();
            c1[j] = (3.0 * std::f64::consts::PI * t).sin();
        }
        let d = c1.dot(&c0) / c0.dot(&c0);
        c1.scaled_add(-d, &c0);
        c0 /= c0.dot(&c0).sqrt();
        c1 /= c1.dot(&c1).sqrt();
        q.column_mut(0).assign(&c0);
        q.column_mut(1).assign(&c1);
        (mu, q)
    }

    /// Instances small enough for the subgradient method: 6 bins by 8
    /// samples, two basis directions, moderate penalties.
    pub(crate) fn tiny_problem(variant: usize) -> SdProblem {
        let t = 6;
        let p = 8;
        let (mu, q) = tiny_basis(p);
        let mut y = Array2::zeros((t, p));
        for i in 0..t {
            for j in 0..p {
                y[(i, j)] = mu[j] + 0.04 * q[(j, 0)];
            }
        }
        let mut mask = Array2::from_elem((t, p), true);
        match variant {
            // Forced shade: the signal sits below every corpus-feasible
            // clear-sky row in a block.
            0 => {
                for i in 1..5 {
                    for j in 2..6 {
                        y[(i, j)] -= 0.25;
                    }
                }
            }
            // One outlier for the residual term.
            1 => {
                y[(2, 4)] += 0.5;
                y[(4, 3)] -= 0.3;
            }
            // Missing row plus a shallow dip.
            2 => {
                mask.row_mut(3).fill(false);
                for i in 0..2 {
                    for j in 3..7 {
                        y[(i, j)] -= 0.1;
                    }
                }
            }
            // Seasonal tilt in the coefficients.
            3 => {
                for i in 0..t {
                    for j in 0..p {
                        y[(i, j)] += 0.03 * (i as f64 - 2.5) * q[(j, 1)];
                    }
                }
                for j in 2..5 {
                    y[(5, j)] -= 0.2;
                }
            }
            // Plain clear signal.
            _ => {}
        }
        let params = SdParams {
            lambda_2b: 5.0,
            abs_tol: 1e-10,
            rel_tol: 1e-9,
            max_iter: 30000,
            ..SdParams::default()
        };
        SdProblem::new(&y, &mask, &mu, &q, &[1.5, 4.0], params).unwrap()
    }

    #[test]
    fn zero_signal_with_zero_mean_gives_zero_objective() {
        let t = 6;
        let p = 8;
        let (_, q) = tiny_basis(p);
        let mu = Array1::zeros(p);
        let y = Array2::zeros((t, p));
        let mask = Array2::from_elem((t, p), true);
        let params = SdParams {
            lambda_2b: 5.0,
            ..SdParams::default()
        };
        let prob = SdProblem::new(&y, &mask, &mu, &q, &[1.5, 4.0], params).unwrap();
        let res = reference_objective(&prob, 500, 400);
        assert!(
            res.objective <= 1e-6,
            "all-zero signal admits the zero solution, objective should vanish, got {}",
            res.objective
        );
    }

    #[test]
    fn doubling_lambda_3_never_decreases_the_objective() {
        let mut prob = tiny_problem(0);
        let base = reference_objective(&prob, 20_000, 400);
        prob.params.lambda_3 *= 2.0;
        let doubled = reference_objective(&prob, 20_000, 400);
        assert!(
            doubled.objective >= base.objective - 1e-6,
            "objective is pointwise nondecreasing in lambda_3: {} vs {}",
            doubled.objective,
            base.objective
        );
    }

    #[test]
    fn oracle_reports_feasible_candidates() {
        let prob = tiny_problem(0);
        let res = reference_objective(&prob, 2000, 400);
        assert!(res.objective.is_finite(), "no feasible iterate found");
        assert!(
            res.violation <= ORACLE_FEAS_TOL,
            "best iterate violates constraints by {}",
            res.violation
        );
    }

    #[test]
    fn oracle_and_solver_agree_on_a_shaded_instance() {
        let prob = tiny_problem(0);
        let dec = sd::solve(&prob);
        assert!(dec.converged, "main solver should converge on a tiny instance");
        let res = reference_objective(&prob, 120_000, 400);
        let rel = (res.objective - dec.objective).abs() / (1.0 + dec.objective.abs());
        assert!(
            rel <= 1e-3,
            "objectives disagree: oracle {} vs solver {} (relative {rel:.2e})",
            res.objective,
            dec.objective
        );
    }

    #[test]
    fn oracle_and_solver_agree_with_missing_rows() {
        let prob = tiny_problem(2);
        let dec = sd::solve(&prob);
        assert!(dec.converged, "main solver should converge on a tiny instance");
        let res = reference_objective(&prob, 120_000, 400);
        let rel = (res.objective - dec.objective).abs() / (1.0 + dec.objective.abs());
        assert!(
            rel <= 1e-3,
            "objectives disagree: oracle {} vs solver {} (relative {rel:.2e})",
            res.objective,
            dec.objective
        );
    }
}
