//! History-based decoder: the minimum-norm correction of the prior that
//! satisfies every observation received so far and stays inside `[0, 1]`,
//!
//! ```text
//! min ‖x - x̂₀‖²  s.t.  A₀:ₜ x = o₀:ₜ,  0 ≤ x ≤ 1.
//! ```
//!
//! Solved through its dual. For multipliers `λ` the box-constrained
//! minimizer is `x(λ) = clamp(x̂₀ + Aᵀλ, 0, 1)`; the dual is concave and
//! piecewise quadratic, and is maximized with a regularized semismooth Newton
//! method whose inner systems `(A D Aᵀ + μ I) d = ∇g` are solved by conjugate
//! gradients (`D` masks the cells strictly inside the box). Stationarity and
//! the box hold by construction, so the KKT residual is the equality residual
//! `‖A x - o‖∞`.
//!
//! Noisy histories are generally inconsistent. When the equality form fails
//! to converge the solver switches to `min ‖x - x̂₀‖² + ρ‖A x - o‖²` over the
//! box, whose dual is the same iteration with `μ ≥ 1/ρ`.

use crate::abstraction::ObservationOperator;
use crate::error::{arg, Error, Result};

/// Every observation received so far, stacked.
#[derive(Debug, Clone)]
pub struct HistoryStack {
    prior_mean: Vec<f64>,
    rows: Vec<Vec<usize>>,
    obs: Vec<f64>,
    steps: usize,
}

impl HistoryStack {
    pub fn new(prior_mean: Vec<f64>) -> Self {
        Self {
            prior_mean,
            rows: Vec::new(),
            obs: Vec::new(),
            steps: 0,
        }
    }

    pub fn push(&mut self, op: &ObservationOperator, obs: &[f64]) -> Result<()> {
        if op.n_cols() != self.prior_mean.len() {
            return arg(format!(
                "operator has {} columns, history has {} cells",
                op.n_cols(),
                self.prior_mean.len()
            ));
        }
        if obs.len() != op.n_rows() {
            return arg(format!(
                "{} observations for an operator with {} rows",
                obs.len(),
                op.n_rows()
            ));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("observation is not finite".into()));
        }
        self.rows.extend(op.rows().iter().cloned());
        self.obs.extend_from_slice(obs);
        self.steps += 1;
        Ok(())
    }

    /// Number of operators pushed.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    /// Total stacked constraint rows.
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cells(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn prior_mean(&self) -> &[f64] {
        &self.prior_mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpMode {
    /// Equality constraints satisfied to tolerance.
    Exact,
    /// Equalities were inconsistent; the penalized problem was solved instead.
    Penalized,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub mode: QpMode,
    /// Newton iterations over all attempts.
    pub iterations: usize,
    /// Final `‖A x - o‖∞` (exact) or dual gradient norm (penalized).
    pub residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    /// Target equality residual.
    pub tolerance: f64,
    /// Largest residual at which a stalled equality solve still counts as
    /// consistent instead of falling back to the penalized form.
    pub consistency_tolerance: f64,
    pub max_newton: usize,
    pub rho: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            consistency_tolerance: 1e-7,
            max_newton: 200,
            rho: 1e6,
        }
    }
}

pub fn solve_history_qp(stack: &HistoryStack) -> QpSolution {
    solve_history_qp_with(stack, &QpOptions::default())
}

pub fn solve_history_qp_with(stack: &HistoryStack, opts: &QpOptions) -> QpSolution {
    let n = stack.n_cells();
    let mut x: Vec<f64> = stack.prior_mean.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    if stack.rows.is_empty() {
        return QpSolution {
            x,
            mode: QpMode::Exact,
            iterations: 0,
            residual: 0.0,
        };
    }

    // only cells that appear in a constraint can move away from the prior
    let mut local = vec![usize::MAX; n];
    let mut cells = Vec::new();
    for &j in stack.rows.iter().flatten() {
        if local[j] == usize::MAX {
            local[j] = cells.len();
            cells.push(j);
        }
    }
    let problem = Reduced {
        x0: cells.iter().map(|&j| stack.prior_mean[j]).collect(),
        rows: stack
            .rows
            .iter()
            .map(|r| r.iter().map(|&j| local[j]).collect())
            .collect(),
        obs: stack.obs.clone(),
    };

    let exact = problem.solve(0.0, opts.tolerance, opts.max_newton);
    let (xs, mode, iterations, residual) = if exact.residual <= opts.consistency_tolerance {
        (exact.x, QpMode::Exact, exact.iterations, exact.residual)
    } else {
        log::debug!(
            "history QP equalities inconsistent (residual {:.3e}); using penalized form",
            exact.residual
        );
        let pen = problem.solve(1.0 / opts.rho, opts.tolerance, opts.max_newton);
        (
            pen.x,
            QpMode::Penalized,
            exact.iterations + pen.iterations,
            pen.residual,
        )
    };
    for (&j, v) in cells.iter().zip(xs) {
        x[j] = v;
    }
    QpSolution {
        x,
        mode,
        iterations,
        residual,
    }
}

const STALL_ITERATIONS: usize = 15;

struct Reduced {
    x0: Vec<f64>,
    rows: Vec<Vec<usize>>,
    obs: Vec<f64>,
}

struct DualResult {
    x: Vec<f64>,
    iterations: usize,
    residual: f64,
}

impl Reduced {
    fn a_mul(&self, u: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&j| u[j]).sum::<f64>() / row.len() as f64;
        }
    }

    fn at_mul(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (vr, row) in v.iter().zip(&self.rows) {
            let w = vr / row.len() as f64;
            for &j in row {
                out[j] += w;
            }
        }
    }

    /// Primal point and dual value `g(λ)` for multipliers `lambda`.
    fn evaluate(
        &self,
        lambda: &[f64],
        mu_pen: f64,
        scratch: &mut [f64],
    ) -> (Vec<f64>, Vec<bool>, f64) {
        self.at_mul(lambda, scratch);
        let mut free = vec![false; self.x0.len()];
        let x: Vec<f64> = self
            .x0
            .iter()
            .zip(scratch.iter())
            .zip(free.iter_mut())
            .map(|((x0, atl), f)| {
                let z = x0 + atl;
                *f = z > 0.0 && z < 1.0;
                z.clamp(0.0, 1.0)
            })
            .collect();
        let mut ax = vec![0.0; self.rows.len()];
        self.a_mul(&x, &mut ax);
        let quad: f64 = x
            .iter()
            .zip(&self.x0)
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum();
        let lin: f64 = lambda
            .iter()
            .zip(ax.iter().zip(&self.obs))
            .map(|(l, (a, o))| l * (a - o))
            .sum();
        let reg: f64 = 0.5 * mu_pen * lambda.iter().map(|l| l * l).sum::<f64>();
        (x, free, quad - lin - reg)
    }

    fn gradient(&self, x: &[f64], lambda: &[f64], mu_pen: f64) -> Vec<f64> {
        let mut ax = vec![0.0; self.rows.len()];
        self.a_mul(x, &mut ax);
        self.obs
            .iter()
            .zip(&ax)
            .zip(lambda)
            .map(|((o, a), l)| o - a - mu_pen * l)
            .collect()
    }

    fn solve(&self, mu_pen: f64, tol: f64, max_newton: usize) -> DualResult {
        let m = self.rows.len();
        let n = self.x0.len();
        let mut lambda = vec![0.0; m];
        let mut scratch = vec![0.0; n];
        let (mut x, mut free, mut g) = self.evaluate(&lambda, mu_pen, &mut scratch);
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        // (best residual, iteration it was reached) for stall detection
        let mut best = (f64::INFINITY, 0);

        for it in 0..max_newton {
            iterations = it;
            let grad = self.gradient(&x, &lambda, mu_pen);
            residual = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if residual <= tol {
                return DualResult {
                    x,
                    iterations: it,
                    residual,
                };
            }
            if residual < 0.9 * best.0 {
                best = (residual, it);
            } else if it - best.1 >= STALL_ITERATIONS {
                break;
            }
            let mu = mu_pen + 1e-3 * residual.min(1.0);
            let d = self.newton_direction(&free, mu, &grad, residual);
            let slope: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
            if !(slope > 0.0) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-14 {
                let trial: Vec<f64> = lambda.iter().zip(&d).map(|(l, d)| l + t * d).collect();
                let (xt, ft, gt) = self.evaluate(&trial, mu_pen, &mut scratch);
                if gt >= g + 1e-4 * t * slope {
                    lambda = trial;
                    x = xt;
                    free = ft;
                    g = gt;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        DualResult {
            x,
            iterations,
            residual,
        }
    }

    /// Conjugate gradients on `(A D Aᵀ + μ I) d = rhs`.
    fn newton_direction(&self, free: &[bool], mu: f64, rhs: &[f64], residual: f64) -> Vec<f64> {
        let m = rhs.len();
        let n = self.x0.len();
        let mut tmp_n = vec![0.0; n];
        let mut apply = |v: &[f64], out: &mut [f64]| {
            self.at_mul(v, &mut tmp_n);
            for (t, &f) in tmp_n.iter_mut().zip(free) {
                if !f {
                    *t = 0.0;
                }
            }
            self.a_mul(&tmp_n, out);
            for (o, vi) in out.iter_mut().zip(v) {
                *o += mu * vi;
            }
        };

        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut d = vec![0.0; m];
        let mut r = rhs.to_vec();
        let mut p = r.clone();
        let mut ap = vec![0.0; m];
        let mut rr = dot(&r, &r);
        let stop = (rr.sqrt() * residual.min(0.1)).max(1e-14);
        for _ in 0..(2 * m).max(50) {
            if rr.sqrt() <= stop {
                break;
            }
            apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rr / pap;
            for i in 0..m {
                d[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..m {
                p[i] = r[i] + beta * p[i];
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::OperatorSource;

    fn op(n: usize, rows: Vec<Vec<usize>>) -> ObservationOperator {
        ObservationOperator::new(n, rows, OperatorSource::Template(0)).unwrap()
    }

    #[test]
    fn empty_history_clamps_prior() {
        let s = HistoryStack::new(vec![-0.2, 0.4, 1.3]);
        let sol = solve_history_qp(&s);
        assert_eq!(sol.x, vec![0.0, 0.4, 1.0]);
        assert_eq!(sol.mode, QpMode::Exact);
    }

    #[test]
    fn singleton_constraint_is_decoupled() {
        let mut s = HistoryStack::new(vec![0.5; 5]);
        s.push(&op(5, vec![vec![3]]), &[0.7]).unwrap();
        let sol = solve_history_qp(&s);
        for (i, v) in sol.x.iter().enumerate() {
            let want = if i == 3 { 0.7 } else { 0.5 };
            assert!((v - want).abs() < 1e-9, "{i}: {v}");
        }
    }

    #[test]
    fn average_constraint_shifts_equally() {
        let mut s = HistoryStack::new(vec![0.5; 4]);
        s.push(&op(4, vec![vec![0, 1, 2, 3]]), &[0.9]).unwrap();
        let sol = solve_history_qp(&s);
        for v in &sol.x {
            assert!((v - 0.9).abs() < 1e-9);
        }
        assert!(sol.residual <= 1e-8);
    }

    #[test]
    fn active_box_bound() {
        // mean(x0, x1) = 0.95 from prior (0.2, 0.9): the unconstrained answer
        // is (0.575, 1.275), so x1 pins at 1 and x0 = 0.9
        let mut s = HistoryStack::new(vec![0.2, 0.9]);
        s.push(&op(2, vec![vec![0, 1]]), &[0.95]).unwrap();
        let sol = solve_history_qp(&s);
        assert_eq!(sol.mode, QpMode::Exact);
        assert!((sol.x[0] - 0.9).abs() < 1e-9);
        assert!((sol.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn redundant_rows_do_not_change_solution() {
        let mut s = HistoryStack::new(vec![0.3; 6]);
        s.push(&op(6, vec![vec![0, 1, 2], vec![2, 3]]), &[0.6, 0.4])
            .unwrap();
        let base = solve_history_qp(&s).x;
        s.push(&op(6, vec![vec![0, 1, 2], vec![2, 3]]), &[0.6, 0.4])
            .unwrap();
        let again = solve_history_qp(&s);
        assert_eq!(again.mode, QpMode::Exact);
        for (a, b) in base.iter().zip(&again.x) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn inconsistent_history_falls_back() {
        let mut s = HistoryStack::new(vec![0.5; 2]);
        s.push(&op(2, vec![vec![0]]), &[0.4]).unwrap();
        s.push(&op(2, vec![vec![0]]), &[0.6]).unwrap();
        let sol = solve_history_qp(&s);
        assert_eq!(sol.mode, QpMode::Penalized);
        assert!((sol.x[0] - 0.5).abs() < 1e-5);
        assert_eq!(sol.x[1], 0.5);
    }

    #[test]
    fn push_validates() {
        let mut s = HistoryStack::new(vec![0.5; 2]);
        assert!(s.push(&op(3, vec![vec![0]]), &[0.1]).is_err());
        assert!(s.push(&op(2, vec![vec![0]]), &[0.1, 0.2]).is_err());
        assert!(s.push(&op(2, vec![vec![0]]), &[f64::NAN]).is_err());
    }
}
