//! Regularized, box-constrained likelihood fluctuation solver.
//!
//! Minimizes
//!
//! ```text
//! f(a) = -(1/N) sum_i log(1 + (H a)_i) + lambda * a' G a
//! s.t.  lower <= base_c + (R a)_c <= upper   for every bound row c
//! ```
//!
//! with a log-barrier interior point method. Each barrier round runs damped
//! Newton steps on `f(a) + (mu / 2m) * sum_c [-log s_lo,c - log s_hi,c]`,
//! so `mu` bounds the duality gap directly. `mu` starts at `1e-2` and is
//! divided by ten after every round.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KdpeError, Result};

pub const MU_0: f64 = 1e-2;
pub const MAX_NEWTON_STEPS: usize = 200;
const ARMIJO: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const TO_BOUNDARY: f64 = 0.99;
/// Relative Levenberg damping on the Newton system.
const RIDGE: f64 = 1e-10;
const NEAR_BOUND_SLACK: f64 = 1e-6;
/// Relative eigenvalue cut for the whitening basis.
const EIGEN_FLOOR: f64 = 1e-12;

/// Linear box constraints `lower <= base + R a <= upper`.
#[derive(Clone, Debug)]
pub struct BoundRows {
    pub rows: DMatrix<f64>,
    pub base: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

impl BoundRows {
    /// Rows for table entries updated as `p (1 + score . a)`:
    /// `scores[c][j]` is the value of score column `j` at the cell of entry `c`.
    pub fn from_scores(base: Vec<f64>, scores: &DMatrix<f64>, c_bound: f64) -> Self {
        let mut rows = scores.clone();
        for (r, &b) in base.iter().enumerate() {
            rows.row_mut(r).scale_mut(b);
        }
        BoundRows {
            rows,
            base,
            lower: c_bound,
            upper: 1.0 - c_bound,
        }
    }

    pub fn empty(dim: usize) -> Self {
        BoundRows {
            rows: DMatrix::zeros(0, dim),
            base: Vec::new(),
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct FluctuationProblem {
    /// `H[i][j]`: score column `j` evaluated at observation `i`.
    pub observed: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    pub lambda: f64,
    pub bounds: BoundRows,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    ConvergedInterior,
    ConvergedNearBound,
    MaxIterations,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FluctuationSolution {
    pub alpha: Vec<f64>,
    pub objective: f64,
    pub objective_at_zero: f64,
    pub kkt_residual: f64,
    pub newton_iterations: usize,
    pub barrier_outer_rounds: usize,
    pub status: SolverStatus,
}

impl FluctuationProblem {
    pub fn dim(&self) -> usize {
        self.observed.ncols()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.gram.nrows() != d || self.gram.ncols() != d {
            return Err(KdpeError::InvalidInput(format!(
                "gram is {}x{}, expected {d}x{d}",
                self.gram.nrows(),
                self.gram.ncols()
            )));
        }
        if self.bounds.rows.ncols() != d || self.bounds.rows.nrows() != self.bounds.base.len() {
            return Err(KdpeError::InvalidInput("bound rows have the wrong shape".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(KdpeError::InvalidInput(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.observed.iter().any(|v| !v.is_finite()) {
            return Err(KdpeError::InvalidInput("observed score matrix is not finite".into()));
        }
        let b = &self.bounds;
        if let Some(v) = b.base.iter().find(|&&v| !(v > b.lower && v < b.upper)) {
            return Err(KdpeError::Solver(format!(
                "zero update is not strictly feasible: entry {v} outside ({}, {})",
                b.lower, b.upper
            )));
        }
        Ok(())
    }

    /// Unpenalized-plus-penalty objective `f(a)`; `+inf` outside the log domain.
    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let a = DVector::from_column_slice(alpha);
        let ha = &self.observed * &a;
        self.objective_from(&ha, &a)
    }

    fn objective_from(&self, ha: &DVector<f64>, a: &DVector<f64>) -> f64 {
        let n = self.observed.nrows() as f64;
        let mut loglik = 0.0;
        for v in ha.iter() {
            let r = 1.0 + v;
            if !(r > 0.0) {
                return f64::INFINITY;
            }
            loglik += r.ln();
        }
        let penalty = if self.lambda > 0.0 {
            self.lambda * a.dot(&(&self.gram * a))
        } else {
            0.0
        };
        -loglik / n + penalty
    }

    /// Analytic gradient of `f`.
    pub fn gradient(&self, alpha: &[f64]) -> Vec<f64> {
        let a = DVector::from_column_slice(alpha);
        let ha = &self.observed * &a;
        let n = self.observed.nrows() as f64;
        let w = ha.map(|v| -1.0 / ((1.0 + v) * n));
        let mut g = self.observed.tr_mul(&w);
        if self.lambda > 0.0 {
            g += (&self.gram * &a) * (2.0 * self.lambda);
        }
        g.iter().copied().collect()
    }

    /// Whether `a` satisfies every bound (inclusive) and the log domain.
    pub fn is_feasible(&self, alpha: &[f64]) -> bool {
        let a = DVector::from_column_slice(alpha);
        let ha = &self.observed * &a;
        if ha.iter().any(|v| !(1.0 + v > 0.0)) {
            return false;
        }
        let ra = &self.bounds.rows * &a;
        ra.iter().zip(&self.bounds.base).all(|(r, b)| {
            let v = b + r;
            v >= self.bounds.lower && v <= self.bounds.upper
        })
    }

    /// Smallest slack of the bound constraints at `a`.
    pub fn min_slack(&self, alpha: &[f64]) -> f64 {
        let a = DVector::from_column_slice(alpha);
        let ra = &self.bounds.rows * &a;
        ra.iter()
            .zip(&self.bounds.base)
            .map(|(r, b)| (b + r - self.bounds.lower).min(self.bounds.upper - b - r))
            .fold(f64::INFINITY, f64::min)
    }
}

struct BarrierState {
    ha: DVector<f64>,
    ra: DVector<f64>,
}

impl<'a> BarrierSolver<'a> {
    fn barrier_value(&self, st: &BarrierState, a: &DVector<f64>, mu: f64) -> f64 {
        let f = self.prob.objective_from(&st.ha, a);
        if !f.is_finite() {
            return f64::INFINITY;
        }
        let b = &self.prob.bounds;
        let mut bar = 0.0;
        for (r, base) in st.ra.iter().zip(&b.base) {
            let v = base + r;
            let (lo, hi) = (v - b.lower, b.upper - v);
            if !(lo > 0.0 && hi > 0.0) {
                return f64::INFINITY;
            }
            bar -= lo.ln() + hi.ln();
        }
        f + mu * self.weight * bar
    }

    /// Gradient and Hessian of the barrier objective.
    fn derivatives(&self, st: &BarrierState, a: &DVector<f64>, mu: f64) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.prob;
        let n_obs = p.observed.nrows();
        let m = p.bounds.len();
        let d = p.dim();
        let inv_n = 1.0 / n_obs as f64;

        // stacked, row-scaled design: Hessian = W' W
        let mut w = DMatrix::<f64>::zeros(n_obs + m, d);
        let mut coef = DVector::<f64>::zeros(n_obs + m);
        for i in 0..n_obs {
            let r = 1.0 + st.ha[i];
            coef[i] = -inv_n / r;
            let s = (inv_n).sqrt() / r;
            w.row_mut(i).copy_from(&(p.observed.row(i) * s));
        }
        let b = &p.bounds;
        let mw = mu * self.weight;
        for c in 0..m {
            let v = b.base[c] + st.ra[c];
            let (lo, hi) = (v - b.lower, b.upper - v);
            coef[n_obs + c] = mw * (-1.0 / lo + 1.0 / hi);
            let s = (mw * (1.0 / (lo * lo) + 1.0 / (hi * hi))).sqrt();
            w.row_mut(n_obs + c).copy_from(&(b.rows.row(c) * s));
        }

        let mut grad = p.observed.tr_mul(&coef.rows(0, n_obs).into_owned());
        if m > 0 {
            grad += b.rows.tr_mul(&coef.rows(n_obs, m).into_owned());
        }
        let wt = w.transpose();
        let mut hess = &wt * &w;
        if p.lambda > 0.0 {
            let ga = &p.gram * a;
            grad += ga * (2.0 * p.lambda);
            hess += &p.gram * (2.0 * p.lambda);
        }
        (grad, hess)
    }

    fn newton_direction(&self, grad: &DVector<f64>, hess: DMatrix<f64>) -> Result<DVector<f64>> {
        let d = hess.nrows();
        let scale = (0..d).map(|i| hess[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
        let mut ridge = RIDGE * scale;
        for _ in 0..12 {
            let mut h = hess.clone();
            for i in 0..d {
                h[(i, i)] += ridge;
            }
            if let Some(ch) = h.cholesky() {
                return Ok(-ch.solve(grad));
            }
            ridge *= 100.0;
        }
        Err(KdpeError::Solver("Newton system is not positive definite".into()))
    }

    /// Largest step keeping every slack and `1 + H a` positive.
    fn max_step(&self, st: &BarrierState, h_dir: &DVector<f64>, r_dir: &DVector<f64>) -> f64 {
        let mut t_max = f64::INFINITY;
        for (ha, hd) in st.ha.iter().zip(h_dir.iter()) {
            if *hd < 0.0 {
                t_max = t_max.min((1.0 + ha) / -hd);
            }
        }
        let b = &self.prob.bounds;
        for ((ra, rd), base) in st.ra.iter().zip(r_dir.iter()).zip(&b.base) {
            let v = base + ra;
            if *rd > 0.0 {
                t_max = t_max.min((b.upper - v) / rd);
            } else if *rd < 0.0 {
                t_max = t_max.min((v - b.lower) / -rd);
            }
        }
        t_max
    }
}

struct BarrierSolver<'a> {
    prob: &'a FluctuationProblem,
    /// `1 / (2m)`: per-inequality barrier weight.
    weight: f64,
}

/// Column `j` of `M = H'H / N + R'R + 2 lambda G`.
fn curvature_column(prob: &FluctuationProblem, j: usize) -> DVector<f64> {
    let n = prob.observed.nrows().max(1) as f64;
    let mut col = prob.observed.tr_mul(&prob.observed.column(j)) / n;
    if !prob.bounds.is_empty() {
        col += prob.bounds.rows.tr_mul(&prob.bounds.rows.column(j));
    }
    if prob.lambda > 0.0 {
        col += prob.gram.column(j) * (2.0 * prob.lambda);
    }
    col
}

/// Basis `T` (d x k) with `T' M T = I`, from a pivoted Cholesky of `M`
/// stopped once the residual diagonal falls below `EIGEN_FLOOR` times the
/// largest diagonal. Only the `k` pivot columns of `M` are formed.
fn whitening_basis(prob: &FluctuationProblem) -> DMatrix<f64> {
    let d = prob.dim();
    let n = prob.observed.nrows().max(1) as f64;
    let mut diag: Vec<f64> = (0..d)
        .map(|j| {
            let mut v = prob.observed.column(j).norm_squared() / n;
            if !prob.bounds.is_empty() {
                v += prob.bounds.rows.column(j).norm_squared();
            }
            if prob.lambda > 0.0 {
                v += 2.0 * prob.lambda * prob.gram[(j, j)];
            }
            v
        })
        .collect();
    let top = diag.iter().copied().fold(0.0, f64::max);
    let mut factors: Vec<DVector<f64>> = Vec::new();
    let mut pivots: Vec<usize> = Vec::new();
    while top > 0.0 && pivots.len() < d {
        let (j, dj) = diag
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        if dj <= EIGEN_FLOOR * top {
            break;
        }
        let mut col = curvature_column(prob, j);
        for l in &factors {
            col.axpy(-l[j], l, 1.0);
        }
        col /= dj.sqrt();
        for (i, v) in diag.iter_mut().enumerate() {
            *v -= col[i] * col[i];
        }
        for &p in pivots.iter().chain(std::iter::once(&j)) {
            diag[p] = 0.0;
        }
        factors.push(col);
        pivots.push(j);
    }
    let k = pivots.len();
    // T = E_P L_PP^{-T}, with L_PP[a][b] = factors[b][pivots[a]]
    let l_pp = DMatrix::from_fn(k, k, |a, b| if b <= a { factors[b][pivots[a]] } else { 0.0 });
    let mut t_pp = DMatrix::<f64>::identity(k, k);
    if k > 0 && !l_pp.transpose().solve_upper_triangular_mut(&mut t_pp) {
        return DMatrix::zeros(d, 0);
    }
    let mut t = DMatrix::zeros(d, k);
    for (a, &p) in pivots.iter().enumerate() {
        t.row_mut(p).copy_from(&t_pp.row(a));
    }
    t
}

/// Solve the fluctuation problem to tolerance `tol` (duality-gap surrogate
/// and Newton decrement).
///
/// Newton runs in whitened coordinates; directions that move neither the
/// objective nor any constraint are left at zero.
pub fn solve_fluctuation(prob: &FluctuationProblem, tol: f64) -> Result<FluctuationSolution> {
    prob.validate()?;
    if !(tol > 0.0) {
        return Err(KdpeError::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let t = whitening_basis(prob);
    let reduced = FluctuationProblem {
        observed: &prob.observed * &t,
        gram: t.tr_mul(&(&prob.gram * &t)),
        lambda: prob.lambda,
        bounds: BoundRows {
            rows: &prob.bounds.rows * &t,
            base: prob.bounds.base.clone(),
            lower: prob.bounds.lower,
            upper: prob.bounds.upper,
        },
    };
    let inner = solve_whitened(&reduced, tol)?;
    let beta = DVector::from_column_slice(&inner.alpha);
    let mut alpha: Vec<f64> = (&t * beta).iter().copied().collect();
    let f0 = prob.objective(&vec![0.0; prob.dim()]);
    let mut objective = prob.objective(&alpha);
    if !(objective <= f0) || !prob.is_feasible(&alpha) {
        alpha = vec![0.0; prob.dim()];
        objective = f0;
    }
    let status = match inner.status {
        SolverStatus::MaxIterations => SolverStatus::MaxIterations,
        _ if !prob.bounds.is_empty() && prob.min_slack(&alpha) < NEAR_BOUND_SLACK => {
            SolverStatus::ConvergedNearBound
        }
        _ => SolverStatus::ConvergedInterior,
    };
    Ok(FluctuationSolution {
        alpha,
        objective,
        objective_at_zero: f0,
        status,
        ..inner
    })
}

fn solve_whitened(prob: &FluctuationProblem, tol: f64) -> Result<FluctuationSolution> {
    let d = prob.dim();
    let m = prob.bounds.len();
    let solver = BarrierSolver {
        prob,
        weight: if m > 0 { 1.0 / (2 * m) as f64 } else { 0.0 },
    };

    let mut a = DVector::<f64>::zeros(d);
    let mut st = BarrierState {
        ha: DVector::zeros(prob.observed.nrows()),
        ra: DVector::zeros(m),
    };
    let f0 = prob.objective_from(&st.ha, &a);
    let mut mu = if m > 0 { MU_0 } else { 0.0 };
    let mut newton = 0usize;
    let mut rounds = 0usize;
    let mut capped = false;
    let mut last_decrement;
    let mut grad: DVector<f64>;

    'outer: loop {
        rounds += 1;
        loop {
            let (g, hess) = solver.derivatives(&st, &a, mu);
            grad = g;
            let dir = solver.newton_direction(&grad, hess)?;
            let dec2 = -grad.dot(&dir);
            last_decrement = dec2.max(0.0).sqrt();
            if dec2 / 2.0 <= tol {
                break;
            }
            if newton >= MAX_NEWTON_STEPS {
                capped = true;
                break 'outer;
            }
            newton += 1;

            let h_dir = &prob.observed * &dir;
            let r_dir = &prob.bounds.rows * &dir;
            let mut t = (TO_BOUNDARY * solver.max_step(&st, &h_dir, &r_dir)).min(1.0);
            let phi = solver.barrier_value(&st, &a, mu);
            let slope = grad.dot(&dir);
            let mut accepted = false;
            while t > 1e-16 {
                let trial_a = &a + &dir * t;
                let trial = BarrierState {
                    ha: &st.ha + &h_dir * t,
                    ra: &st.ra + &r_dir * t,
                };
                let phi_t = solver.barrier_value(&trial, &trial_a, mu);
                if phi_t.is_finite() && phi_t <= phi + ARMIJO * t * slope {
                    a = trial_a;
                    st = trial;
                    accepted = true;
                    break;
                }
                t *= BACKTRACK;
            }
            if !accepted {
                // no representable descent left at this barrier weight
                break;
            }
        }
        if mu <= tol {
            break;
        }
        mu /= 10.0;
    }

    let mut alpha: Vec<f64> = a.iter().copied().collect();
    let mut objective = prob.objective_from(&st.ha, &a);
    if !(objective <= f0) {
        alpha = vec![0.0; d];
        objective = f0;
    }
    let status = if capped {
        SolverStatus::MaxIterations
    } else if m > 0 && prob.min_slack(&alpha) < NEAR_BOUND_SLACK {
        SolverStatus::ConvergedNearBound
    } else {
        SolverStatus::ConvergedInterior
    };
    log::trace!(
        "fluctuation solve: d={d} m={m} newton={newton} rounds={rounds} decrement={last_decrement:.3e}"
    );
    Ok(FluctuationSolution {
        alpha,
        objective,
        objective_at_zero: f0,
        kkt_residual: grad.amax(),
        newton_iterations: newton,
        barrier_outer_rounds: rounds,
        status,
    })
}
