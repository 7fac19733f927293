//! Nonnegativity-constrained (generalized) Tikhonov regularization.
//!
//! Every problem here is already noise-weighted: the caller passes
//! `K = Sigma^{-1/2} K_N` and `r = Sigma^{-1/2} e`. The solver minimizes
//!
//! ```text
//! 1/2 |K n - r|^2 + 1/2 gamma n^T R n   subject to   n >= 0
//! ```
//!
//! by factoring `R = U^T U` and running Lawson-Hanson NNLS on the stacked
//! system `[K; sqrt(gamma) U] n ~ [r; 0]`, which has the same objective and
//! keeps the constraint on `n` itself.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::discretization::BasisWeights;
use crate::error::{Error, Result};

/// Lower end of the regularization-parameter search.
pub const GAMMA_MIN: f64 = 1e-12;
/// Largest upper bracket tried before giving up.
pub const GAMMA_CEILING: f64 = 1e12;
/// Default upper bracket for the discrepancy search.
pub const DEFAULT_GAMMA_MAX: f64 = 1e6;
/// Relative tolerance on the matched residual.
pub const DISCREPANCY_RTOL: f64 = 1e-6;
const MAX_BISECTIONS: usize = 200;

/// Upper Cholesky factor `U` with `R = U^T U`.
pub fn cholesky_upper(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if r.nrows() != r.ncols() {
        return Err(Error::DimensionError("regularizer must be square".into()));
    }
    let chol = r.clone().cholesky().ok_or(Error::IllConditioned)?;
    Ok(chol.l().transpose())
}

/// A weighted Tikhonov problem with nonnegativity constraints.
#[derive(Debug, Clone)]
pub struct WeightedProblem {
    kernel: DMatrix<f64>,
    data: DVector<f64>,
    regularizer: DMatrix<f64>,
    factor: DMatrix<f64>,
    pub gamma: f64,
}

impl WeightedProblem {
    pub fn new(
        kernel: DMatrix<f64>,
        data: DVector<f64>,
        regularizer: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let factor = cholesky_upper(&regularizer)?;
        Self::with_factor(kernel, data, regularizer, factor, gamma)
    }

    /// Uses a precomputed factor `U` of `R = U^T U`.
    pub fn with_factor(
        kernel: DMatrix<f64>,
        data: DVector<f64>,
        regularizer: DMatrix<f64>,
        factor: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if kernel.nrows() != data.len() {
            return Err(Error::DimensionError(format!(
                "kernel has {} rows, data has {} entries",
                kernel.nrows(),
                data.len()
            )));
        }
        if regularizer.nrows() != kernel.ncols() || factor.shape() != regularizer.shape() {
            return Err(Error::DimensionError(format!(
                "regularizer is {}x{} for {} unknowns",
                regularizer.nrows(),
                regularizer.ncols(),
                kernel.ncols()
            )));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!("gamma = {gamma}")));
        }
        if kernel.iter().chain(data.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite kernel or data".into()));
        }
        Ok(Self {
            kernel,
            data,
            regularizer,
            factor,
            gamma,
        })
    }

    /// Plain NNLS problem (`gamma = 0`, `R = I`).
    pub fn nnls(kernel: DMatrix<f64>, data: DVector<f64>) -> Result<Self> {
        let n = kernel.ncols();
        Self::with_factor(kernel, data, DMatrix::identity(n, n), DMatrix::identity(n, n), 0.0)
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn regularizer(&self) -> &DMatrix<f64> {
        &self.regularizer
    }

    pub fn dim(&self) -> usize {
        self.kernel.ncols()
    }

    /// `|r|^2`, the residual of the minimum-norm feasible point `n = 0`.
    pub fn data_norm_sq(&self) -> f64 {
        self.data.norm_squared()
    }

    /// Gradient of the objective at `n`.
    pub fn gradient(&self, n: &DVector<f64>, gamma: f64) -> DVector<f64> {
        let resid = &self.kernel * n - &self.data;
        self.kernel.tr_mul(&resid) + (&self.regularizer * n) * gamma
    }

    pub fn solve(&self) -> Result<QpSolution> {
        self.solve_at(self.gamma)
    }

    pub fn solve_at(&self, gamma: f64) -> Result<QpSolution> {
        let n = self.dim();
        let (a, b) = if gamma > 0.0 {
            let m = self.kernel.nrows();
            let mut a = DMatrix::zeros(m + n, n);
            a.rows_mut(0, m).copy_from(&self.kernel);
            a.rows_mut(m, n).copy_from(&(&self.factor * gamma.sqrt()));
            let mut b = DVector::zeros(m + n);
            b.rows_mut(0, m).copy_from(&self.data);
            (a, b)
        } else {
            (self.kernel.clone(), self.data.clone())
        };
        let x = lawson_hanson(&a, &b, 10 * n.max(1))?;
        let grad = self.gradient(&x, gamma);
        let duals = DVector::from_iterator(
            n,
            x.iter()
                .zip(grad.iter())
                .map(|(&xi, &gi)| if xi > 0.0 { 0.0 } else { gi }),
        );
        let active_set = (0..n).filter(|&j| x[j] == 0.0).collect();
        let residual_sq = weighted_residual(&self.kernel, &x, &self.data);
        Ok(QpSolution {
            weights: BasisWeights::new(x),
            duals,
            residual_sq,
            active_set,
            gamma,
        })
    }
}

/// Minimizer of a constrained Tikhonov problem with its KKT multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub weights: BasisWeights,
    /// Multipliers of the constraints `n >= 0`.
    pub duals: DVector<f64>,
    /// `|K n - r|^2`
    pub residual_sq: f64,
    /// Indices with `n_j = 0`.
    pub active_set: Vec<usize>,
    pub gamma: f64,
}

/// Worst violations of the KKT conditions, each scaled by `max(1, |K^T r|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub dual_infeasibility: f64,
    pub complementarity: f64,
    pub primal_infeasibility: f64,
}

impl KktReport {
    pub fn satisfied(&self, tol: f64) -> bool {
        self.stationarity <= tol
            && self.dual_infeasibility <= tol
            && self.complementarity <= tol
            && self.primal_infeasibility == 0.0
    }
}

impl QpSolution {
    pub fn kkt_report(&self, problem: &WeightedProblem) -> KktReport {
        let n = self.weights.as_vector();
        let scale = problem.kernel.tr_mul(&problem.data).norm().max(1.0);
        let grad = problem.gradient(n, self.gamma);
        let stationarity = (&grad - &self.duals).amax() / scale;
        let dual_infeasibility = self.duals.iter().map(|&d| (-d).max(0.0)).fold(0.0, f64::max) / scale;
        let complementarity = n
            .iter()
            .zip(self.duals.iter())
            .map(|(x, d)| (x * d).abs())
            .fold(0.0, f64::max)
            / scale;
        let primal_infeasibility = n.iter().map(|&x| (-x).max(0.0)).fold(0.0, f64::max);
        KktReport {
            stationarity,
            dual_infeasibility,
            complementarity,
            primal_infeasibility,
        }
    }
}

/// `|K n - r|^2`
pub fn weighted_residual(k: &DMatrix<f64>, n: &DVector<f64>, r: &DVector<f64>) -> f64 {
    (k * n - r).norm_squared()
}

/// Global minimizer of the constrained Tikhonov functional.
pub fn solve_constrained_tikhonov(problem: &WeightedProblem) -> Result<QpSolution> {
    problem.solve()
}

/// `argmin |K n - r|^2` subject to `n >= 0`.
pub fn solve_nnls(k: &DMatrix<f64>, r: &DVector<f64>) -> Result<QpSolution> {
    WeightedProblem::nnls(k.clone(), r.clone())?.solve()
}

/// Finds `gamma` such that the constrained solution has residual `target_sq`.
///
/// The admissible targets are `(|K n_0 - r|^2, |r|^2)` where `n_0` is the
/// NNLS solution; the residual increases strictly with `gamma` in between.
pub fn solve_discrepancy(
    k: &DMatrix<f64>,
    r: &DVector<f64>,
    reg: &DMatrix<f64>,
    target_sq: f64,
    gamma_max: f64,
) -> Result<(f64, QpSolution)> {
    let problem = WeightedProblem::new(k.clone(), r.clone(), reg.clone(), 0.0)?;
    discrepancy_for(&problem, target_sq, gamma_max)
}

/// [`solve_discrepancy`] on an already-factored problem.
pub fn discrepancy_for(
    problem: &WeightedProblem,
    target_sq: f64,
    gamma_max: f64,
) -> Result<(f64, QpSolution)> {
    let lower = problem.solve_at(0.0)?.residual_sq;
    let upper = problem.data_norm_sq();
    if !(target_sq > lower && target_sq < upper) {
        return Err(Error::TargetOutOfRange {
            target: target_sq,
            lower,
            upper,
        });
    }
    match_residual(|g| {
        let s = problem.solve_at(g)?;
        Ok((s.residual_sq, s))
    }, target_sq, gamma_max)
}

/// Unconstrained generalized ridge solution `argmin |K n - r|^2 + gamma n^T R n`
/// given the factor `U` of `R`.
pub fn solve_ridge(
    k: &DMatrix<f64>,
    r: &DVector<f64>,
    factor: &DMatrix<f64>,
    gamma: f64,
) -> Result<DVector<f64>> {
    let m = k.nrows();
    let n = k.ncols();
    if gamma > 0.0 {
        let mut a = DMatrix::zeros(m + n, n);
        a.rows_mut(0, m).copy_from(k);
        a.rows_mut(m, n).copy_from(&(factor * gamma.sqrt()));
        let mut b = DVector::zeros(m + n);
        b.rows_mut(0, m).copy_from(r);
        least_squares(&a, &b)
    } else {
        least_squares(k, r)
    }
}

/// Discrepancy search for the unconstrained ridge problem.
pub fn ridge_discrepancy(
    k: &DMatrix<f64>,
    r: &DVector<f64>,
    factor: &DMatrix<f64>,
    target_sq: f64,
    gamma_max: f64,
) -> Result<(f64, DVector<f64>)> {
    let ls = least_squares(k, r)?;
    let lower = weighted_residual(k, &ls, r);
    let upper = r.norm_squared();
    if !(target_sq > lower && target_sq < upper) {
        return Err(Error::TargetOutOfRange {
            target: target_sq,
            lower,
            upper,
        });
    }
    match_residual(|g| {
        let n = solve_ridge(k, r, factor, g)?;
        Ok((weighted_residual(k, &n, r), n))
    }, target_sq, gamma_max)
}

/// Log-scale bracketing and bisection on a residual that grows with gamma.
fn match_residual<S, F>(mut eval: F, target: f64, gamma_max: f64) -> Result<(f64, S)>
where
    F: FnMut(f64) -> Result<(f64, S)>,
{
    let tol = DISCREPANCY_RTOL * target;
    let mut hi = gamma_max.max(GAMMA_MIN * 10.0);
    let (mut hi_res, mut hi_sol) = eval(hi)?;
    while hi_res < target - tol && hi < GAMMA_CEILING {
        hi = (hi * 10.0).min(GAMMA_CEILING);
        (hi_res, hi_sol) = eval(hi)?;
    }
    if (hi_res - target).abs() <= tol {
        return Ok((hi, hi_sol));
    }
    if hi_res < target {
        return Err(Error::BracketFailure {
            gamma_max: hi,
            target,
        });
    }
    // the NNLS residual can sit arbitrarily close to the target, so the
    // lower bracket may need to go below GAMMA_MIN
    let mut lo = GAMMA_MIN;
    let (mut lo_res, mut lo_sol) = eval(lo)?;
    while lo_res > target + tol && lo > 1e-30 {
        lo *= 1e-3;
        (lo_res, lo_sol) = eval(lo)?;
    }
    if (lo_res - target).abs() <= tol {
        return Ok((lo, lo_sol));
    }
    if lo_res > target {
        return Err(Error::TargetOutOfRange {
            target,
            lower: lo_res,
            upper: hi_res,
        });
    }
    let (mut log_lo, mut log_hi) = (lo.log10(), hi.log10());
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (log_lo + log_hi);
        let g = 10f64.powf(mid);
        let (res, sol) = eval(g)?;
        if (res - target).abs() <= tol {
            return Ok((g, sol));
        }
        if res < target {
            log_lo = mid;
        } else {
            log_hi = mid;
        }
        if log_hi - log_lo < 1e-15 {
            break;
        }
    }
    Err(Error::MaxIterations(MAX_BISECTIONS))
}

/// Least-squares solution by Householder QR; falls back to SVD when the
/// triangular factor is numerically singular.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.ncols();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    if a.nrows() >= n {
        let qr = a.clone().qr();
        let r = qr.r();
        let dmax = r.diagonal().amax();
        let dmin = r.diagonal().iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min);
        if dmax > 0.0 && dmin > 1e-13 * dmax {
            let qtb = qr.q().tr_mul(b);
            if let Some(x) = r.solve_upper_triangular(&qtb) {
                if x.iter().all(|v| v.is_finite()) {
                    return Ok(x);
                }
            }
        }
    }
    let svd = a.clone().svd(true, true);
    let eps = 1e-14 * svd.singular_values.amax();
    svd.solve(b, eps)
        .map_err(|e| Error::DimensionError(e.to_string()))
}

/// Lawson-Hanson active-set NNLS: `argmin |A x - b|` subject to `x >= 0`.
///
/// Entering variables are chosen by largest gradient component, lowest index
/// on ties; `max_outer` bounds the number of variables that can enter.
pub fn lawson_hanson(a: &DMatrix<f64>, b: &DVector<f64>, max_outer: usize) -> Result<DVector<f64>> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    if n == 0 {
        return Ok(x);
    }
    let atb = a.tr_mul(b);
    let tol = 1e-13 * a.norm() * b.norm().max(f64::MIN_POSITIVE);
    let mut passive = vec![false; n];
    let mut blocked = vec![false; n];
    let mut w = atb.clone();
    let mut outer = 0;

    loop {
        // entering variable: largest gradient component, lowest index on ties
        let mut enter = None;
        let mut best = tol;
        for j in 0..n {
            if !passive[j] && !blocked[j] && w[j] > best {
                best = w[j];
                enter = Some(j);
            }
        }
        let Some(j) = enter else { break };
        outer += 1;
        if outer > max_outer {
            return Err(Error::MaxIterations(max_outer));
        }
        passive[j] = true;

        let mut first = true;
        let mut moved = false;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            if idx.is_empty() {
                break;
            }
            let z_p = least_squares(&a.select_columns(&idx), b)?;
            if z_p.iter().all(|&v| v > 0.0) {
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = z_p[k];
                }
                moved = true;
                break;
            }
            let z_of = |i: usize| z_p[idx.iter().position(|&p| p == i).unwrap()];
            if first && z_of(j) <= 0.0 {
                // round-off made the entering gradient look positive
                passive[j] = false;
                blocked[j] = true;
                break;
            }
            first = false;
            let mut alpha = 1.0_f64;
            for (k, &i) in idx.iter().enumerate() {
                if z_p[k] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - z_p[k]));
                }
            }
            let xmax = idx.iter().map(|&i| x[i].abs()).fold(0.0, f64::max);
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (z_p[k] - x[i]);
                if x[i] <= 1e-15 * xmax || (z_p[k] <= 0.0 && x[i] <= 0.0) {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            moved = true;
        }
        if moved {
            blocked.iter_mut().for_each(|bl| *bl = false);
        }
        w = &atb - a.tr_mul(&(a * &x));
    }
    Ok(x)
}
