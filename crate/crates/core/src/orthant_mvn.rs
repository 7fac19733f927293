//! Gaussian integrals over the nonnegative orthant.
//!
//! Orthant probabilities use Genz's sequential conditioning: with
//! `Cov = T T^T`, `T` upper triangular, the constraint `T y >= a` is resolved
//! one coordinate at a time, mapping the region onto the unit cube. The cube
//! is sampled with randomly shifted Richtmyer lattices (square roots of
//! primes as generators, periodized by the tent transform). Independent
//! shifts give the error estimate. Everything is accumulated in log space.
//!
//! Variables are ordered so that the least likely one is conditioned first,
//! and every conditional normal is shifted by the minimax exponential tilt.
//! Without the tilt, masses far in the tail (typical for evidence integrals)
//! are dominated by a handful of samples.

use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// Number of independent random shifts per estimate.
pub const SHIFTS: usize = 10;
/// Default number of integrand evaluations per integral.
pub const DEFAULT_SAMPLES: usize = 50_000;
/// Smallest accepted sample budget.
pub const MIN_SAMPLES: usize = 1_000;

/// `exp(-1/2 (n^T H n - 2 n^T v + q))`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub h: DMatrix<f64>,
    pub v: DVector<f64>,
    pub q: f64,
}

impl QuadraticForm {
    pub fn new(h: DMatrix<f64>, v: DVector<f64>, q: f64) -> Result<Self> {
        if !h.is_square() || h.nrows() != v.len() {
            return Err(Error::DimensionError(format!(
                "quadratic form {}x{} with linear term of length {}",
                h.nrows(),
                h.ncols(),
                v.len()
            )));
        }
        Ok(Self { h, v, q })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// Monte Carlo estimate carried as a logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegralEstimate {
    pub log_value: f64,
    /// standard error divided by the estimate
    pub relative_error: f64,
    pub samples: usize,
}

impl IntegralEstimate {
    pub fn value(&self) -> f64 {
        self.log_value.exp()
    }

    pub fn std_error(&self) -> f64 {
        self.relative_error * self.value()
    }

    fn exact(log_value: f64) -> Self {
        Self {
            log_value,
            relative_error: 0.0,
            samples: 0,
        }
    }

    fn shifted(self, log_factor: f64) -> Self {
        Self {
            log_value: self.log_value + log_factor,
            ..self
        }
    }
}

/// Sample budget and seed for one integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub samples: usize,
    pub seed: u64,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0x5eed,
        }
    }
}

impl MonteCarlo {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self { samples, seed }
    }

    /// Derived stream for the `k`-th integral of a batch.
    pub fn stream(&self, k: u64) -> Self {
        Self {
            samples: self.samples,
            seed: splitmix(self.seed ^ splitmix(k.wrapping_add(1))),
        }
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `log Phi(-x)`, the log of the upper normal tail, accurate for all `x`.
pub fn log_upper_tail(x: f64) -> f64 {
    if x < 35.0 {
        (0.5 * erfc(x / std::f64::consts::SQRT_2)).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2);
        -0.5 * x2 - x.ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    }
}

fn upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// `x` with `log Phi(-x) = log_p`, for `log_p < ln 1/2`.
fn inverse_log_upper_tail(log_p: f64) -> f64 {
    if log_p > -700.0 {
        return std::f64::consts::SQRT_2 * erfc_inv(2.0 * log_p.exp());
    }
    // Newton on the asymptotic branch
    let mut x = (-2.0 * log_p).sqrt();
    for _ in 0..50 {
        let f = log_upper_tail(x) - log_p;
        // d/dx log Phi(-x) = -phi(x) / Phi(-x)
        let log_phi = -0.5 * x * x - 0.5 * (2.0 * PI).ln();
        let slope = -(log_phi - log_upper_tail(x)).exp();
        let step = f / slope;
        x -= step;
        if step.abs() <= 1e-14 * x.abs() {
            break;
        }
    }
    x
}

/// Draws `y >= lower` by inverse CDF from uniform `u`; returns `y` and the
/// log mass `log P(Y >= lower)`.
fn truncated_draw(lower: f64, u: f64) -> (f64, f64) {
    let log_mass = log_upper_tail(lower);
    let log_target = log_mass + (-u).ln_1p();
    let y = if log_target < -LN_2 {
        inverse_log_upper_tail(log_target)
    } else {
        // Phi(y) = Phi(lower) + u * Phi(-lower)
        let s = upper_tail(-lower) + u * log_mass.exp();
        -std::f64::consts::SQRT_2 * erfc_inv(2.0 * s)
    };
    (y, log_mass)
}

fn primes(count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut candidate = 2u64;
    while out.len() < count {
        if out.iter().take_while(|&&p| p * p <= candidate).all(|&p| !candidate.is_multiple_of(p)) {
            out.push(candidate);
        }
        candidate += 1;
    }
    out
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Orthant mass with an upper-triangular covariance factor `t`
/// (`Cov = t t^T`) and lower limits `lower`. Each conditional normal is
/// shifted by `tilt[i]` and the likelihood ratio folded into the weight.
fn genz_with_factor(t: &DMatrix<f64>, lower: &DVector<f64>, tilt: &[f64], mc: MonteCarlo) -> Result<IntegralEstimate> {
    let n = lower.len();
    if mc.samples < MIN_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "at least {MIN_SAMPLES} samples required, got {}",
            mc.samples
        )));
    }
    if n == 0 {
        return Ok(IntegralEstimate::exact(0.0));
    }
    let per_shift = mc.samples.div_ceil(SHIFTS);
    let generators: Vec<f64> = primes(n).iter().map(|&p| (p as f64).sqrt().fract()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    let mut y = vec![0.0; n];
    let mut shift_logs = Vec::with_capacity(SHIFTS);
    let mut sample_logs = vec![0.0; per_shift];

    for _ in 0..SHIFTS {
        let shift: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        for (k, slot) in sample_logs.iter_mut().enumerate() {
            let kf = (k + 1) as f64;
            let mut log_f = 0.0;
            // last coordinate first: row i of t only involves y_i..y_{n-1}
            for i in (0..n).rev() {
                let frac = (kf * generators[i] + shift[i]).fract();
                let u = (1.0 - (2.0 * frac - 1.0).abs()).clamp(1e-300, 1.0 - 1e-16);
                let mut s = 0.0;
                for j in i + 1..n {
                    s += t[(i, j)] * y[j];
                }
                let mu = tilt[i];
                let (draw, log_mass) = truncated_draw((lower[i] - s) / t[(i, i)] - mu, u);
                y[i] = draw + mu;
                log_f += log_mass + mu * (0.5 * mu - y[i]);
                if log_f == f64::NEG_INFINITY {
                    break;
                }
            }
            *slot = log_f;
        }
        shift_logs.push(log_sum_exp(&sample_logs) - (per_shift as f64).ln());
    }

    let log_mean = log_sum_exp(&shift_logs) - (SHIFTS as f64).ln();
    if !log_mean.is_finite() {
        return Ok(IntegralEstimate {
            log_value: log_mean,
            relative_error: f64::INFINITY,
            samples: per_shift * SHIFTS,
        });
    }
    let ratios: Vec<f64> = shift_logs.iter().map(|l| (l - log_mean).exp()).collect();
    let var = ratios.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>() / (SHIFTS - 1) as f64;
    Ok(IntegralEstimate {
        log_value: log_mean,
        relative_error: (var / SHIFTS as f64).sqrt(),
        samples: per_shift * SHIFTS,
    })
}

/// Cholesky factor of `cov` with variables reordered so that, conditioning
/// on expected values of the earlier ones, the least probable comes first.
fn prioritized_factor(cov: &DMatrix<f64>, lower: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = lower.len();
    let mut c = cov.clone();
    let mut a = lower.clone();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut best = (i, f64::INFINITY, 0.0, 0.0);
        for j in i..n {
            let mut var = c[(j, j)];
            let mut shift = 0.0;
            for k in 0..i {
                var -= l[(j, k)] * l[(j, k)];
                shift += l[(j, k)] * y[k];
            }
            if !(var > 0.0) {
                return Err(Error::CholeskyFailure);
            }
            let sd = var.sqrt();
            let lim = (a[j] - shift) / sd;
            let log_p = log_upper_tail(lim);
            if log_p < best.1 {
                best = (j, log_p, sd, lim);
            }
        }
        let (j, log_p, sd, lim) = best;
        if j != i {
            c.swap_rows(i, j);
            c.swap_columns(i, j);
            a.swap_rows(i, j);
            l.swap_rows(i, j);
        }
        l[(i, i)] = sd;
        for m in i + 1..n {
            let mut v = c[(m, i)];
            for k in 0..i {
                v -= l[(m, k)] * l[(i, k)];
            }
            l[(m, i)] = v / sd;
        }
        // mean of a standard normal truncated to [lim, inf)
        y[i] = (-0.5 * lim * lim - 0.5 * (2.0 * PI).ln() - log_p).exp();
    }
    Ok((l, a))
}

/// `phi(c) / Phi(-c)` and its derivative `psi (psi - c)`.
fn inverse_mills(c: f64) -> (f64, f64) {
    if c > 30.0 {
        let c2 = c * c;
        let excess = (1.0 - 2.0 / c2 + 10.0 / (c2 * c2) - 74.0 / (c2 * c2 * c2)) / c;
        return (c + excess, (c + excess) * excess);
    }
    let psi = (-0.5 * c * c - 0.5 * (2.0 * PI).ln() - log_upper_tail(c)).exp();
    (psi, psi * (psi - c))
}

/// Minimax exponential tilt for the orthant `L z >= a` (`L` lower
/// triangular): the saddle point of
/// `sum_k mu_k^2/2 - x_k mu_k + log Phi(-(a_k - sum_{j<k} L_kj x_j)/L_kk + mu_k)`.
/// Returns `None` when Newton's method does not settle.
fn minimax_tilt(l: &DMatrix<f64>, a: &DVector<f64>) -> Option<Vec<f64>> {
    let n = a.len();
    if n < 2 {
        return Some(vec![0.0; n]);
    }
    let m = n - 1;
    let diag: Vec<f64> = (0..n).map(|k| l[(k, k)]).collect();
    let off = DMatrix::from_fn(n, n, |r, c| if c < r { l[(r, c)] / diag[r] } else { 0.0 });
    let lim: Vec<f64> = (0..n).map(|k| a[k] / diag[k]).collect();

    // unknowns: x_0..x_{m-1}, mu_0..mu_{m-1}; x and mu of the last variable stay 0
    let eval = |state: &DVector<f64>| {
        let mut x = vec![0.0; n];
        let mut mu = vec![0.0; n];
        x[..m].copy_from_slice(&state.as_slice()[..m]);
        mu[..m].copy_from_slice(&state.as_slice()[m..]);
        let mut psi = vec![0.0; n];
        let mut dpsi = vec![0.0; n];
        for k in 0..n {
            let mut c = lim[k] - mu[k];
            for j in 0..k {
                c -= off[(k, j)] * x[j];
            }
            (psi[k], dpsi[k]) = inverse_mills(c);
        }
        let mut f = DVector::zeros(2 * m);
        for k in 0..m {
            f[k] = mu[k] - x[k] + psi[k];
            let mut s = -mu[k];
            for r in k + 1..n {
                s += off[(r, k)] * psi[r];
            }
            f[m + k] = s;
        }
        (f, dpsi)
    };

    let mut state = DVector::zeros(2 * m);
    let (mut f, mut dpsi) = eval(&state);
    for _ in 0..100 {
        let norm = f.norm();
        if norm < 1e-10 {
            return Some(state.as_slice()[m..].iter().copied().chain([0.0]).collect());
        }
        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for k in 0..m {
            // d/dx and d/dmu of mu_k - x_k + psi_k
            for j in 0..k {
                jac[(k, j)] = -dpsi[k] * off[(k, j)];
            }
            jac[(k, k)] = -1.0;
            jac[(k, m + k)] = 1.0 - dpsi[k];
            // d/dx and d/dmu of -mu_k + sum_{r>k} off_rk psi_r
            for i in 0..m {
                let mut v = 0.0;
                for r in (k.max(i) + 1)..n {
                    v -= off[(r, k)] * dpsi[r] * off[(r, i)];
                }
                jac[(m + k, i)] = v;
            }
            jac[(m + k, m + k)] = -1.0;
            for i in k + 1..m {
                jac[(m + k, m + i)] = -off[(i, k)] * dpsi[i];
            }
        }
        let step = jac.lu().solve(&(-&f))?;
        let mut scale = 1.0;
        loop {
            let trial = &state + &step * scale;
            let (ft, dt) = eval(&trial);
            if ft.iter().all(|v| v.is_finite()) && ft.norm() < norm {
                state = trial;
                f = ft;
                dpsi = dt;
                break;
            }
            scale *= 0.5;
            if scale < 1e-10 {
                return None;
            }
        }
    }
    None
}

/// Orthant mass for covariance `t t^T`: prioritized ordering, then tilted
/// sequential sampling.
fn prioritized_mass(t: &DMatrix<f64>, lower: &DVector<f64>, mc: MonteCarlo) -> Result<IntegralEstimate> {
    let n = lower.len();
    let cov = t * t.transpose();
    let (l, a) = prioritized_factor(&cov, lower)?;
    let tilt = minimax_tilt(&l, &a).unwrap_or_else(|| vec![0.0; n]);
    // reversed order: genz_with_factor runs from the last row up
    let t = DMatrix::from_fn(n, n, |r, c| l[(n - 1 - r, n - 1 - c)]);
    let a = DVector::from_fn(n, |r, _| a[n - 1 - r]);
    let tilt: Vec<f64> = tilt.into_iter().rev().collect();
    genz_with_factor(&t, &a, &tilt, mc)
}

/// Upper Cholesky factor `U` (`H = U^T U`).
fn upper_factor(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = h.clone().cholesky().ok_or(Error::CholeskyFailure)?;
    Ok(chol.l().transpose())
}

/// `P(z >= lower_shift)` for `z ~ N(0, H^{-1})`.
pub fn genz_orthant_probability(
    h: &DMatrix<f64>,
    lower_shift: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> Result<IntegralEstimate> {
    if !h.is_square() || h.nrows() != lower_shift.len() {
        return Err(Error::DimensionError("precision matrix and limits disagree".into()));
    }
    let u = upper_factor(h)?;
    let t = inverse_upper(&u)?;
    prioritized_mass(&t, lower_shift, MonteCarlo::new(samples, seed))
}

fn inverse_upper(u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = u.nrows();
    u.solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::CholeskyFailure)
}

/// Pieces of the completed square `n^T H n - 2 n^T v + q = (n - m)^T H (n - m) + c`.
struct CompletedSquare {
    mean: DVector<f64>,
    constant: f64,
    log_det_h: f64,
    factor: DMatrix<f64>,
}

fn complete_square(form: &QuadraticForm) -> Result<CompletedSquare> {
    let chol = form.h.clone().cholesky().ok_or(Error::CholeskyFailure)?;
    let mean = chol.solve(&form.v);
    let log_det_h = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let constant = form.q - form.v.dot(&mean);
    Ok(CompletedSquare {
        mean,
        constant,
        log_det_h,
        factor: chol.l().transpose(),
    })
}

/// `int_{[0,inf)^N} exp(-1/2 (n^T H n - 2 n^T v + q)) dn`.
pub fn orthant_integral(form: &QuadraticForm, samples: usize, seed: u64) -> Result<IntegralEstimate> {
    let sq = complete_square(form)?;
    let n = form.dim() as f64;
    let log_prefactor = -0.5 * sq.constant - 0.5 * sq.log_det_h + 0.5 * n * (2.0 * PI).ln();
    let t = inverse_upper(&sq.factor)?;
    let prob = prioritized_mass(&t, &(-&sq.mean), MonteCarlo::new(samples, seed))?;
    Ok(prob.shifted(log_prefactor))
}

/// The same integral over all of `R^N` (closed form).
pub fn full_space_integral(form: &QuadraticForm) -> Result<IntegralEstimate> {
    let sq = complete_square(form)?;
    let n = form.dim() as f64;
    Ok(IntegralEstimate::exact(
        -0.5 * sq.constant - 0.5 * sq.log_det_h + 0.5 * n * (2.0 * PI).ln(),
    ))
}
