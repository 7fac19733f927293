//! Model generation over the discretization ladder and discrepancy grid,
//! Bayesian ranking by marginal likelihood, and the comparison methods.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::discretization::{BasisWeights, KernelMatrix};
use crate::error::{Error, Result};
use crate::orthant_mvn::{full_space_integral, orthant_integral, MonteCarlo, QuadraticForm};
use crate::tikhonov_qp::{
    cholesky_upper, discrepancy_for, least_squares, ridge_discrepancy, weighted_residual, WeightedProblem,
    DEFAULT_GAMMA_MAX,
};

/// Discrepancy factors 0.6, 0.7, ..., 1.7.
pub fn default_tau_grid() -> Vec<f64> {
    (6..=17).map(|k| k as f64 / 10.0).collect()
}

/// Collocation sizes 3..=50.
pub fn default_ladder() -> Vec<usize> {
    (3..=50).collect()
}

pub const DEFAULT_MAX_DISC: usize = 3;
pub const MOROZOV_TAU: f64 = 1.1;
pub const LOW_NOISE_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    Tikhonov,
    #[serde(rename = "firstdiff")]
    FirstDiff,
    Twomey,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 3] = [Self::Tikhonov, Self::FirstDiff, Self::Twomey];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Tikhonov => "tikhonov",
            Self::FirstDiff => "firstdiff",
            Self::Twomey => "twomey",
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "tikhonov" | "identity" => Ok(Self::Tikhonov),
            "firstdiff" | "firstdifference" => Ok(Self::FirstDiff),
            "twomey" => Ok(Self::Twomey),
            _ => Err(Error::InvalidParameter(format!(
                "unknown regularizer '{s}' (expected tikhonov, firstdiff or twomey)"
            ))),
        }
    }
}

/// Penalty matrix `R = U^T U` with its upper Cholesky factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub matrix: DMatrix<f64>,
    pub factor: DMatrix<f64>,
}

impl Regularizer {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn is_diagonal(&self) -> bool {
        self.matrix
            .iter()
            .enumerate()
            .all(|(idx, v)| idx % (self.dim() + 1) == 0 || *v == 0.0)
    }
}

pub fn build_regularizer(kind: RegularizerKind, n: usize) -> Result<Regularizer> {
    if n == 0 {
        return Err(Error::InvalidParameter("regularizer dimension must be positive".into()));
    }
    let matrix = match kind {
        RegularizerKind::Tikhonov => DMatrix::identity(n, n),
        RegularizerKind::FirstDiff => {
            // (n+1) x n, zero values beyond both ends
            let mut h = DMatrix::zeros(n + 1, n);
            for j in 0..n {
                h[(j, j)] = 1.0;
                h[(j + 1, j)] = -1.0;
            }
            h.tr_mul(&h)
        }
        RegularizerKind::Twomey => {
            let mut h = DMatrix::zeros(n, n);
            for j in 0..n {
                h[(j, j)] = 2.0;
                if j + 1 < n {
                    h[(j, j + 1)] = -1.0;
                    h[(j + 1, j)] = -1.0;
                }
            }
            h.tr_mul(&h)
        }
    };
    let factor = cholesky_upper(&matrix)?;
    Ok(Regularizer { kind, matrix, factor })
}

/// Sample means and variances of repeated extinction measurements.
///
/// `variance` is the spread of a single measurement; the mean over
/// `repeats` measurements has variance `variance / repeats`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub wavelengths: Vec<f64>,
    pub mean_extinction: Vec<f64>,
    pub variance: Vec<f64>,
    pub repeats: usize,
}

impl Measurement {
    pub fn new(wavelengths: Vec<f64>, mean_extinction: Vec<f64>, variance: Vec<f64>, repeats: usize) -> Result<Self> {
        let n = wavelengths.len();
        if n == 0 || mean_extinction.len() != n || variance.len() != n {
            return Err(Error::DimensionError(format!(
                "{} wavelengths, {} means, {} variances",
                n,
                mean_extinction.len(),
                variance.len()
            )));
        }
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("variance {v} is not positive")));
        }
        if mean_extinction.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidParameter("non-finite extinction".into()));
        }
        Ok(Self {
            wavelengths,
            mean_extinction,
            variance,
            repeats,
        })
    }

    /// Per-wavelength sample mean and unbiased sample variance of `draws`
    /// (one inner vector per repeat). Variances are floored at `floor`.
    pub fn from_draws(wavelengths: Vec<f64>, draws: &[Vec<f64>], floor: f64) -> Result<Self> {
        let m = draws.len();
        if m < 2 {
            return Err(Error::InvalidParameter("at least two repeats are needed".into()));
        }
        let n = wavelengths.len();
        let mut mean = vec![0.0; n];
        for d in draws {
            if d.len() != n {
                return Err(Error::DimensionError("draw length differs from wavelength count".into()));
            }
            for (acc, x) in mean.iter_mut().zip(d) {
                *acc += x;
            }
        }
        mean.iter_mut().for_each(|x| *x /= m as f64);
        let mut var = vec![0.0; n];
        for d in draws {
            for i in 0..n {
                var[i] += (d[i] - mean[i]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v = (*v / (m - 1) as f64).max(floor));
        Self::new(wavelengths, mean, var, m)
    }

    pub fn len(&self) -> usize {
        self.wavelengths.len()
    }

    /// Variance of each mean extinction, `variance / repeats`.
    pub fn mean_variance(&self) -> impl Iterator<Item = f64> + '_ {
        let m = self.repeats.max(1) as f64;
        self.variance.iter().map(move |v| v / m)
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths.is_empty()
    }
}

/// Noise of the mean extinctions: `delta_sq` is the largest per-wavelength
/// variance of the mean and `Sigma = diag(variance of the mean) / delta_sq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseScaling {
    pub delta_sq: f64,
    pub sigma_normalized: Vec<f64>,
}

impl NoiseScaling {
    pub fn from_measurement(meas: &Measurement) -> Self {
        let mean_var: Vec<f64> = meas.mean_variance().collect();
        let delta_sq = mean_var.iter().copied().fold(0.0, f64::max);
        Self {
            delta_sq,
            sigma_normalized: mean_var.iter().map(|v| v / delta_sq).collect(),
        }
    }

    /// `Sigma^{-1/2} K`
    pub fn weight_kernel(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = k.clone();
        for (i, s) in self.sigma_normalized.iter().enumerate() {
            out.row_mut(i).scale_mut(1.0 / s.sqrt());
        }
        out
    }

    /// `Sigma^{-1/2} e`
    pub fn weight_data(&self, e: &[f64]) -> DVector<f64> {
        DVector::from_iterator(e.len(), e.iter().zip(&self.sigma_normalized).map(|(x, s)| x / s.sqrt()))
    }

    /// `tau N_l delta^2`
    pub fn target(&self, tau: f64) -> f64 {
        tau * self.sigma_normalized.len() as f64 * self.delta_sq
    }

    /// `ln det Sigma_sigma` with `Sigma_sigma = delta^2 Sigma`.
    pub fn log_det_covariance(&self) -> f64 {
        self.sigma_normalized.iter().map(|s| (s * self.delta_sq).ln()).sum()
    }
}

/// One reconstruction proposed by the model generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCandidate {
    pub weights: BasisWeights,
    pub kernel: KernelMatrix,
    pub regularizer: Regularizer,
    pub gamma: f64,
    pub tau: f64,
    pub residual_sq: f64,
    pub log_marginal: f64,
    pub log_marginal_error: f64,
    pub posterior: f64,
    pub fraction: Option<f64>,
}

impl ModelCandidate {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Candidates produced at one discretization level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub n_col: usize,
    pub nnls_residual: f64,
    pub data_norm_sq: f64,
    pub candidates: Vec<ModelCandidate>,
}

/// The applicability predicate for one discrepancy factor.
pub fn is_applicable(lower_residual: f64, target: f64, data_norm_sq: f64) -> bool {
    lower_residual < target && target < data_norm_sq
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Solver {
    Constrained,
    Ridge,
}

/// Model generation: walks the ladder coarse to fine, keeps every
/// `(level, tau)` whose target residual lies strictly between the NNLS
/// residual and `|Sigma^{-1/2} e|^2`, and stops after `max_disc` nonempty
/// levels.
pub fn generate_models<F>(
    meas: &Measurement,
    ladder: &[usize],
    tau_grid: &[f64],
    reg_kind: RegularizerKind,
    max_disc: usize,
    kernel_builder: F,
) -> Result<Vec<CandidateSet>>
where
    F: FnMut(usize) -> Result<KernelMatrix>,
{
    generate_with(meas, ladder, tau_grid, reg_kind, max_disc, kernel_builder, Solver::Constrained)
}

fn check_grids(ladder: &[usize], tau_grid: &[f64], max_disc: usize) -> Result<()> {
    if max_disc == 0 {
        return Err(Error::InvalidParameter("max_disc must be at least 1".into()));
    }
    if tau_grid.is_empty() || tau_grid.windows(2).any(|w| w[0] >= w[1]) || tau_grid[0] <= 0.0 {
        return Err(Error::InvalidParameter("tau grid must be positive and ascending".into()));
    }
    if ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("ladder must be ascending".into()));
    }
    Ok(())
}

fn generate_with<F>(
    meas: &Measurement,
    ladder: &[usize],
    tau_grid: &[f64],
    reg_kind: RegularizerKind,
    max_disc: usize,
    mut kernel_builder: F,
    solver: Solver,
) -> Result<Vec<CandidateSet>>
where
    F: FnMut(usize) -> Result<KernelMatrix>,
{
    check_grids(ladder, tau_grid, max_disc)?;
    let scaling = NoiseScaling::from_measurement(meas);
    let data = scaling.weight_data(&meas.mean_extinction);
    let data_norm_sq = data.norm_squared();
    let mut sets = Vec::new();
    for &n_col in ladder {
        if n_col - 2 > meas.len() {
            break;
        }
        let kernel = kernel_builder(n_col)?;
        if let Some(set) = level_candidates(&kernel, &data, &scaling, tau_grid, reg_kind, solver)? {
            sets.push(CandidateSet { data_norm_sq, ..set });
            if sets.len() == max_disc {
                break;
            }
        }
    }
    if sets.is_empty() {
        return Err(Error::NoModels);
    }
    Ok(sets)
}

/// Candidates at a single level; `None` when no discrepancy factor applies.
pub(crate) fn level_candidates(
    kernel: &KernelMatrix,
    data: &DVector<f64>,
    scaling: &NoiseScaling,
    tau_grid: &[f64],
    reg_kind: RegularizerKind,
    solver: Solver,
) -> Result<Option<CandidateSet>> {
    let kw = scaling.weight_kernel(kernel.entries());
    let reg = build_regularizer(reg_kind, kernel.interior_dim())?;
    let problem = WeightedProblem::with_factor(kw.clone(), data.clone(), reg.matrix.clone(), reg.factor.clone(), 0.0)?;
    let lower = match solver {
        Solver::Constrained => problem.solve_at(0.0)?.residual_sq,
        Solver::Ridge => weighted_residual(&kw, &least_squares(&kw, data)?, data),
    };
    let data_norm_sq = data.norm_squared();
    let mut candidates = Vec::new();
    for &tau in tau_grid {
        let target = scaling.target(tau);
        if !is_applicable(lower, target, data_norm_sq) {
            continue;
        }
        let (gamma, weights, residual_sq) = match solver {
            Solver::Constrained => {
                let (g, sol) = discrepancy_for(&problem, target, DEFAULT_GAMMA_MAX)?;
                (g, sol.weights, sol.residual_sq)
            }
            Solver::Ridge => {
                let (g, n) = ridge_discrepancy(&kw, data, &reg.factor, target, DEFAULT_GAMMA_MAX)?;
                let res = weighted_residual(&kw, &n, data);
                (g, BasisWeights::new(n), res)
            }
        };
        candidates.push(ModelCandidate {
            weights,
            kernel: kernel.clone(),
            regularizer: reg.clone(),
            gamma,
            tau,
            residual_sq,
            log_marginal: f64::NAN,
            log_marginal_error: f64::NAN,
            posterior: f64::NAN,
            fraction: kernel.fraction(),
        });
    }
    if candidates.is_empty() {
        return Ok(None);
    }
    Ok(Some(CandidateSet {
        n_col: kernel.collocation().len(),
        nnls_residual: lower,
        data_norm_sq,
        candidates,
    }))
}

/// Quadratic forms of the joint density and of the prior, both over the
/// unnormalized covariance `Sigma_sigma`.
fn evidence_forms(candidate: &ModelCandidate, meas: &Measurement, scaling: &NoiseScaling) -> Result<(QuadraticForm, QuadraticForm)> {
    let ks = scaling.weight_kernel(candidate.kernel.entries()) / scaling.delta_sq.sqrt();
    let es = scaling.weight_data(&meas.mean_extinction) / scaling.delta_sq.sqrt();
    let prior = &candidate.regularizer.matrix * (candidate.gamma / scaling.delta_sq);
    let n = ks.ncols();
    let joint = QuadraticForm::new(ks.tr_mul(&ks) + &prior, ks.tr_mul(&es), es.norm_squared())?;
    let prior = QuadraticForm::new(prior, DVector::zeros(n), 0.0)?;
    Ok((joint, prior))
}

fn log_likelihood_normalizer(scaling: &NoiseScaling) -> f64 {
    0.5 * scaling.sigma_normalized.len() as f64 * (2.0 * PI).ln() + 0.5 * scaling.log_det_covariance()
}

/// Log prior normalizer over the orthant; closed form for diagonal penalties.
fn log_prior_normalizer(candidate: &ModelCandidate, prior: &QuadraticForm, mc: MonteCarlo) -> Result<(f64, f64)> {
    if candidate.regularizer.is_diagonal() {
        let v = prior.h.diagonal().iter().map(|d| 0.5 * (PI / (2.0 * d)).ln()).sum();
        return Ok((v, 0.0));
    }
    let c = orthant_integral(prior, mc.samples, mc.seed)?;
    Ok((c.log_value, c.relative_error))
}

/// `log p(e | N, gamma)` with the prior restricted to the nonnegative orthant.
/// Returns the value and its relative Monte Carlo error.
pub fn log_marginal_likelihood(
    candidate: &ModelCandidate,
    meas: &Measurement,
    scaling: &NoiseScaling,
    mc: MonteCarlo,
) -> Result<(f64, f64)> {
    let (joint, prior) = evidence_forms(candidate, meas, scaling)?;
    let m = orthant_integral(&joint, mc.samples, mc.seed)?;
    let (log_c, c_err) = log_prior_normalizer(candidate, &prior, mc)?;
    Ok((
        m.log_value - log_likelihood_normalizer(scaling) - log_c,
        m.relative_error.hypot(c_err),
    ))
}

/// The same evidence without the sign constraint, in closed form.
pub fn log_marginal_likelihood_unconstrained(
    candidate: &ModelCandidate,
    meas: &Measurement,
    scaling: &NoiseScaling,
) -> Result<f64> {
    let (joint, prior) = evidence_forms(candidate, meas, scaling)?;
    let m = full_space_integral(&joint)?;
    let c = full_space_integral(&prior)?;
    Ok(m.log_value - log_likelihood_normalizer(scaling) - c.log_value)
}

/// Descending by log-marginal; ties prefer smaller dimension, then smaller tau.
fn rank_order(a: &ModelCandidate, b: &ModelCandidate) -> Ordering {
    b.log_marginal
        .partial_cmp(&a.log_marginal)
        .unwrap_or(Ordering::Equal)
        .then(a.dim().cmp(&b.dim()))
        .then(a.tau.partial_cmp(&b.tau).unwrap_or(Ordering::Equal))
}

/// Softmax of the log-marginals under a uniform model prior, then sort.
pub fn assign_posteriors(mut candidates: Vec<ModelCandidate>) -> Result<Vec<ModelCandidate>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let max = candidates.iter().map(|c| c.log_marginal).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates.iter().map(|c| (c.log_marginal - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for (c, w) in candidates.iter_mut().zip(&weights) {
        c.posterior = w / total;
    }
    candidates.sort_by(rank_order);
    Ok(candidates)
}

/// Evidence for every candidate, then posterior ranking.
pub fn select_models(
    candidates: Vec<ModelCandidate>,
    meas: &Measurement,
    scaling: &NoiseScaling,
    mc: MonteCarlo,
) -> Result<Vec<ModelCandidate>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for mut c in candidates {
        let (lm, err) = log_marginal_likelihood(&c, meas, scaling, mc)?;
        c.log_marginal = lm;
        c.log_marginal_error = err;
        scored.push(c);
    }
    assign_posteriors(scored)
}

/// Ridge candidates ranked by closed-form evidence.
pub fn invert_unconstrained<F>(
    meas: &Measurement,
    ladder: &[usize],
    tau_grid: &[f64],
    reg_kind: RegularizerKind,
    max_disc: usize,
    kernel_builder: F,
) -> Result<Vec<ModelCandidate>>
where
    F: FnMut(usize) -> Result<KernelMatrix>,
{
    let sets = generate_with(meas, ladder, tau_grid, reg_kind, max_disc, kernel_builder, Solver::Ridge)?;
    let scaling = NoiseScaling::from_measurement(meas);
    let mut scored = Vec::new();
    for mut c in sets.into_iter().flat_map(|s| s.candidates) {
        c.log_marginal = log_marginal_likelihood_unconstrained(&c, meas, &scaling)?;
        c.log_marginal_error = 0.0;
        scored.push(c);
    }
    assign_posteriors(scored)
}

/// Maximum-likelihood model scored by the Bayesian information criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicChoice {
    pub weights: BasisWeights,
    pub kernel: KernelMatrix,
    pub score: f64,
    pub scores: Vec<(usize, f64)>,
}

/// `-2 log L(n_ml) + N ln N_l` for one level.
pub fn bic_score(kernel: &KernelMatrix, weights: &DVector<f64>, meas: &Measurement, scaling: &NoiseScaling) -> f64 {
    let kw = scaling.weight_kernel(kernel.entries());
    let ew = scaling.weight_data(&meas.mean_extinction);
    let chi_sq = weighted_residual(&kw, weights, &ew) / scaling.delta_sq;
    let nl = meas.len() as f64;
    let loglik = -0.5 * nl * (2.0 * PI).ln() - 0.5 * scaling.log_det_covariance() - 0.5 * chi_sq;
    -2.0 * loglik + weights.len() as f64 * nl.ln()
}

/// BIC over the three coarsest levels at which some discrepancy factor
/// applies to the unconstrained problem; the least-squares fit is scored at
/// each.
pub fn bic_select<F>(
    meas: &Measurement,
    ladder: &[usize],
    tau_grid: &[f64],
    mut kernel_builder: F,
) -> Result<BicChoice>
where
    F: FnMut(usize) -> Result<KernelMatrix>,
{
    check_grids(ladder, tau_grid, 1)?;
    let scaling = NoiseScaling::from_measurement(meas);
    let data = scaling.weight_data(&meas.mean_extinction);
    let data_norm_sq = data.norm_squared();
    let mut best: Option<BicChoice> = None;
    let mut scores = Vec::new();
    for &n_col in ladder {
        if n_col - 2 > meas.len() || scores.len() == DEFAULT_MAX_DISC {
            break;
        }
        let kernel = kernel_builder(n_col)?;
        let kw = scaling.weight_kernel(kernel.entries());
        let n_ml = least_squares(&kw, &data)?;
        let lower = weighted_residual(&kw, &n_ml, &data);
        if !tau_grid.iter().any(|&t| is_applicable(lower, scaling.target(t), data_norm_sq)) {
            continue;
        }
        let score = bic_score(&kernel, &n_ml, meas, &scaling);
        scores.push((n_col, score));
        // strict comparison keeps the smaller model on ties
        if best.as_ref().is_none_or(|b| score < b.score) {
            best = Some(BicChoice {
                weights: BasisWeights::new(n_ml),
                kernel,
                score,
                scores: Vec::new(),
            });
        }
    }
    let mut choice = best.ok_or(Error::NoModels)?;
    choice.scores = scores;
    Ok(choice)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Constrained,
    Morozov,
    Unconstrained,
    Bic,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::Constrained, Self::Morozov, Self::Unconstrained, Self::Bic];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Constrained => "constrained",
            Self::Morozov => "morozov",
            Self::Unconstrained => "unconstrained",
            Self::Bic => "bic",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constrained" => Ok(Self::Constrained),
            "morozov" => Ok(Self::Morozov),
            "unconstrained" => Ok(Self::Unconstrained),
            "bic" => Ok(Self::Bic),
            _ => Err(Error::InvalidParameter(format!(
                "unknown method '{s}' (expected constrained, morozov, unconstrained or bic)"
            ))),
        }
    }
}

/// Knobs shared by all inversion methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSettings {
    pub ladder: Vec<usize>,
    pub tau_grid: Vec<f64>,
    pub reg_kind: RegularizerKind,
    pub max_disc: usize,
    pub mc: MonteCarlo,
    pub low_noise_threshold: f64,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self {
            ladder: default_ladder(),
            tau_grid: default_tau_grid(),
            reg_kind: RegularizerKind::Tikhonov,
            max_disc: DEFAULT_MAX_DISC,
            mc: MonteCarlo::default(),
            low_noise_threshold: LOW_NOISE_THRESHOLD,
        }
    }
}

/// Ranked result of one inversion; `ranked[0]` is the reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub method: Method,
    pub delta_sq: f64,
    pub ranked: Vec<ModelCandidate>,
    pub bic: Option<BicChoice>,
}

impl Inversion {
    pub fn best(&self) -> (&BasisWeights, &KernelMatrix) {
        match &self.bic {
            Some(b) => (&b.weights, &b.kernel),
            None => (&self.ranked[0].weights, &self.ranked[0].kernel),
        }
    }
}

fn single(mut c: ModelCandidate) -> Vec<ModelCandidate> {
    c.posterior = 1.0;
    vec![c]
}

/// Runs one of the four inversion methods.
pub fn invert<F>(meas: &Measurement, settings: &InversionSettings, method: Method, kernel_builder: F) -> Result<Inversion>
where
    F: FnMut(usize) -> Result<KernelMatrix>,
{
    let scaling = NoiseScaling::from_measurement(meas);
    let mut out = Inversion {
        method,
        delta_sq: scaling.delta_sq,
        ranked: Vec::new(),
        bic: None,
    };
    let s = settings;
    let morozov = |builder: F| -> Result<Vec<ModelCandidate>> {
        let sets = generate_models(meas, &s.ladder, &[MOROZOV_TAU], s.reg_kind, 1, builder)?;
        let first = sets.into_iter().next().and_then(|set| set.candidates.into_iter().next());
        Ok(single(first.ok_or(Error::NoModels)?))
    };
    match method {
        Method::Morozov => out.ranked = morozov(kernel_builder)?,
        Method::Constrained if scaling.delta_sq < s.low_noise_threshold => out.ranked = morozov(kernel_builder)?,
        Method::Constrained => {
            let sets = generate_models(meas, &s.ladder, &s.tau_grid, s.reg_kind, s.max_disc, kernel_builder)?;
            let all: Vec<_> = sets.into_iter().flat_map(|set| set.candidates).collect();
            out.ranked = select_models(all, meas, &scaling, s.mc)?;
        }
        Method::Unconstrained => {
            out.ranked = invert_unconstrained(meas, &s.ladder, &s.tau_grid, s.reg_kind, s.max_disc, kernel_builder)?;
        }
        Method::Bic => out.bic = Some(bic_select(meas, &s.ladder, &s.tau_grid, kernel_builder)?),
    }
    Ok(out)
}
