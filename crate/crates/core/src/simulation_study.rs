//! Synthetic size distributions, forward extinction synthesis, noise
//! generation, and the comparative study harness.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discretization::{
    build_collocation_grid, evaluate_distribution, linspace, BasisWeights, KernelMatrix, KernelSamples, RadiusGrid,
};
use crate::error::{Error, Result};
use crate::model_selection::{invert, InversionSettings, Measurement, Method, RegularizerKind};
use crate::optics::{IndexTable, Kernel, MieKernel, MixedMaterial, Particle};
use crate::orthant_mvn::{splitmix, MonteCarlo};
use crate::two_component::{
    invert_two_component, KernelFamily, TwoComponentSettings, DEFAULT_ANCHORS, DEFAULT_FRACTIONS,
};

pub const R_MIN: f64 = 0.01;
pub const R_MAX: f64 = 7.0;
pub const INTEGRATION_POINTS: usize = 300;
pub const FORWARD_POINTS: usize = 10_001;
pub const AMPLITUDE: f64 = 1e4;
pub const TAIL_TOLERANCE: f64 = 10.0;
pub const VARIANCE_FLOOR: f64 = 1e-30;
pub const DEFAULT_REPEATS: usize = 300;
/// Inversions with relative L2 error at or above this percentage fail.
pub const L2_FAILURE: f64 = 100.0;
/// Fraction retrievals deviating by at least this many percentage points fail.
pub const FRACTION_FAILURE: f64 = 50.0;

/// The 48 study wavelengths in five bands of the optical window.
pub fn study_wavelengths() -> Vec<f64> {
    [(0.6, 0.8, 8), (1.1, 1.3, 8), (1.6, 1.8, 8), (2.1, 2.5, 16), (3.1, 3.3, 8)]
        .iter()
        .flat_map(|&(a, b, n)| linspace(a, b, n))
        .collect()
}

/// 300 equidistant integration nodes on [0.01, 7] um.
pub fn integration_grid() -> RadiusGrid {
    RadiusGrid::uniform(R_MIN, R_MAX, INTEGRATION_POINTS).expect("static grid")
}

/// 10001 equidistant forward-model nodes on [0.01, 7] um.
pub fn forward_grid() -> RadiusGrid {
    RadiusGrid::uniform(R_MIN, R_MAX, FORWARD_POINTS).expect("static grid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[serde(rename = "lognormal")]
    LogNormal,
    Rrsb,
    Hedrih,
}

impl Family {
    pub const ALL: [Family; 3] = [Self::LogNormal, Self::Rrsb, Self::Hedrih];

    pub fn name(&self) -> &'static str {
        match self {
            Self::LogNormal => "lognormal",
            Self::Rrsb => "rrsb",
            Self::Hedrih => "hedrih",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Self::LogNormal => 1,
            Self::Rrsb => 2,
            Self::Hedrih => 3,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "lognormal" => Ok(Self::LogNormal),
            "rrsb" => Ok(Self::Rrsb),
            "hedrih" => Ok(Self::Hedrih),
            _ => Err(Error::InvalidParameter(format!(
                "unknown family '{s}' (expected lognormal, rrsb or hedrih)"
            ))),
        }
    }
}

/// Analytic number-density model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SizeDistribution {
    #[serde(rename = "lognormal")]
    LogNormal { amplitude: f64, sigma: f64, mu: f64 },
    Rrsb { amplitude: f64, exponent: f64, nu: f64 },
    Hedrih { amplitude: f64, eta: f64 },
}

impl SizeDistribution {
    pub fn family(&self) -> Family {
        match self {
            Self::LogNormal { .. } => Family::LogNormal,
            Self::Rrsb { .. } => Family::Rrsb,
            Self::Hedrih { .. } => Family::Hedrih,
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        eval_size_distribution(self, r)
    }

    pub fn sample(&self, radii: &[f64]) -> Vec<f64> {
        radii.iter().map(|&r| self.eval(r)).collect()
    }
}

pub fn eval_size_distribution(dist: &SizeDistribution, r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    match *dist {
        SizeDistribution::LogNormal { amplitude, sigma, mu } => {
            let z = (r.ln() - mu.ln()) / sigma;
            amplitude / ((2.0 * std::f64::consts::PI).sqrt() * sigma * r) * (-0.5 * z * z).exp()
        }
        SizeDistribution::Rrsb { amplitude, exponent, nu } => {
            let s = r / nu;
            amplitude * exponent / nu * s.powf(exponent - 1.0) * (-s.powf(exponent)).exp()
        }
        SizeDistribution::Hedrih { amplitude, eta } => {
            128.0 * amplitude * r.powi(3) / (3.0 * eta.powi(4)) * (-4.0 * r / eta).exp()
        }
    }
}

/// Bisection for a sign change of `f` on `[a, b]`.
fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, what: &str) -> Result<f64> {
    let (mut fa, fb) = (f(a), f(b));
    if fa.signum() == fb.signum() {
        return Err(Error::RootFailure(format!("{what}: no sign change on [{a}, {b}]")));
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 || (b - a) < 1e-15 * m.abs() {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Largest Hedrih width with `n(r_max) <= tol`.
pub fn hedrih_eta_max(amplitude: f64, tol: f64, r_max: f64) -> Result<f64> {
    let log_n = |eta: f64| {
        (128.0 * amplitude / 3.0).ln() + 3.0 * r_max.ln() - 4.0 * eta.ln() - 4.0 * r_max / eta - tol.ln()
    };
    // increasing in eta below r_max
    bisect(log_n, 0.05, r_max, "hedrih width bound")
}

/// Root `p > 1` of `p exp(-p) = c`, `0 < c < 1/e`.
pub fn rrsb_auxiliary_root(c: f64) -> Result<f64> {
    bisect(|p| p.ln() - p - c.ln(), 1.0, 50.0, "rrsb auxiliary equation")
}

/// The 100 study parameter sets of a family.
pub fn parameter_grid(family: Family, amplitude: f64, tol: f64, r_max: f64) -> Result<Vec<SizeDistribution>> {
    let mut out = Vec::with_capacity(100);
    match family {
        Family::LogNormal => {
            for k in 0..10 {
                let sigma = 0.2 + 0.3 * k as f64 / 9.0;
                let low = (sigma * sigma).exp();
                let arg = (2.0 * std::f64::consts::PI).sqrt() * r_max * sigma * tol / amplitude;
                let high = r_max * (-(-2.0 * sigma * sigma * arg.ln()).sqrt()).exp();
                for j in 0..10 {
                    let mu = low + j as f64 / 9.0 * (high - low);
                    out.push(SizeDistribution::LogNormal { amplitude, sigma, mu });
                }
            }
        }
        Family::Rrsb => {
            for k in 0..10 {
                let exponent = (k + 3) as f64;
                let p = rrsb_auxiliary_root(r_max * tol / (amplitude * exponent))?;
                let low = ((exponent - 1.0) / exponent).powf(-1.0 / exponent);
                let high = r_max * p.powf(-1.0 / exponent);
                for j in 0..10 {
                    let nu = low + j as f64 / 9.0 * (high - low);
                    out.push(SizeDistribution::Rrsb { amplitude, exponent, nu });
                }
            }
        }
        Family::Hedrih => {
            let eta_max = hedrih_eta_max(amplitude, tol, r_max)?;
            for k in 0..100 {
                let eta = 0.8 + k as f64 / 99.0 * (eta_max - 0.8);
                out.push(SizeDistribution::Hedrih { amplitude, eta });
            }
        }
    }
    Ok(out)
}

/// Default grid with `A = 1e4`, `Tol = 10`, `r_max = 7`.
pub fn default_parameter_grid(family: Family) -> Result<Vec<SizeDistribution>> {
    parameter_grid(family, AMPLITUDE, TAIL_TOLERANCE, R_MAX)
}

/// `count` indices spread evenly over `0..total`.
pub fn spread_indices(count: usize, total: usize) -> Vec<usize> {
    match count {
        0 => Vec::new(),
        1 => vec![0],
        _ => (0..count).map(|i| i * (total - 1) / (count - 1)).collect(),
    }
}

/// Composite Simpson weights for an odd number of equidistant nodes.
pub fn simpson_weights(grid: &RadiusGrid) -> Result<Vec<f64>> {
    let n = grid.len();
    if n < 3 || n.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("Simpson rule needs an odd node count, got {n}")));
    }
    let h = (grid.r_max() - grid.r_min()) / (n - 1) as f64;
    Ok((0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect())
}

/// Simpson-weighted kernel table on the forward grid.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    wavelengths: Vec<f64>,
    radii: Vec<f64>,
    weighted: DMatrix<f64>,
}

impl ForwardModel {
    pub fn new<K: Kernel + ?Sized>(kernel: &K, wavelengths: &[f64], grid: &RadiusGrid) -> Result<Self> {
        let w = simpson_weights(grid)?;
        let radii = grid.points().to_vec();
        let mut weighted = DMatrix::zeros(wavelengths.len(), radii.len());
        for (i, &l) in wavelengths.iter().enumerate() {
            for (j, &r) in radii.iter().enumerate() {
                weighted[(i, j)] = kernel.value(r, l)? * w[j];
            }
        }
        Ok(Self {
            wavelengths: wavelengths.to_vec(),
            radii,
            weighted,
        })
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn apply_samples(&self, density: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(density);
        (&self.weighted * v).iter().copied().collect()
    }

    pub fn apply(&self, dist: &SizeDistribution) -> Vec<f64> {
        self.apply_samples(&dist.sample(&self.radii))
    }
}

/// `e(l_i) = int k(r, l_i) n(r) dr` by Simpson's rule on 10001 nodes.
pub fn forward_extinctions<K: Kernel + ?Sized>(
    dist: &SizeDistribution,
    kernel: &K,
    wavelengths: &[f64],
) -> Result<Vec<f64>> {
    Ok(ForwardModel::new(kernel, wavelengths, &forward_grid())?.apply(dist))
}

/// Independent stream for one simulated experiment.
pub fn run_seed(seed: u64, family_tag: u64, param: usize, repeat: usize) -> u64 {
    let mut s = splitmix(seed);
    for part in [family_tag, param as u64, repeat as u64] {
        s = splitmix(s ^ part.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    s
}

/// `repeats` draws of `e_i + N(0, (noise_fraction e_i)^2)`, summarized by
/// sample mean and variance.
pub fn simulate_measurement(
    true_e: &[f64],
    wavelengths: &[f64],
    noise_fraction: f64,
    repeats: usize,
    seed: u64,
) -> Result<Measurement> {
    if true_e.len() != wavelengths.len() {
        return Err(Error::DimensionError("extinctions and wavelengths differ in length".into()));
    }
    if !(0.0..1.0).contains(&noise_fraction) {
        return Err(Error::InvalidParameter(format!("noise fraction {noise_fraction} outside [0, 1)")));
    }
    if noise_fraction == 0.0 {
        return Measurement::new(wavelengths.to_vec(), true_e.to_vec(), vec![VARIANCE_FLOOR; true_e.len()], repeats);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Vec<f64>> = (0..repeats)
        .map(|_| {
            true_e
                .iter()
                .map(|&e| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    e + noise_fraction * e * z
                })
                .collect()
        })
        .collect();
    Measurement::from_draws(wavelengths.to_vec(), &draws, VARIANCE_FLOOR)
}

/// Beer-Lambert extinction from offset-corrected intensities at two path
/// lengths `L = G - x_floated`.
#[allow(clippy::too_many_arguments)]
pub fn compute_extinction_from_intensities(
    i_long: &[f64],
    i_short: &[f64],
    offsets_long: &[f64],
    offsets_short: &[f64],
    g_long: f64,
    g_short: f64,
    x_floated: f64,
) -> Result<Vec<f64>> {
    let n = i_long.len();
    if i_short.len() != n || offsets_long.len() != n || offsets_short.len() != n {
        return Err(Error::DimensionError("intensity and offset lengths differ".into()));
    }
    let gap = (g_long - x_floated) - (g_short - x_floated);
    if !(gap > 0.0) {
        return Err(Error::InvalidParameter(format!("path gap {gap} is not positive")));
    }
    (0..n)
        .map(|i| {
            let long = i_long[i] - offsets_long[i];
            let short = i_short[i] - offsets_short[i];
            if !(long > 0.0) || !(short > 0.0) {
                return Err(Error::NonPositiveIntensity(i));
            }
            Ok(-(long.ln() - short.ln()) / gap)
        })
        .collect()
}

/// `100 |n_rec - n_true|_2 / |n_true|_2` on the Simpson forward grid.
pub fn relative_l2_error(weights: &BasisWeights, grid: &RadiusGrid, truth: &SizeDistribution) -> Result<f64> {
    let fine = forward_grid();
    let w = simpson_weights(&fine)?;
    let (mut diff, mut norm) = (0.0, 0.0);
    for (&r, &wj) in fine.points().iter().zip(&w) {
        let t = truth.eval(r);
        let d = evaluate_distribution(weights, grid, r)? - t;
        diff += wj * d * d;
        norm += wj * t * t;
    }
    if norm == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok(100.0 * (diff / norm).sqrt())
}

/// Kernel samples on the inversion grid, assembled lazily per ladder level.
#[derive(Debug, Clone)]
pub struct KernelCache {
    samples: KernelSamples,
    levels: Vec<Option<KernelMatrix>>,
}

impl KernelCache {
    pub fn new<K: Kernel + ?Sized>(kernel: &K, wavelengths: &[f64], grid: &RadiusGrid) -> Result<Self> {
        let samples = KernelSamples::evaluate(kernel, wavelengths, grid)?;
        Ok(Self::from_samples(samples))
    }

    pub fn from_samples(samples: KernelSamples) -> Self {
        let levels = vec![None; samples.grid().len() + 1];
        Self { samples, levels }
    }

    pub fn samples(&self) -> &KernelSamples {
        &self.samples
    }

    pub fn level(&mut self, n_col: usize) -> Result<KernelMatrix> {
        if n_col >= self.levels.len() {
            return Err(Error::InvalidParameter(format!("collocation size {n_col} exceeds the grid")));
        }
        if let Some(k) = &self.levels[n_col] {
            return Ok(k.clone());
        }
        let col = build_collocation_grid(n_col, self.samples.grid())?;
        let k = self.samples.assemble(&col)?;
        self.levels[n_col] = Some(k.clone());
        Ok(k)
    }
}

/// Study size: 10 parameters x 3 repeats, or the full 100 x 10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Reduced,
    Full,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Reduced => "reduced",
            Scale::Full => "full",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reduced" => Ok(Scale::Reduced),
            "full" => Ok(Scale::Full),
            _ => Err(Error::InvalidParameter(format!("unknown scale `{s}` (expected reduced or full)"))),
        }
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Single-component study design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub families: Vec<Family>,
    pub methods: Vec<Method>,
    pub reg_kinds: Vec<RegularizerKind>,
    pub noise_fraction: f64,
    /// Parameter sets drawn evenly from each 100-point family grid.
    pub parameters: usize,
    pub repeats: usize,
    /// Noisy draws averaged into one measurement.
    pub draws: usize,
    pub seed: u64,
    pub ladder: Vec<usize>,
    pub tau_grid: Vec<f64>,
    pub max_disc: usize,
    pub mc: MonteCarlo,
    pub threads: usize,
}

impl StudyConfig {
    pub fn new(scale: Scale) -> Self {
        let base = InversionSettings::default();
        let (parameters, repeats) = match scale {
            Scale::Reduced => (10, 3),
            Scale::Full => (100, 10),
        };
        Self {
            families: Family::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            reg_kinds: vec![RegularizerKind::Tikhonov],
            noise_fraction: 0.30,
            parameters,
            repeats,
            draws: DEFAULT_REPEATS,
            seed: 0x5eed,
            ladder: base.ladder,
            tau_grid: base.tau_grid,
            max_disc: base.max_disc,
            mc: base.mc,
            threads: default_threads(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.noise_fraction > 0.0 && self.noise_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!("noise fraction {} outside (0, 1)", self.noise_fraction)));
        }
        if self.repeats == 0 || self.draws == 0 || self.parameters == 0 || self.parameters > 100 {
            return Err(Error::InvalidParameter(
                "parameters must be in 1..=100, repeats and draws at least 1".into(),
            ));
        }
        Ok(())
    }

    fn settings(&self, reg_kind: RegularizerKind) -> InversionSettings {
        InversionSettings {
            ladder: self.ladder.clone(),
            tau_grid: self.tau_grid.clone(),
            reg_kind,
            max_disc: self.max_disc,
            mc: self.mc,
            ..InversionSettings::default()
        }
    }
}

/// Two-component study design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoComponentStudyConfig {
    pub families: Vec<Family>,
    pub reg_kinds: Vec<RegularizerKind>,
    pub noise_fraction: f64,
    /// True volume percentages of the first component.
    pub fractions_percent: Vec<f64>,
    pub parameters: usize,
    pub repeats: usize,
    pub draws: usize,
    pub seed: u64,
    pub ladder: Vec<usize>,
    pub tau_grid: Vec<f64>,
    pub fallback_tau_grid: Vec<f64>,
    pub window: usize,
    pub anchors: usize,
    pub fraction_points: usize,
    pub mc: MonteCarlo,
    pub threads: usize,
}

impl TwoComponentStudyConfig {
    pub fn new(scale: Scale) -> Self {
        let base = TwoComponentSettings::default();
        let (fractions_percent, parameters, repeats) = match scale {
            Scale::Reduced => (vec![0.0, 33.0, 67.0, 100.0], 5, 2),
            Scale::Full => (vec![0.0, 11.0, 22.0, 33.0, 44.0, 56.0, 67.0, 78.0, 89.0, 100.0], 100, 1),
        };
        Self {
            families: Family::ALL.to_vec(),
            reg_kinds: vec![RegularizerKind::Tikhonov],
            noise_fraction: 0.05,
            fractions_percent,
            parameters,
            repeats,
            draws: DEFAULT_REPEATS,
            seed: 0x5eed,
            ladder: base.ladder,
            tau_grid: base.tau_grid,
            fallback_tau_grid: base.fallback_tau_grid,
            window: base.window,
            anchors: DEFAULT_ANCHORS,
            fraction_points: DEFAULT_FRACTIONS,
            mc: base.mc,
            threads: default_threads(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.noise_fraction > 0.0 && self.noise_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!("noise fraction {} outside (0, 1)", self.noise_fraction)));
        }
        if self.repeats == 0 || self.draws == 0 || self.parameters == 0 || self.parameters > 100 {
            return Err(Error::InvalidParameter(
                "parameters must be in 1..=100, repeats and draws at least 1".into(),
            ));
        }
        if let Some(f) = self.fractions_percent.iter().find(|f| !(0.0..=100.0).contains(*f)) {
            return Err(Error::InvalidParameter(format!("fraction {f}% outside [0, 100]")));
        }
        Ok(())
    }

    fn settings(&self, reg_kind: RegularizerKind) -> TwoComponentSettings {
        TwoComponentSettings {
            ladder: self.ladder.clone(),
            tau_grid: self.tau_grid.clone(),
            fallback_tau_grid: self.fallback_tau_grid.clone(),
            reg_kind,
            window: self.window,
            mc: self.mc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    L2Failure,
    FractionFailure,
    NoModelFailure,
}

/// One simulated inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub family: Family,
    pub method: Method,
    pub reg_kind: RegularizerKind,
    pub parameter_index: usize,
    pub repeat: usize,
    pub true_fraction_percent: Option<f64>,
    pub outcome: Outcome,
    pub l2_percent: f64,
    pub fraction_percent: Option<f64>,
    pub fraction_deviation: Option<f64>,
    pub dimension: Option<usize>,
    pub seconds: f64,
    pub error: Option<String>,
}

/// Averages cover successful runs; worst cases cover every run, a run
/// without a model counting as `n = 0` (100 %).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub family: Family,
    pub method: Method,
    pub reg_kind: RegularizerKind,
    pub runs: usize,
    pub completed: usize,
    pub failures: usize,
    pub l2_failures: usize,
    pub no_model_failures: usize,
    pub avg_l2: Option<f64>,
    pub worst_l2: Option<f64>,
    pub avg_seconds: Option<f64>,
    pub worst_seconds: f64,
    pub avg_dimension: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionSummary {
    pub family: Family,
    pub reg_kind: RegularizerKind,
    pub true_fraction_percent: f64,
    pub runs: usize,
    pub completed: usize,
    pub failures: usize,
    pub l2_failures: usize,
    pub fraction_failures: usize,
    pub no_model_failures: usize,
    pub avg_l2: Option<f64>,
    pub worst_l2: Option<f64>,
    pub avg_deviation: Option<f64>,
    pub worst_deviation: Option<f64>,
    pub avg_seconds: Option<f64>,
    pub worst_seconds: f64,
    pub avg_dimension: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub summaries: Vec<MethodSummary>,
    pub runs: Vec<RunRecord>,
    pub total_seconds: f64,
}

impl StudyReport {
    pub fn summary(&self, family: Family, method: Method, reg_kind: RegularizerKind) -> Option<&MethodSummary> {
        self.summaries
            .iter()
            .find(|s| s.family == family && s.method == method && s.reg_kind == reg_kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoComponentStudyReport {
    pub config: TwoComponentStudyConfig,
    pub materials: (String, String),
    pub summaries: Vec<FractionSummary>,
    pub runs: Vec<RunRecord>,
    pub total_seconds: f64,
}

impl TwoComponentStudyReport {
    /// Per-fraction rows of one family and prior, in configured order.
    pub fn rows(&self, family: Family, reg_kind: RegularizerKind) -> Vec<&FractionSummary> {
        self.summaries
            .iter()
            .filter(|s| s.family == family && s.reg_kind == reg_kind)
            .collect()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn max_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    values.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
}

fn summarize_methods(config: &StudyConfig, runs: &[RunRecord]) -> Vec<MethodSummary> {
    let mut out = Vec::new();
    for &reg_kind in &config.reg_kinds {
        for &family in &config.families {
            for &method in &config.methods {
                let group: Vec<&RunRecord> = runs
                    .iter()
                    .filter(|r| r.family == family && r.method == method && r.reg_kind == reg_kind)
                    .collect();
                let done: Vec<&RunRecord> = group.iter().copied().filter(|r| r.outcome == Outcome::Success).collect();
                let count = |o: Outcome| group.iter().filter(|r| r.outcome == o).count();
                out.push(MethodSummary {
                    family,
                    method,
                    reg_kind,
                    runs: group.len(),
                    completed: done.len(),
                    failures: group.len() - done.len(),
                    l2_failures: count(Outcome::L2Failure),
                    no_model_failures: count(Outcome::NoModelFailure),
                    avg_l2: mean(done.iter().map(|r| r.l2_percent)),
                    worst_l2: max_of(group.iter().map(|r| r.l2_percent)),
                    avg_seconds: mean(done.iter().map(|r| r.seconds)),
                    worst_seconds: max_of(group.iter().map(|r| r.seconds)).unwrap_or(0.0),
                    avg_dimension: mean(done.iter().filter_map(|r| r.dimension).map(|d| d as f64)),
                });
            }
        }
    }
    out
}

fn summarize_fractions(config: &TwoComponentStudyConfig, runs: &[RunRecord]) -> Vec<FractionSummary> {
    let mut out = Vec::new();
    for &reg_kind in &config.reg_kinds {
        for &family in &config.families {
            for &pct in &config.fractions_percent {
                let group: Vec<&RunRecord> = runs
                    .iter()
                    .filter(|r| r.family == family && r.reg_kind == reg_kind && r.true_fraction_percent == Some(pct))
                    .collect();
                let done: Vec<&RunRecord> = group.iter().copied().filter(|r| r.outcome == Outcome::Success).collect();
                let count = |o: Outcome| group.iter().filter(|r| r.outcome == o).count();
                out.push(FractionSummary {
                    family,
                    reg_kind,
                    true_fraction_percent: pct,
                    runs: group.len(),
                    completed: done.len(),
                    failures: group.len() - done.len(),
                    l2_failures: count(Outcome::L2Failure),
                    fraction_failures: count(Outcome::FractionFailure),
                    no_model_failures: count(Outcome::NoModelFailure),
                    avg_l2: mean(done.iter().map(|r| r.l2_percent)),
                    worst_l2: max_of(group.iter().map(|r| r.l2_percent)),
                    avg_deviation: mean(done.iter().filter_map(|r| r.fraction_deviation)),
                    worst_deviation: max_of(group.iter().filter_map(|r| r.fraction_deviation)),
                    avg_seconds: mean(done.iter().map(|r| r.seconds)),
                    worst_seconds: max_of(group.iter().map(|r| r.seconds)).unwrap_or(0.0),
                    avg_dimension: mean(done.iter().filter_map(|r| r.dimension).map(|d| d as f64)),
                });
            }
        }
    }
    out
}

/// Maps `jobs` through `f` on up to `threads` workers; output order follows input.
fn parallel_map<J, R, F>(jobs: &[J], threads: usize, f: F) -> Vec<R>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> R + Sync,
{
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn seconds_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Single-component comparison of inversion methods on synthetic data.
///
/// Inversion errors are recorded as no-model failures; only setup errors
/// (index tables, grids) abort.
pub fn run_study(config: &StudyConfig, particle: &IndexTable, medium: &IndexTable) -> Result<StudyReport> {
    config.validate()?;
    let start = Instant::now();
    let wavelengths = study_wavelengths();
    let kernel = MieKernel::pure(medium.clone(), particle.clone());
    let mut cache = KernelCache::new(&kernel, &wavelengths, &integration_grid())?;
    let mut levels: Vec<Option<KernelMatrix>> = vec![None; INTEGRATION_POINTS + 1];
    for &n in config.ladder.iter().filter(|&&n| (3..=INTEGRATION_POINTS).contains(&n)) {
        levels[n] = Some(cache.level(n)?);
    }
    let builder = |n: usize| -> Result<KernelMatrix> {
        levels
            .get(n)
            .and_then(|k| k.clone())
            .ok_or_else(|| Error::InvalidParameter(format!("collocation size {n} not in the ladder")))
    };
    let forward = ForwardModel::new(&kernel, &wavelengths, &forward_grid())?;

    let mut jobs = Vec::new();
    for &family in &config.families {
        let grid = default_parameter_grid(family)?;
        for p in spread_indices(config.parameters, grid.len()) {
            let truth = grid[p];
            let e = forward.apply(&truth);
            for rep in 0..config.repeats {
                let seed = run_seed(config.seed, family.tag(), p, rep);
                jobs.push((family, p, rep, truth, e.clone(), seed));
            }
        }
    }

    let per_job = parallel_map(&jobs, config.threads, |(family, p, rep, truth, e, seed)| {
        let meas = simulate_measurement(e, &wavelengths, config.noise_fraction, config.draws, *seed);
        let mut records = Vec::new();
        for &reg_kind in &config.reg_kinds {
            let settings = config.settings(reg_kind);
            for &method in &config.methods {
                let t = Instant::now();
                let result = meas.as_ref().map_err(Clone::clone).and_then(|m| invert(m, &settings, method, builder));
                let seconds = seconds_since(t);
                let mut rec = RunRecord {
                    family: *family,
                    method,
                    reg_kind,
                    parameter_index: *p,
                    repeat: *rep,
                    true_fraction_percent: None,
                    outcome: Outcome::NoModelFailure,
                    l2_percent: L2_FAILURE,
                    fraction_percent: None,
                    fraction_deviation: None,
                    dimension: None,
                    seconds,
                    error: None,
                };
                match result.and_then(|inv| {
                    let (w, k) = inv.best();
                    Ok((relative_l2_error(w, k.collocation(), truth)?, k.interior_dim()))
                }) {
                    Ok((l2, dim)) => {
                        rec.l2_percent = l2;
                        rec.dimension = Some(dim);
                        rec.outcome = if l2 >= L2_FAILURE { Outcome::L2Failure } else { Outcome::Success };
                    }
                    Err(e) => rec.error = Some(e.to_string()),
                }
                records.push(rec);
            }
        }
        records
    });
    let runs: Vec<RunRecord> = per_job.into_iter().flatten().collect();
    Ok(StudyReport {
        summaries: summarize_methods(config, &runs),
        config: config.clone(),
        runs,
        total_seconds: seconds_since(start),
    })
}

/// Two-component study: size distribution and volume fraction of the first
/// material retrieved jointly.
///
/// A run without any admissible model falls back to `n = 0` and fraction 0.5.
pub fn run_two_component_study(
    config: &TwoComponentStudyConfig,
    first: &IndexTable,
    second: &IndexTable,
    medium: &IndexTable,
) -> Result<TwoComponentStudyReport> {
    config.validate()?;
    let start = Instant::now();
    let wavelengths = study_wavelengths();
    let family = KernelFamily::build(
        first,
        second,
        medium,
        &wavelengths,
        &integration_grid(),
        config.anchors,
        config.fraction_points,
    )?;
    let fine = forward_grid();
    let forwards = config
        .fractions_percent
        .iter()
        .map(|&pct| {
            let mix = MixedMaterial::new(first.clone(), second.clone(), pct / 100.0)?;
            ForwardModel::new(&MieKernel::new(medium.clone(), Particle::Mixed(mix)), &wavelengths, &fine)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for &dist_family in &config.families {
        let grid = default_parameter_grid(dist_family)?;
        for (fi, forward) in forwards.iter().enumerate() {
            for p in spread_indices(config.parameters, grid.len()) {
                let truth = grid[p];
                let e = forward.apply(&truth);
                for rep in 0..config.repeats {
                    let seed = run_seed(config.seed, dist_family.tag() ^ ((fi as u64 + 1) << 32), p, rep);
                    jobs.push((dist_family, fi, p, rep, truth, e.clone(), seed));
                }
            }
        }
    }

    let per_job = parallel_map(&jobs, config.threads, |(dist_family, fi, p, rep, truth, e, seed)| {
        let pct = config.fractions_percent[*fi];
        let meas = simulate_measurement(e, &wavelengths, config.noise_fraction, config.draws, *seed);
        let mut records = Vec::new();
        for &reg_kind in &config.reg_kinds {
            let settings = config.settings(reg_kind);
            let t = Instant::now();
            let result = meas
                .as_ref()
                .map_err(Clone::clone)
                .and_then(|m| invert_two_component(&family, m, &settings));
            let seconds = seconds_since(t);
            let mut rec = RunRecord {
                family: *dist_family,
                method: Method::Constrained,
                reg_kind,
                parameter_index: *p,
                repeat: *rep,
                true_fraction_percent: Some(pct),
                outcome: Outcome::NoModelFailure,
                l2_percent: L2_FAILURE,
                fraction_percent: Some(50.0),
                fraction_deviation: Some((pct - 50.0).abs()),
                dimension: None,
                seconds,
                error: None,
            };
            match result.and_then(|inv| {
                let best = &inv.ranked[0];
                let l2 = relative_l2_error(&best.weights, best.kernel.collocation(), truth)?;
                Ok((l2, 100.0 * inv.fraction(), best.kernel.interior_dim()))
            }) {
                Ok((l2, frac, dim)) => {
                    let dev = (pct - frac).abs();
                    rec.l2_percent = l2;
                    rec.fraction_percent = Some(frac);
                    rec.fraction_deviation = Some(dev);
                    rec.dimension = Some(dim);
                    rec.outcome = if l2 >= L2_FAILURE {
                        Outcome::L2Failure
                    } else if dev >= FRACTION_FAILURE {
                        Outcome::FractionFailure
                    } else {
                        Outcome::Success
                    };
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            records.push(rec);
        }
        records
    });
    let runs: Vec<RunRecord> = per_job.into_iter().flatten().collect();
    Ok(TwoComponentStudyReport {
        summaries: summarize_fractions(config, &runs),
        config: config.clone(),
        materials: (first.material().to_string(), second.material().to_string()),
        runs,
        total_seconds: seconds_since(start),
    })
}
