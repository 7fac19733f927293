//! Two-component aerosols: kernels parameterized by the volume fraction of
//! the first component, residual scan over the fraction grid, and ranking of
//! (dimension, fraction, gamma) triplets.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::discretization::{build_collocation_grid, KernelMatrix, KernelSamples, RadiusGrid};
use crate::error::{Error, Result};
use crate::model_selection::{
    default_ladder, level_candidates, select_models, Measurement, ModelCandidate, NoiseScaling, RegularizerKind,
    Solver,
};
use crate::optics::{IndexTable, MieKernel, MixedMaterial, Particle};
use crate::orthant_mvn::MonteCarlo;
use crate::tikhonov_qp::solve_nnls;

pub const DEFAULT_ANCHORS: usize = 101;
pub const DEFAULT_FRACTIONS: usize = 201;
pub const DEFAULT_WINDOW: usize = 5;

/// Discrepancy factors 0.5, 0.6, ..., 2.0.
pub fn default_tau_grid() -> Vec<f64> {
    (5..=20).map(|k| k as f64 / 10.0).collect()
}

/// Retry grid 2.5, 3.0, ..., 5.0.
pub fn fallback_tau_grid() -> Vec<f64> {
    (5..=10).map(|k| k as f64 / 2.0).collect()
}

/// Second derivatives of the natural cubic spline through equidistant
/// `y` with spacing `h`, as a linear map of `y` (rows: nodes).
fn natural_spline_moments(count: usize, h: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(count, count);
    if count < 3 {
        return out;
    }
    let m = count - 2;
    // tridiagonal (1, 4, 1) M = 6/h^2 (y_{i-1} - 2 y_i + y_{i+1}) on interior nodes
    let mut sys = DMatrix::zeros(m, m);
    for i in 0..m {
        sys[(i, i)] = 4.0;
        if i + 1 < m {
            sys[(i, i + 1)] = 1.0;
            sys[(i + 1, i)] = 1.0;
        }
    }
    let mut rhs = DMatrix::zeros(m, count);
    for i in 0..m {
        rhs[(i, i)] = 6.0 / (h * h);
        rhs[(i, i + 1)] = -12.0 / (h * h);
        rhs[(i, i + 2)] = 6.0 / (h * h);
    }
    let inner = sys.lu().solve(&rhs).expect("diagonally dominant");
    out.rows_mut(1, m).copy_from(&inner);
    out
}

/// Weights `W` such that the spline through anchors `y` evaluated at
/// `targets` equals `W y`. Anchors are equidistant on [0, 1].
pub fn spline_weights(anchors: usize, targets: &[f64]) -> DMatrix<f64> {
    let h = 1.0 / (anchors - 1) as f64;
    let moments = natural_spline_moments(anchors, h);
    let mut w = DMatrix::zeros(targets.len(), anchors);
    for (t, &p) in targets.iter().enumerate() {
        let pos = p / h;
        let nearest = pos.round();
        if (pos - nearest).abs() < 1e-9 {
            w[(t, nearest as usize)] = 1.0;
            continue;
        }
        let i = (pos.floor() as usize).min(anchors - 2);
        let a = (i + 1) as f64 - pos;
        let b = 1.0 - a;
        w[(t, i)] += a;
        w[(t, i + 1)] += b;
        let ca = (a * a * a - a) * h * h / 6.0;
        let cb = (b * b * b - b) * h * h / 6.0;
        for k in 0..anchors {
            w[(t, k)] += ca * moments[(i, k)] + cb * moments[(i + 1, k)];
        }
    }
    w
}

/// Kernel samples for every fraction of the first component on a uniform
/// grid, from Mie evaluations at anchor fractions and natural cubic splines
/// in between.
#[derive(Debug, Clone)]
pub struct KernelFamily {
    fractions: Vec<f64>,
    samples: Vec<KernelSamples>,
}

impl KernelFamily {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        first: &IndexTable,
        second: &IndexTable,
        medium: &IndexTable,
        wavelengths: &[f64],
        grid: &RadiusGrid,
        anchor_count: usize,
        n_frac: usize,
    ) -> Result<Self> {
        if anchor_count < 2 || anchor_count > n_frac {
            return Err(Error::InvalidParameter(format!(
                "need 2 <= anchors ({anchor_count}) <= fractions ({n_frac})"
            )));
        }
        let anchors: Vec<f64> = (0..anchor_count).map(|i| i as f64 / (anchor_count - 1) as f64).collect();
        let raw = anchors
            .iter()
            .map(|&p| {
                let mix = MixedMaterial::new(first.clone(), second.clone(), p)?;
                let kernel = MieKernel::new(medium.clone(), Particle::Mixed(mix));
                Ok(KernelSamples::evaluate(&kernel, wavelengths, grid)?.values())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_anchor_values(raw, wavelengths, grid, n_frac)
    }

    /// Family from raw kernel tables at equidistant anchors on [0, 1].
    pub fn from_anchor_values(
        anchors: Vec<DMatrix<f64>>,
        wavelengths: &[f64],
        grid: &RadiusGrid,
        n_frac: usize,
    ) -> Result<Self> {
        let count = anchors.len();
        if count < 2 || n_frac < 2 {
            return Err(Error::InvalidParameter("at least two anchors and two fractions are needed".into()));
        }
        let fractions: Vec<f64> = (0..n_frac).map(|i| i as f64 / (n_frac - 1) as f64).collect();
        let w = spline_weights(count, &fractions);
        let shape = anchors[0].shape();
        let mut samples = Vec::with_capacity(n_frac);
        for t in 0..n_frac {
            let mut values = DMatrix::<f64>::zeros(shape.0, shape.1);
            for (a, table) in anchors.iter().enumerate() {
                let c = w[(t, a)];
                if c != 0.0 {
                    values += table * c;
                }
            }
            samples.push(KernelSamples::from_values(values, wavelengths.to_vec(), grid.clone())?);
        }
        Ok(Self { fractions, samples })
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn samples(&self, index: usize) -> &KernelSamples {
        &self.samples[index]
    }

    pub fn wavelengths(&self) -> &[f64] {
        self.samples[0].wavelengths()
    }

    /// Kernel matrix at fraction `index` for a collocation size.
    pub fn matrix(&self, index: usize, n_col: usize) -> Result<KernelMatrix> {
        let s = &self.samples[index];
        let col = build_collocation_grid(n_col, s.grid())?;
        Ok(s.assemble(&col)?.with_fraction(self.fractions[index]))
    }

    fn level_matrices(&self, n_col: usize) -> Result<Vec<KernelMatrix>> {
        let col = build_collocation_grid(n_col, self.samples[0].grid())?;
        self.samples
            .iter()
            .zip(&self.fractions)
            .map(|(s, &p)| Ok(s.assemble(&col)?.with_fraction(p)))
            .collect()
    }
}

/// NNLS residual per fraction and the best window of consecutive fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionScan {
    pub residuals: Vec<f64>,
    pub window_size: usize,
    pub best_window: Vec<usize>,
    pub selected: Vec<usize>,
}

/// First window of `n_mean` consecutive residuals with the smallest mean;
/// keeps its 1st, 3rd and 5th members.
pub fn best_window(residuals: &[f64], n_mean: usize) -> Result<FractionScan> {
    if n_mean == 0 || n_mean > residuals.len() {
        return Err(Error::InvalidParameter(format!(
            "window of {n_mean} over {} fractions",
            residuals.len()
        )));
    }
    let mut best = (f64::INFINITY, 0);
    for start in 0..=residuals.len() - n_mean {
        let mean = residuals[start..start + n_mean].iter().sum::<f64>() / n_mean as f64;
        if mean < best.0 {
            best = (mean, start);
        }
    }
    let start = best.1;
    let best_window: Vec<usize> = (start..start + n_mean).collect();
    let selected = [0, 2, 4].iter().filter(|&&k| k < n_mean).map(|&k| start + k).collect();
    Ok(FractionScan {
        residuals: residuals.to_vec(),
        window_size: n_mean,
        best_window,
        selected,
    })
}

fn scan_matrices(matrices: &[KernelMatrix], meas: &Measurement, scaling: &NoiseScaling, n_mean: usize) -> Result<FractionScan> {
    let data = scaling.weight_data(&meas.mean_extinction);
    let residuals = matrices
        .iter()
        .map(|k| Ok(solve_nnls(&scaling.weight_kernel(k.entries()), &data)?.residual_sq))
        .collect::<Result<Vec<_>>>()?;
    best_window(&residuals, n_mean)
}

/// Unregularized residual at every fraction for one collocation size.
pub fn scan_fractions(
    family: &KernelFamily,
    meas: &Measurement,
    scaling: &NoiseScaling,
    n_col: usize,
    n_mean: usize,
) -> Result<FractionScan> {
    scan_matrices(&family.level_matrices(n_col)?, meas, scaling, n_mean)
}

/// Settings of the two-component inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoComponentSettings {
    pub ladder: Vec<usize>,
    pub tau_grid: Vec<f64>,
    pub fallback_tau_grid: Vec<f64>,
    pub reg_kind: RegularizerKind,
    pub window: usize,
    pub mc: MonteCarlo,
}

impl Default for TwoComponentSettings {
    fn default() -> Self {
        Self {
            ladder: default_ladder(),
            tau_grid: default_tau_grid(),
            fallback_tau_grid: fallback_tau_grid(),
            reg_kind: RegularizerKind::Tikhonov,
            window: DEFAULT_WINDOW,
            mc: MonteCarlo::default(),
        }
    }
}

/// Candidates from the first level with any admissible (fraction, tau).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoComponentModels {
    pub n_col: usize,
    pub scan: FractionScan,
    pub used_fallback: bool,
    pub candidates: Vec<ModelCandidate>,
}

pub fn generate_models_two_component(
    family: &KernelFamily,
    meas: &Measurement,
    scaling: &NoiseScaling,
    settings: &TwoComponentSettings,
) -> Result<TwoComponentModels> {
    let data = scaling.weight_data(&meas.mean_extinction);
    let mut scans: Vec<(usize, Vec<KernelMatrix>, FractionScan)> = Vec::new();
    for (attempt, grid) in [&settings.tau_grid, &settings.fallback_tau_grid].into_iter().enumerate() {
        for (li, &n_col) in settings.ladder.iter().enumerate() {
            if n_col < 3 || n_col - 2 > meas.len() {
                break;
            }
            if li >= scans.len() {
                let matrices = family.level_matrices(n_col)?;
                let scan = scan_matrices(&matrices, meas, scaling, settings.window)?;
                scans.push((n_col, matrices, scan));
            }
            let (_, matrices, scan) = &scans[li];
            let mut candidates = Vec::new();
            for &idx in &scan.selected {
                if let Some(set) = level_candidates(&matrices[idx], &data, scaling, grid, settings.reg_kind, Solver::Constrained)? {
                    candidates.extend(set.candidates);
                }
            }
            if !candidates.is_empty() {
                return Ok(TwoComponentModels {
                    n_col,
                    scan: scan.clone(),
                    used_fallback: attempt == 1,
                    candidates,
                });
            }
        }
    }
    Err(Error::NoModels)
}

/// Evidence ranking over (dimension, fraction, gamma) triplets.
pub fn select_models_two_component(
    candidates: Vec<ModelCandidate>,
    meas: &Measurement,
    scaling: &NoiseScaling,
    mc: MonteCarlo,
) -> Result<Vec<ModelCandidate>> {
    select_models(candidates, meas, scaling, mc)
}

/// Ranked two-component inversion; the retrieved fraction is that of the
/// first candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoComponentInversion {
    pub delta_sq: f64,
    pub n_col: usize,
    pub scan: FractionScan,
    pub used_fallback: bool,
    pub ranked: Vec<ModelCandidate>,
}

impl TwoComponentInversion {
    pub fn fraction(&self) -> f64 {
        self.ranked[0].fraction.unwrap_or(0.5)
    }
}

pub fn invert_two_component(
    family: &KernelFamily,
    meas: &Measurement,
    settings: &TwoComponentSettings,
) -> Result<TwoComponentInversion> {
    let scaling = NoiseScaling::from_measurement(meas);
    let models = generate_models_two_component(family, meas, &scaling, settings)?;
    let ranked = select_models_two_component(models.candidates, meas, &scaling, settings.mc)?;
    Ok(TwoComponentInversion {
        delta_sq: scaling.delta_sq,
        n_col: models.n_col,
        scan: models.scan,
        used_fallback: models.used_fallback,
        ranked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn spline_reproduces_anchors_and_cubics_inside() {
        let targets: Vec<f64> = (0..21).map(|i| i as f64 / 20.0).collect();
        let w = spline_weights(11, &targets);
        for (t, &p) in targets.iter().enumerate() {
            if t % 2 == 0 {
                assert_eq!(w[(t, t / 2)], 1.0);
            }
            // linear data is reproduced exactly by a natural spline
            let y: f64 = (0..11).map(|a| w[(t, a)] * (2.0 + 3.0 * a as f64 / 10.0)).sum();
            assert_abs_diff_eq!(y, 2.0 + 3.0 * p, epsilon = 1e-12);
            let total: f64 = w.row(t).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn spline_matches_direct_tridiagonal_solve() {
        // natural spline through y = sin(3p) on 6 anchors, evaluated at p = 0.33
        let n = 6;
        let h = 0.2;
        let y: Vec<f64> = (0..n).map(|i| (3.0 * i as f64 * h).sin()).collect();
        let w = spline_weights(n, &[0.33]);
        let got: f64 = (0..n).map(|a| w[(0, a)] * y[a]).sum();
        // oracle: Thomas algorithm on the interior moment system
        let m = n - 2;
        let mut diag = vec![4.0; m];
        let mut rhs: Vec<f64> = (1..n - 1).map(|i| 6.0 / (h * h) * (y[i - 1] - 2.0 * y[i] + y[i + 1])).collect();
        for i in 1..m {
            let f = 1.0 / diag[i - 1];
            diag[i] -= f;
            rhs[i] -= f * rhs[i - 1];
        }
        let mut mom = vec![0.0; n];
        for i in (0..m).rev() {
            let next = if i + 1 < m { mom[i + 2] } else { 0.0 };
            mom[i + 1] = (rhs[i] - next) / diag[i];
        }
        let i = 1;
        let a = ((i + 1) as f64 * h - 0.33) / h;
        let b = 1.0 - a;
        let oracle = a * y[i] + b * y[i + 1] + ((a * a * a - a) * mom[i] + (b * b * b - b) * mom[i + 1]) * h * h / 6.0;
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-13);
    }

    fn subset_wavelengths() -> Vec<f64> {
        vec![0.62, 0.75, 1.15, 1.3, 1.65, 1.8, 2.15, 2.3, 2.45, 3.1, 3.2, 3.3]
    }

    fn water_csi_family(wavelengths: &[f64]) -> KernelFamily {
        let water = IndexTable::builtin("H2O").unwrap();
        let csi = IndexTable::builtin("CsI").unwrap();
        let air = IndexTable::builtin("air").unwrap();
        let grid = RadiusGrid::uniform(0.01, 7.0, 300).unwrap();
        KernelFamily::build(&water, &csi, &air, wavelengths, &grid, DEFAULT_ANCHORS, DEFAULT_FRACTIONS).unwrap()
    }

    #[test]
    fn interpolated_kernel_matches_direct_mie() {
        let wl = subset_wavelengths();
        let family = water_csi_family(&wl);
        // index 67 is p = 0.335, halfway between two anchors
        let p = family.fractions()[67];
        assert!((p - 0.335).abs() < 1e-12);
        let mix = MixedMaterial::new(
            IndexTable::builtin("H2O").unwrap(),
            IndexTable::builtin("CsI").unwrap(),
            p,
        )
        .unwrap();
        let kernel = MieKernel::new(IndexTable::builtin("air").unwrap(), Particle::Mixed(mix));
        let direct = KernelSamples::evaluate(&kernel, &wl, family.samples(0).grid()).unwrap();
        // finer columns resolve resonances narrower than the anchor spacing
        for n_col in [5, 8] {
            let col = build_collocation_grid(n_col, direct.grid()).unwrap();
            let exact = direct.assemble(&col).unwrap();
            let spline = family.matrix(67, n_col).unwrap();
            let mut worst: f64 = 0.0;
            for (d, s) in exact.entries().iter().zip(spline.entries().iter()) {
                worst = worst.max((d - s).abs() / d.abs());
            }
            assert!(worst < 5e-3, "{n_col}: {worst}");
        }
    }

    #[test]
    fn anchors_reproduce_direct_mie() {
        let wl = subset_wavelengths();
        let family = water_csi_family(&wl);
        for index in [0, 66, 200] {
            let p = family.fractions()[index];
            let mix = MixedMaterial::new(
                IndexTable::builtin("H2O").unwrap(),
                IndexTable::builtin("CsI").unwrap(),
                p,
            )
            .unwrap();
            let kernel = MieKernel::new(IndexTable::builtin("air").unwrap(), Particle::Mixed(mix));
            let direct = KernelSamples::evaluate(&kernel, &wl, family.samples(0).grid()).unwrap();
            for (d, s) in direct.values().iter().zip(family.samples(index).values().iter()) {
                assert!((d - s).abs() <= 1e-12 * d.abs().max(1e-300), "{index}: {d} {s}");
            }
        }
    }

    #[test]
    fn noise_free_scan_finds_the_fraction() {
        let wl = subset_wavelengths();
        let family = water_csi_family(&wl);
        let truth = 134; // p = 0.67
        let n_col = 8;
        let k = family.matrix(truth, n_col).unwrap();
        let weights = crate::discretization::BasisWeights::from_slice(&[1.0, 3.0, 5.0, 4.0, 2.0, 0.5]);
        let e: Vec<f64> = k.apply(&weights).iter().copied().collect();
        let var: Vec<f64> = e.iter().map(|v| (0.01 * v).powi(2)).collect();
        let meas = Measurement::new(wl.clone(), e, var, 1).unwrap();
        let scaling = NoiseScaling::from_measurement(&meas);
        let scan = scan_fractions(&family, &meas, &scaling, n_col, DEFAULT_WINDOW).unwrap();
        assert!(scan.residuals[truth] < 1e-12 * scan.residuals.iter().copied().fold(0.0, f64::max));
        assert!(scan.best_window.contains(&truth));
        for &i in &scan.selected {
            assert!(i.abs_diff(truth) <= 2, "{:?}", scan.selected);
        }
    }

    #[test]
    fn window_rules() {
        let r: Vec<f64> = (0..201).map(|i: i32| 0.1 * (i - 100).abs() as f64).collect();
        let scan = best_window(&r, 5).unwrap();
        assert_eq!(scan.best_window, vec![98, 99, 100, 101, 102]);
        assert_eq!(scan.selected, vec![98, 100, 102]);
        let flat = best_window(&[2.0; 20], 5).unwrap();
        assert_eq!(flat.best_window[0], 0);
        assert!(best_window(&[1.0, 2.0], 5).is_err());
    }

    #[test]
    fn identical_materials_give_constant_family() {
        let water = IndexTable::builtin("H2O").unwrap();
        let air = IndexTable::builtin("air").unwrap();
        let wl = vec![0.7, 1.2, 1.7, 2.2, 2.4, 3.2];
        let grid = RadiusGrid::uniform(0.01, 7.0, 31).unwrap();
        let fam = KernelFamily::build(&water, &water, &air, &wl, &grid, 5, 9).unwrap();
        let k0 = fam.matrix(0, 6).unwrap();
        for i in 1..9 {
            let k = fam.matrix(i, 6).unwrap();
            assert!((k.entries() - k0.entries()).amax() <= 1e-12 * k0.entries().amax());
            assert_eq!(k.fraction(), Some(i as f64 / 8.0));
        }
    }
}
