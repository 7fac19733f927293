//! Radius grids, Galerkin collocation with hat functions, and kernel-matrix
//! assembly by the composite trapezoidal rule.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::Kernel;

/// Strictly increasing radius nodes in micrometres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusGrid {
    points: Vec<f64>,
}

impl RadiusGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DimensionError("a radius grid needs at least two points".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::DimensionError("radius grid must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    /// `n` equidistant points on `[r_min, r_max]`, endpoints exact.
    pub fn uniform(r_min: f64, r_max: f64, n: usize) -> Result<Self> {
        if n < 2 || !(r_max > r_min) {
            return Err(Error::DimensionError(format!(
                "cannot build {n}-point grid on [{r_min}, {r_max}]"
            )));
        }
        Self::new(linspace(r_min, r_max, n))
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn r_min(&self) -> f64 {
        self.points[0]
    }

    pub fn r_max(&self) -> f64 {
        *self.points.last().unwrap()
    }

    /// Composite trapezoidal weights on this grid.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let p = &self.points;
        let n = p.len();
        let mut w = vec![0.0; n];
        for i in 0..n - 1 {
            let h = 0.5 * (p[i + 1] - p[i]);
            w[i] += h;
            w[i + 1] += h;
        }
        w
    }

    fn position_of(&self, r: f64) -> Option<usize> {
        self.points.binary_search_by(|p| p.total_cmp(&r)).ok()
    }
}

/// Closed-interval linspace; `linspace(a, b, 1) == [a]`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => {
            let h = (b - a) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n).map(|i| a + h * i as f64).collect();
            v[n - 1] = b;
            v
        }
    }
}

/// Nearest-node subgrid of `integration_grid` with about `n_col` points.
///
/// A uniform pre-grid is snapped onto the integration nodes (lower node on
/// ties); duplicates collapse.
pub fn build_collocation_grid(n_col: usize, integration_grid: &RadiusGrid) -> Result<RadiusGrid> {
    let nodes = integration_grid.points();
    if n_col < 3 || n_col > nodes.len() {
        return Err(Error::DimensionError(format!(
            "collocation size {n_col} must lie in [3, {}]",
            nodes.len()
        )));
    }
    let pre = linspace(integration_grid.r_min(), integration_grid.r_max(), n_col);
    let mut snapped: Vec<f64> = Vec::with_capacity(n_col);
    for &target in &pre {
        let hi = nodes.partition_point(|&x| x < target);
        let pick = if hi == 0 {
            0
        } else if hi == nodes.len() {
            nodes.len() - 1
        } else if target - nodes[hi - 1] <= nodes[hi] - target {
            hi - 1
        } else {
            hi
        };
        let r = nodes[pick];
        if snapped.last() != Some(&r) {
            snapped.push(r);
        }
    }
    if snapped.len() < 3 {
        return Err(Error::GridTooCoarse { points: snapped.len() });
    }
    RadiusGrid::new(snapped)
}

/// Discrete forward operator acting on interior hat-function weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
    wavelengths: Vec<f64>,
    collocation: RadiusGrid,
    fraction: Option<f64>,
}

impl KernelMatrix {
    pub fn new(
        entries: DMatrix<f64>,
        wavelengths: Vec<f64>,
        collocation: RadiusGrid,
        fraction: Option<f64>,
    ) -> Result<Self> {
        if entries.nrows() != wavelengths.len() || entries.ncols() + 2 != collocation.len() {
            return Err(Error::DimensionError(format!(
                "kernel matrix {}x{} does not fit {} wavelengths and {} collocation nodes",
                entries.nrows(),
                entries.ncols(),
                wavelengths.len(),
                collocation.len()
            )));
        }
        if entries.ncols() > entries.nrows() {
            return Err(Error::DimensionError(format!(
                "model dimension {} exceeds the {} measurements",
                entries.ncols(),
                entries.nrows()
            )));
        }
        Ok(Self {
            entries,
            wavelengths,
            collocation,
            fraction,
        })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn collocation(&self) -> &RadiusGrid {
        &self.collocation
    }

    /// Number of free weights (collocation nodes minus the two boundary nodes).
    pub fn interior_dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn fraction(&self) -> Option<f64> {
        self.fraction
    }

    pub fn with_fraction(mut self, p: f64) -> Self {
        self.fraction = Some(p);
        self
    }

    pub fn apply(&self, weights: &BasisWeights) -> DVector<f64> {
        &self.entries * weights.as_vector()
    }
}

/// Interior hat-function coefficients of a reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BasisWeights(DVector<f64>);

impl BasisWeights {
    pub fn new(values: DVector<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self(DVector::from_column_slice(values))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0)
    }
}

/// Kernel sampled on an integration grid for a fixed wavelength list.
///
/// Sampling is the expensive step; assembling matrices for any number of
/// collocation subgrids from the samples is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSamples {
    /// rows: wavelengths, columns: integration nodes; already multiplied by
    /// the trapezoid weights
    weighted: DMatrix<f64>,
    wavelengths: Vec<f64>,
    grid: RadiusGrid,
}

impl KernelSamples {
    pub fn evaluate<K: Kernel + ?Sized>(
        kernel: &K,
        wavelengths: &[f64],
        integration_grid: &RadiusGrid,
    ) -> Result<Self> {
        let weights = integration_grid.trapezoid_weights();
        let nl = wavelengths.len();
        let nr = integration_grid.len();
        let mut weighted = DMatrix::zeros(nl, nr);
        for (i, &l) in wavelengths.iter().enumerate() {
            for (j, &r) in integration_grid.points().iter().enumerate() {
                weighted[(i, j)] = weights[j] * kernel.value(r, l)?;
            }
        }
        Ok(Self {
            weighted,
            wavelengths: wavelengths.to_vec(),
            grid: integration_grid.clone(),
        })
    }

    /// Builds samples from raw (unweighted) kernel values.
    pub fn from_values(
        values: DMatrix<f64>,
        wavelengths: Vec<f64>,
        integration_grid: RadiusGrid,
    ) -> Result<Self> {
        if values.nrows() != wavelengths.len() || values.ncols() != integration_grid.len() {
            return Err(Error::DimensionError("kernel sample table shape mismatch".into()));
        }
        let w = integration_grid.trapezoid_weights();
        let mut weighted = values;
        for (j, wj) in w.iter().enumerate() {
            weighted.column_mut(j).scale_mut(*wj);
        }
        Ok(Self {
            weighted,
            wavelengths,
            grid: integration_grid,
        })
    }

    /// Raw kernel values `k(r_j, l_i)` (trapezoid weights divided out).
    pub fn values(&self) -> DMatrix<f64> {
        let w = self.grid.trapezoid_weights();
        let mut v = self.weighted.clone();
        for (j, wj) in w.iter().enumerate() {
            v.column_mut(j).unscale_mut(*wj);
        }
        v
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn grid(&self) -> &RadiusGrid {
        &self.grid
    }

    pub fn assemble(&self, collocation: &RadiusGrid) -> Result<KernelMatrix> {
        let nodes: Vec<usize> = collocation
            .points()
            .iter()
            .map(|&c| {
                self.grid.position_of(c).ok_or_else(|| {
                    Error::DimensionError(format!("collocation node {c} is not an integration node"))
                })
            })
            .collect::<Result<_>>()?;
        if nodes[0] != 0 || *nodes.last().unwrap() != self.grid.len() - 1 {
            return Err(Error::DimensionError(
                "collocation grid must share the integration grid endpoints".into(),
            ));
        }
        let interior = collocation.len() - 2;
        let nl = self.wavelengths.len();
        if interior > nl {
            return Err(Error::DimensionError(format!(
                "model dimension {interior} exceeds the {nl} measurements"
            )));
        }
        let r = self.grid.points();
        let mut entries = DMatrix::zeros(nl, interior);
        for k in 1..=interior {
            let (left, centre, right) = (nodes[k - 1], nodes[k], nodes[k + 1]);
            for j in left + 1..right {
                let hat = if j <= centre {
                    (r[j] - r[left]) / (r[centre] - r[left])
                } else {
                    (r[right] - r[j]) / (r[right] - r[centre])
                };
                for i in 0..nl {
                    entries[(i, k - 1)] += hat * self.weighted[(i, j)];
                }
            }
        }
        KernelMatrix::new(entries, self.wavelengths.clone(), collocation.clone(), None)
    }
}

/// Galerkin collocation matrix `K[i, k] = int k(r, l_i) b_k(r) dr` with the
/// two boundary hat functions removed.
pub fn assemble_kernel_matrix<K: Kernel + ?Sized>(
    kernel: &K,
    wavelengths: &[f64],
    integration_grid: &RadiusGrid,
    collocation_grid: &RadiusGrid,
) -> Result<KernelMatrix> {
    KernelSamples::evaluate(kernel, wavelengths, integration_grid)?.assemble(collocation_grid)
}

/// Evaluates the hat-function expansion at `r`; zero at both endpoints.
pub fn evaluate_distribution(weights: &BasisWeights, grid: &RadiusGrid, r: f64) -> Result<f64> {
    if weights.len() + 2 != grid.len() {
        return Err(Error::DimensionError(format!(
            "{} weights for a {}-node grid",
            weights.len(),
            grid.len()
        )));
    }
    let (min, max) = (grid.r_min(), grid.r_max());
    if !(r >= min && r <= max) {
        return Err(Error::OutOfRange { r, min, max });
    }
    let c = grid.points();
    let node_value = |i: usize| {
        if i == 0 || i == c.len() - 1 {
            0.0
        } else {
            weights.as_vector()[i - 1]
        }
    };
    let hi = c.partition_point(|&x| x <= r).min(c.len() - 1);
    let lo = hi - 1;
    if r == c[hi] {
        return Ok(node_value(hi));
    }
    let t = (r - c[lo]) / (c[hi] - c[lo]);
    Ok(node_value(lo) * (1.0 - t) + node_value(hi) * t)
}

/// Samples the reconstruction on arbitrary radii inside the grid.
pub fn sample_distribution(weights: &BasisWeights, grid: &RadiusGrid, radii: &[f64]) -> Result<Vec<f64>> {
    radii.iter().map(|&r| evaluate_distribution(weights, grid, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn study_grid() -> RadiusGrid {
        RadiusGrid::uniform(0.01, 7.0, 300).unwrap()
    }

    #[test]
    fn collocation_identity_and_coarsest() {
        let g = study_grid();
        assert_eq!(build_collocation_grid(300, &g).unwrap(), g);
        let c = build_collocation_grid(3, &g).unwrap();
        let mid = 0.5 * (0.01 + 7.0);
        let nearest = g
            .points()
            .iter()
            .copied()
            .min_by(|a, b| (a - mid).abs().total_cmp(&(b - mid).abs()))
            .unwrap();
        assert_eq!(c.points(), &[0.01, nearest, 7.0]);
        assert!(build_collocation_grid(2, &g).is_err());
        assert!(build_collocation_grid(301, &g).is_err());
    }

    #[test]
    fn collocation_matches_exhaustive_scan() {
        let g = study_grid();
        let c = build_collocation_grid(10, &g).unwrap();
        let pre = linspace(0.01, 7.0, 10);
        let mut expected = Vec::new();
        for t in pre {
            let mut best = 0;
            for (i, &r) in g.points().iter().enumerate() {
                if (r - t).abs() < (g.points()[best] - t).abs() {
                    best = i;
                }
            }
            expected.push(g.points()[best]);
        }
        expected.dedup();
        assert_eq!(c.points(), expected.as_slice());
    }

    #[test]
    fn snapping_collapse_reports_too_coarse() {
        let g = RadiusGrid::new(vec![0.0, 1.0, 10.0]).unwrap();
        // the pre-grid midpoint 5.0 snaps to 1.0, the remaining nodes are distinct
        assert_eq!(build_collocation_grid(3, &g).unwrap().len(), 3);
        let g = RadiusGrid::new(vec![0.0, 0.1, 0.2, 10.0]).unwrap();
        // pre-grid 0, 3.33, 6.67, 10 -> 0, 0.2, 10, 10
        assert_eq!(build_collocation_grid(4, &g).unwrap().points(), &[0.0, 0.2, 10.0]);
    }

    #[test]
    fn constant_kernel_gives_hat_areas() {
        let g = study_grid();
        let c = build_collocation_grid(10, &g).unwrap();
        let one = |_: f64, _: f64| Ok(1.0);
        let wl = linspace(0.6, 1.0, 8);
        let k = assemble_kernel_matrix(&one, &wl, &g, &c).unwrap();
        assert_eq!(k.interior_dim(), 8);
        let cp = c.points();
        for col in 0..8 {
            let area = 0.5 * (cp[col + 2] - cp[col]);
            for row in 0..8 {
                assert_abs_diff_eq!(k.entries()[(row, col)], area, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn linear_kernel_matches_closed_form() {
        // int r b_k(r) dr over [a, c] with peak at b = (c - a)(a + b + c)/6
        let g = RadiusGrid::uniform(0.0, 3.0, 31).unwrap();
        let c = build_collocation_grid(7, &g).unwrap();
        let lin = |r: f64, _: f64| Ok(r);
        let k = assemble_kernel_matrix(&lin, &linspace(0.5, 1.0, 5), &g, &c).unwrap();
        let cp = c.points();
        for col in 0..k.interior_dim() {
            let (a, b, cc) = (cp[col], cp[col + 1], cp[col + 2]);
            let exact = (cc - a) * (a + b + cc) / 6.0;
            assert_abs_diff_eq!(k.entries()[(0, col)], exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn too_many_unknowns_is_rejected() {
        let g = study_grid();
        let c = build_collocation_grid(10, &g).unwrap();
        let one = |_: f64, _: f64| Ok(1.0);
        let err = assemble_kernel_matrix(&one, &[0.6, 0.7, 0.8], &g, &c).unwrap_err();
        assert!(matches!(err, Error::DimensionError(_)));
    }

    #[test]
    fn distribution_evaluation() {
        let grid = RadiusGrid::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let w = BasisWeights::from_slice(&[2.0, 4.0]);
        assert_eq!(evaluate_distribution(&w, &grid, 1.0).unwrap(), 2.0);
        assert_eq!(evaluate_distribution(&w, &grid, 2.0).unwrap(), 4.0);
        assert_eq!(evaluate_distribution(&w, &grid, 0.0).unwrap(), 0.0);
        assert_eq!(evaluate_distribution(&w, &grid, 3.0).unwrap(), 0.0);
        assert_abs_diff_eq!(evaluate_distribution(&w, &grid, 1.5).unwrap(), 3.0, epsilon = 1e-15);
        assert!(matches!(
            evaluate_distribution(&w, &grid, 3.1),
            Err(Error::OutOfRange { .. })
        ));
    }
}
