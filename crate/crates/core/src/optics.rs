//! Refractive indices, Lorentz-Lorenz mixing and Mie extinction.
//!
//! Indices follow the absorbing convention `m = n + i k` with `k >= 0`.
//! The extinction efficiency is the classical Bohren-Huffman series for a
//! homogeneous sphere in a non-absorbing host; only the real part of the
//! host index enters the size parameter.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Complex refractive index with positive real part and non-negative
/// imaginary (absorption) part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexIndex {
    re: f64,
    im: f64,
}

impl ComplexIndex {
    pub fn new(re: f64, im: f64) -> Result<Self> {
        if !(re > 0.0) || !(im >= 0.0) || !re.is_finite() || !im.is_finite() {
            return Err(Error::InvalidIndex { re, im });
        }
        Ok(Self { re, im })
    }

    pub fn real(re: f64) -> Result<Self> {
        Self::new(re, 0.0)
    }

    pub fn real_part(&self) -> f64 {
        self.re
    }

    pub fn imag_part(&self) -> f64 {
        self.im
    }

    pub fn as_complex(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }

    /// Lorentz-Lorenz polarizability `(m^2 - 1) / (m^2 + 2)`.
    pub fn polarizability(&self) -> Complex64 {
        let m2 = self.as_complex() * self.as_complex();
        (m2 - 1.0) / (m2 + 2.0)
    }
}

impl fmt::Display for ComplexIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}i", self.re, self.im)
    }
}

/// Tabulated refractive index of one material over a wavelength band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexTable {
    material: String,
    wavelengths: Vec<f64>,
    indices: Vec<ComplexIndex>,
}

const BUILTIN_WATER: &str = include_str!("../data/H2O.csv");
const BUILTIN_CSI: &str = include_str!("../data/CsI.csv");
const BUILTIN_AIR: &str = include_str!("../data/air.csv");

impl IndexTable {
    pub fn new(
        material: impl Into<String>,
        wavelengths: Vec<f64>,
        indices: Vec<ComplexIndex>,
    ) -> Result<Self> {
        if wavelengths.is_empty() || wavelengths.len() != indices.len() {
            return Err(Error::TableFormat(format!(
                "{} wavelengths but {} indices",
                wavelengths.len(),
                indices.len()
            )));
        }
        if wavelengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::TableFormat(
                "wavelengths must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            material: material.into(),
            wavelengths,
            indices,
        })
    }

    /// A wavelength-independent index valid on `[band.0, band.1]`.
    pub fn constant(material: impl Into<String>, index: ComplexIndex, band: (f64, f64)) -> Result<Self> {
        Self::new(material, vec![band.0, band.1], vec![index, index])
    }

    /// Parses `wavelength_um,real,imag` records. A single leading header
    /// line is skipped, as are blank lines and `#` comments.
    pub fn parse_csv(material: impl Into<String>, text: &str) -> Result<Self> {
        let mut wavelengths = Vec::new();
        let mut indices = Vec::new();
        let mut seen_record = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
            match parsed {
                Some(v) if v.len() == 3 => {
                    seen_record = true;
                    wavelengths.push(v[0]);
                    indices.push(ComplexIndex::new(v[1], v[2])?);
                }
                None if !seen_record && wavelengths.is_empty() => continue,
                _ => {
                    return Err(Error::TableFormat(format!(
                        "line {}: expected `wavelength_um,real,imag`, got `{}`",
                        lineno + 1,
                        line
                    )))
                }
            }
        }
        Self::new(material, wavelengths, indices)
    }

    pub fn load(material: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::TableFormat(format!("{}: {}", path.as_ref().display(), e))
        })?;
        Self::parse_csv(material, &text)
    }

    /// Tables shipped with the crate: `H2O` (alias `water`), `CsI`, `air`.
    pub fn builtin(name: &str) -> Result<Self> {
        let (canonical, text) = match name.to_ascii_lowercase().as_str() {
            "h2o" | "water" => ("H2O", BUILTIN_WATER),
            "csi" => ("CsI", BUILTIN_CSI),
            "air" => ("air", BUILTIN_AIR),
            _ => {
                return Err(Error::TableFormat(format!(
                    "no built-in index table named `{name}`"
                )))
            }
        };
        Self::parse_csv(canonical, text)
    }

    pub fn material(&self) -> &str {
        &self.material
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn indices(&self) -> &[ComplexIndex] {
        &self.indices
    }

    pub fn band(&self) -> (f64, f64) {
        (self.wavelengths[0], *self.wavelengths.last().unwrap())
    }

    pub fn interpolate(&self, l: f64) -> Result<ComplexIndex> {
        interpolate_index(self, l)
    }
}

/// Piecewise-linear interpolation of real and imaginary parts.
pub fn interpolate_index(table: &IndexTable, l: f64) -> Result<ComplexIndex> {
    let (min, max) = table.band();
    if !(l >= min && l <= max) {
        return Err(Error::OutOfBand {
            material: table.material.clone(),
            wavelength: l,
            min,
            max,
        });
    }
    let w = &table.wavelengths;
    // first node strictly greater than l
    let hi = w.partition_point(|&x| x <= l);
    if hi == 0 {
        return Ok(table.indices[0]);
    }
    let lo = hi - 1;
    if w[lo] == l || hi == w.len() {
        return Ok(table.indices[lo]);
    }
    let t = (l - w[lo]) / (w[hi] - w[lo]);
    let a = table.indices[lo];
    let b = table.indices[hi];
    ComplexIndex::new(a.re + t * (b.re - a.re), a.im + t * (b.im - a.im))
}

/// Two tabulated materials mixed by volume; `fraction_a` is the volume
/// fraction of `component_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedMaterial {
    pub component_a: IndexTable,
    pub component_b: IndexTable,
    fraction_a: f64,
}

impl MixedMaterial {
    pub fn new(component_a: IndexTable, component_b: IndexTable, fraction_a: f64) -> Result<Self> {
        check_fraction(fraction_a)?;
        Ok(Self {
            component_a,
            component_b,
            fraction_a,
        })
    }

    pub fn fraction_a(&self) -> f64 {
        self.fraction_a
    }

    pub fn fraction_b(&self) -> f64 {
        1.0 - self.fraction_a
    }

    pub fn index_at(&self, l: f64) -> Result<ComplexIndex> {
        lorentz_lorenz_mix(
            self.component_a.interpolate(l)?,
            self.component_b.interpolate(l)?,
            self.fraction_a,
        )
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidParameter(format!(
            "volume fraction {f} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Effective index of a two-component mixture by the Lorentz-Lorenz rule.
///
/// Solves `(m^2-1)/(m^2+2) = f1 L(m1) + (1-f1) L(m2)` for `m` and returns the
/// principal square root of `m^2 = (1 + 2L) / (1 - L)`.
pub fn lorentz_lorenz_mix(m1: ComplexIndex, m2: ComplexIndex, f1: f64) -> Result<ComplexIndex> {
    check_fraction(f1)?;
    if f1 == 1.0 {
        return Ok(m1);
    }
    if f1 == 0.0 || m1 == m2 {
        return Ok(m2);
    }
    let l = f1 * m1.polarizability() + (1.0 - f1) * m2.polarizability();
    let denom = Complex64::new(1.0, 0.0) - l;
    if denom.norm() < 1e-14 {
        return Err(Error::DegenerateMix);
    }
    let m = ((1.0 + 2.0 * l) / denom).sqrt();
    // passive mixtures have Im(m^2) >= 0; only round-off can push it below
    let im = if m.im < 0.0 && m.im > -1e-15 * m.norm() {
        0.0
    } else {
        m.im
    };
    ComplexIndex::new(m.re, im)
}

/// Number of Mie terms: `ceil(x + 4 x^(1/3) + 2)`.
pub fn mie_order(x: f64) -> usize {
    (x + 4.0 * x.cbrt() + 2.0).ceil() as usize
}

/// Mie extinction efficiency of a sphere of radius `r` at wavelength `l`
/// (both in micrometres).
pub fn mie_qext(m_med: ComplexIndex, m_part: ComplexIndex, r: f64, l: f64) -> Result<f64> {
    if !(r > 0.0) || !(l > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "radius {r} and wavelength {l} must be positive"
        )));
    }
    let x = 2.0 * PI * m_med.real_part() * r / l;
    let m = m_part.as_complex() / m_med.as_complex();
    mie_qext_series(m, x, mie_order(x))
}

/// Sums the extinction series with exactly `terms` terms.
pub fn mie_qext_series(m: Complex64, x: f64, terms: usize) -> Result<f64> {
    let non_convergent = || Error::NonConvergent { size_parameter: x };
    let mx = m * x;
    let nmx = (terms as f64).max(mx.norm()).ceil() as usize + 15;

    // logarithmic derivative D_n(mx), downward recurrence
    let mut d = vec![Complex64::new(0.0, 0.0); nmx + 1];
    for n in (1..=nmx).rev() {
        let nf = n as f64;
        d[n - 1] = nf / mx - 1.0 / (d[n] + nf / mx);
    }

    let (sin_x, cos_x) = x.sin_cos();
    let mut psi_prev2 = cos_x; // psi_{-1}
    let mut psi_prev = sin_x; // psi_0
    let mut chi_prev2 = -sin_x; // chi_{-1}
    let mut chi_prev = cos_x; // chi_0

    let mut sum = 0.0;
    for n in 1..=terms {
        let nf = n as f64;
        let psi = (2.0 * nf - 1.0) / x * psi_prev - psi_prev2;
        let chi = (2.0 * nf - 1.0) / x * chi_prev - chi_prev2;
        let xi = Complex64::new(psi, -chi);
        let xi_prev = Complex64::new(psi_prev, -chi_prev);

        let da = d[n] / m + nf / x;
        let db = d[n] * m + nf / x;
        let a = (da * psi - psi_prev) / (da * xi - xi_prev);
        let b = (db * psi - psi_prev) / (db * xi - xi_prev);
        let term = (2.0 * nf + 1.0) * (a.re + b.re);
        if !term.is_finite() {
            return Err(non_convergent());
        }
        sum += term;

        psi_prev2 = psi_prev;
        psi_prev = psi;
        chi_prev2 = chi_prev;
        chi_prev = chi;
    }
    let q = 2.0 / (x * x) * sum;
    if !q.is_finite() {
        return Err(non_convergent());
    }
    // round-off can leave a tiny negative value for vanishing contrast
    Ok(q.max(0.0))
}

/// Extinction cross-section kernel `k(r, l) = pi r^2 Q_ext` in square micrometres.
pub fn kernel_value(m_med: ComplexIndex, m_part: ComplexIndex, r: f64, l: f64) -> Result<f64> {
    Ok(PI * r * r * mie_qext(m_med, m_part, r, l)?)
}

/// Anything that yields kernel values `k(r, l)`.
pub trait Kernel: Sync {
    fn value(&self, r: f64, l: f64) -> Result<f64>;
}

impl<F> Kernel for F
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    fn value(&self, r: f64, l: f64) -> Result<f64> {
        self(r, l)
    }
}

/// Scattering material: either one tabulated substance or a volume mixture.
#[derive(Debug, Clone, PartialEq)]
pub enum Particle {
    Pure(IndexTable),
    Mixed(MixedMaterial),
}

impl Particle {
    pub fn index_at(&self, l: f64) -> Result<ComplexIndex> {
        match self {
            Particle::Pure(t) => t.interpolate(l),
            Particle::Mixed(m) => m.index_at(l),
        }
    }
}

/// Mie extinction kernel for particles suspended in a tabulated medium.
#[derive(Debug, Clone, PartialEq)]
pub struct MieKernel {
    pub medium: IndexTable,
    pub particle: Particle,
}

impl MieKernel {
    pub fn new(medium: IndexTable, particle: Particle) -> Self {
        Self { medium, particle }
    }

    pub fn pure(medium: IndexTable, particle: IndexTable) -> Self {
        Self::new(medium, Particle::Pure(particle))
    }
}

impl Kernel for MieKernel {
    fn value(&self, r: f64, l: f64) -> Result<f64> {
        kernel_value(self.medium.interpolate(l)?, self.particle.index_at(l)?, r, l)
    }
}

impl FromStr for ComplexIndex {
    type Err = Error;

    /// Accepts `re` or `re+imi` / `re,im`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidParameter(format!("cannot parse refractive index `{s}`"));
        if let Some((re, im)) = s.split_once(',') {
            return ComplexIndex::new(
                re.trim().parse().map_err(|_| bad())?,
                im.trim().parse().map_err(|_| bad())?,
            );
        }
        if let Some(body) = s.strip_suffix('i') {
            let split = body.rfind('+').filter(|&p| p > 0).ok_or_else(bad)?;
            return ComplexIndex::new(
                body[..split].parse().map_err(|_| bad())?,
                body[split + 1..].parse().map_err(|_| bad())?,
            );
        }
        ComplexIndex::real(s.parse().map_err(|_| bad())?)
    }
}
