//! Persisted result documents.

use aerosol_retrieval::discretization::{linspace, sample_distribution, BasisWeights, RadiusGrid};
use aerosol_retrieval::model_selection::{Method, ModelCandidate, RegularizerKind};
use aerosol_retrieval::simulation_study::{StudyReport, TwoComponentStudyReport, R_MAX, R_MIN};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RECORD_SCHEMA: &str = "aerosol-retrieval/inversion-record/v1";
pub const STUDY_SCHEMA: &str = "aerosol-retrieval/study-report/v1";
pub const STUDY2_SCHEMA: &str = "aerosol-retrieval/two-component-study-report/v1";
pub const OUTPUT_POINTS: usize = 200;

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub n_col: usize,
    pub dimension: usize,
    /// Collocation nodes; the weights belong to the interior ones.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub fraction: Option<f64>,
    pub posterior: f64,
    pub log_evidence: Option<f64>,
    pub log_evidence_error: Option<f64>,
    pub residual_sq: Option<f64>,
}

impl CandidateRecord {
    pub fn from_candidate(c: &ModelCandidate) -> Self {
        let nodes = c.kernel.collocation().points().to_vec();
        Self {
            n_col: nodes.len(),
            dimension: c.dim(),
            nodes,
            weights: c.weights.as_vector().iter().copied().collect(),
            gamma: finite(c.gamma),
            tau: finite(c.tau),
            fraction: c.fraction,
            posterior: c.posterior,
            log_evidence: finite(c.log_marginal),
            log_evidence_error: finite(c.log_marginal_error),
            residual_sq: finite(c.residual_sq),
        }
    }

    pub fn from_weights(weights: &BasisWeights, grid: &RadiusGrid) -> Self {
        Self {
            n_col: grid.len(),
            dimension: weights.len(),
            nodes: grid.points().to_vec(),
            weights: weights.as_vector().iter().copied().collect(),
            gamma: None,
            tau: None,
            fraction: None,
            posterior: 1.0,
            log_evidence: None,
            log_evidence_error: None,
            residual_sq: None,
        }
    }
}

/// The chosen reconstruction on the output radius grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub radius_um: Vec<f64>,
    pub density: Vec<f64>,
}

impl Reconstruction {
    pub fn radii() -> Vec<f64> {
        linspace(R_MIN, R_MAX, OUTPUT_POINTS)
    }

    pub fn zero() -> Self {
        Self {
            radius_um: Self::radii(),
            density: vec![0.0; OUTPUT_POINTS],
        }
    }

    /// Samples the expansion; negative values of unconstrained fits are cut at zero.
    pub fn sample(weights: &BasisWeights, grid: &RadiusGrid) -> Result<Self, CliError> {
        let radius_um = Self::radii();
        let density = sample_distribution(weights, grid, &radius_um)?
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        Ok(Self { radius_um, density })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub delta_sq: Option<f64>,
    pub n_col: Option<usize>,
    pub residual_sq: Option<f64>,
    pub used_fallback_tau_grid: Option<bool>,
    pub fraction_residuals: Option<Vec<f64>>,
    pub bic_scores: Option<Vec<(usize, f64)>>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionRecord {
    pub schema: String,
    pub command: String,
    pub method: Method,
    pub reg_kind: RegularizerKind,
    pub materials: Vec<String>,
    pub medium: String,
    /// Volume fraction of the first material (two-material inversions).
    pub fraction: Option<f64>,
    pub candidates: Vec<CandidateRecord>,
    pub reconstruction: Reconstruction,
    pub diagnostics: Diagnostics,
    pub truth_l2_percent: Option<f64>,
    pub error: Option<ErrorRecord>,
}

impl InversionRecord {
    pub fn posterior_sum(&self) -> f64 {
        self.candidates.iter().map(|c| c.posterior).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDocument {
    pub schema: String,
    #[serde(flatten)]
    pub report: StudyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoComponentStudyDocument {
    pub schema: String,
    #[serde(flatten)]
    pub report: TwoComponentStudyReport,
}

/// One row of the per-method table.
#[derive(Debug, Serialize)]
pub struct MethodRow {
    pub family: String,
    pub reg: String,
    pub method: String,
    pub runs: usize,
    pub avg_l2_percent: Option<f64>,
    pub worst_l2_percent: Option<f64>,
    pub failures: usize,
    pub avg_seconds: Option<f64>,
    pub worst_seconds: f64,
    pub avg_dimension: Option<f64>,
}

pub fn method_rows(report: &StudyReport) -> Vec<MethodRow> {
    report
        .summaries
        .iter()
        .map(|s| MethodRow {
            family: s.family.to_string(),
            reg: s.reg_kind.to_string(),
            method: s.method.to_string(),
            runs: s.runs,
            avg_l2_percent: s.avg_l2,
            worst_l2_percent: s.worst_l2,
            failures: s.failures,
            avg_seconds: s.avg_seconds,
            worst_seconds: s.worst_seconds,
            avg_dimension: s.avg_dimension,
        })
        .collect()
}

/// One row of the per-fraction table.
#[derive(Debug, Serialize)]
pub struct FractionRow {
    pub family: String,
    pub reg: String,
    pub true_fraction_percent: f64,
    pub runs: usize,
    pub avg_l2_percent: Option<f64>,
    pub worst_l2_percent: Option<f64>,
    pub avg_deviation_percent: Option<f64>,
    pub worst_deviation_percent: Option<f64>,
    pub l2_failures: usize,
    pub fraction_failures: usize,
    pub no_model_failures: usize,
    pub avg_seconds: Option<f64>,
    pub worst_seconds: f64,
    pub avg_dimension: Option<f64>,
}

pub fn fraction_rows(report: &TwoComponentStudyReport) -> Vec<FractionRow> {
    report
        .summaries
        .iter()
        .map(|s| FractionRow {
            family: s.family.to_string(),
            reg: s.reg_kind.to_string(),
            true_fraction_percent: s.true_fraction_percent,
            runs: s.runs,
            avg_l2_percent: s.avg_l2,
            worst_l2_percent: s.worst_l2,
            avg_deviation_percent: s.avg_deviation,
            worst_deviation_percent: s.worst_deviation,
            l2_failures: s.l2_failures,
            fraction_failures: s.fraction_failures,
            no_model_failures: s.no_model_failures,
            avg_seconds: s.avg_seconds,
            worst_seconds: s.worst_seconds,
            avg_dimension: s.avg_dimension,
        })
        .collect()
}
