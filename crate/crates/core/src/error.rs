use thiserror::Error;

/// Errors raised by the retrieval pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("wavelength {wavelength} um outside table range [{min}, {max}] for {material}")]
    OutOfBand {
        material: String,
        wavelength: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid refractive index {re}+{im}i")]
    InvalidIndex { re: f64, im: f64 },

    #[error("malformed index table: {0}")]
    TableFormat(String),

    #[error("Lorentz-Lorenz mix is degenerate (polarizability sum equals one)")]
    DegenerateMix,

    #[error("Mie series did not converge for x = {size_parameter}")]
    NonConvergent { size_parameter: f64 },

    #[error("collocation grid collapsed to {points} points after snapping")]
    GridTooCoarse { points: usize },

    #[error("dimension mismatch: {0}")]
    DimensionError(String),

    #[error("radius {r} outside [{min}, {max}]")]
    OutOfRange { r: f64, min: f64, max: f64 },

    #[error("active-set solver exceeded {0} iterations")]
    MaxIterations(usize),

    #[error("matrix is not positive definite")]
    IllConditioned,

    #[error("discrepancy target {target} outside attainable range [{lower}, {upper})")]
    TargetOutOfRange { target: f64, lower: f64, upper: f64 },

    #[error("residual at gamma = {gamma_max} still below target {target}")]
    BracketFailure { gamma_max: f64, target: f64 },

    #[error("Cholesky factorization failed")]
    CholeskyFailure,

    #[error("no admissible models at any discretization level")]
    NoModels,

    #[error("candidate list is empty")]
    EmptyCandidates,

    #[error("root bracketing failed: {0}")]
    RootFailure(String),

    #[error("reference distribution has zero norm")]
    ZeroTruth,

    #[error("non-positive intensity at index {0}")]
    NonPositiveIntensity(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
