//! Command-line front end: `simulate`, `invert`, `invert2`, `study`, `study2`.

pub mod config;
pub mod io;
pub mod record;

use std::ffi::OsString;
use std::path::Path;
use std::time::Instant;

use aerosol_retrieval::discretization::{BasisWeights, RadiusGrid};
use aerosol_retrieval::model_selection::{invert, InversionSettings, Method};
use aerosol_retrieval::optics::{IndexTable, MieKernel, MixedMaterial, Particle};
use aerosol_retrieval::orthant_mvn::MonteCarlo;
use aerosol_retrieval::simulation_study::{
    default_parameter_grid, integration_grid, relative_l2_error, run_study, run_two_component_study,
    simulate_measurement, study_wavelengths, forward_grid, Family, ForwardModel, KernelCache, SizeDistribution,
    StudyConfig, TwoComponentStudyConfig,
};
use aerosol_retrieval::two_component::{
    invert_two_component, KernelFamily, TwoComponentSettings, DEFAULT_ANCHORS, DEFAULT_FRACTIONS,
};
use aerosol_retrieval::Error;

pub use config::{parse_config, CommandKind, RunConfig};
use record::{
    fraction_rows, method_rows, CandidateRecord, Diagnostics, ErrorRecord, InversionRecord, Reconstruction,
    StudyDocument, TwoComponentStudyDocument, RECORD_SCHEMA, STUDY2_SCHEMA, STUDY_SCHEMA,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NO_MODELS: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Clap(clap::Error),
    Usage(String),
    Input(String),
    Core(Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Clap(_) | CliError::Usage(_) => "usage",
            CliError::Input(_) => "input",
            CliError::Core(Error::NoModels) => "no_models",
            CliError::Core(_) => "retrieval",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Clap(e) if !e.use_stderr() => EXIT_OK,
            CliError::Core(Error::NoModels) => EXIT_NO_MODELS,
            _ => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Clap(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

/// Parses and runs one invocation, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let config = match parse_config(args) {
        Ok(c) => c,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            return CliError::Clap(e).exit_code();
        }
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    match run(&config) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("aerosol {}: {e}", config.command.name());
            e.exit_code()
        }
    }
}

pub fn run(config: &RunConfig) -> Result<(), CliError> {
    match config.command {
        CommandKind::Simulate => simulate(config),
        CommandKind::Invert => invert_single(config),
        CommandKind::Invert2 => invert_mixture(config),
        CommandKind::Study => study(config),
        CommandKind::Study2 => study_mixture(config),
    }
}

fn table(config: &RunConfig, name: &str) -> Result<IndexTable, CliError> {
    io::resolve_table(name, config.data_dir.as_deref())
}

fn monte_carlo(config: &RunConfig) -> Result<MonteCarlo, CliError> {
    let mc = MonteCarlo::new(config.mc_samples, config.seed);
    if config.mc_samples < aerosol_retrieval::orthant_mvn::MIN_SAMPLES {
        return Err(CliError::Usage(format!(
            "--mc-samples must be at least {}",
            aerosol_retrieval::orthant_mvn::MIN_SAMPLES
        )));
    }
    Ok(mc)
}

fn simulate(config: &RunConfig) -> Result<(), CliError> {
    let medium = table(config, &config.medium)?;
    let family = config.family.unwrap_or(Family::LogNormal);
    let truth = default_parameter_grid(family)?[config.parameter];
    let particle = match &config.materials {
        Some((a, b)) => {
            let p = config.fraction.unwrap_or(100.0) / 100.0;
            Particle::Mixed(MixedMaterial::new(table(config, a)?, table(config, b)?, p)?)
        }
        None => Particle::Pure(table(config, &config.material)?),
    };
    let wavelengths = study_wavelengths();
    let forward = ForwardModel::new(&MieKernel::new(medium, particle), &wavelengths, &forward_grid())?;
    let e = forward.apply(&truth);
    let meas = simulate_measurement(&e, &wavelengths, config.noise_fraction, config.repeats, config.seed)?;
    let out = config.out.as_deref().expect("checked while parsing");
    io::write_measurement(out, &meas)?;
    if let Some(path) = &config.truth {
        io::write_json(Some(path), &truth)?;
    }
    Ok(())
}

fn settings_for(config: &RunConfig) -> Result<InversionSettings, CliError> {
    let mut s = InversionSettings {
        reg_kind: config.reg_or_default(),
        mc: monte_carlo(config)?,
        ..InversionSettings::default()
    };
    if let Some(grid) = &config.tau_grid {
        s.tau_grid = grid.clone();
    }
    Ok(s)
}

fn blank_record(config: &RunConfig, method: Method, materials: Vec<String>) -> InversionRecord {
    InversionRecord {
        schema: RECORD_SCHEMA.to_string(),
        command: config.command.name().to_string(),
        method,
        reg_kind: config.reg_or_default(),
        materials,
        medium: config.medium.clone(),
        fraction: None,
        candidates: Vec::new(),
        reconstruction: Reconstruction::zero(),
        diagnostics: Diagnostics::default(),
        truth_l2_percent: None,
        error: None,
    }
}

/// Relative L2 error against `--truth`; a missing reconstruction counts as `n = 0`.
fn truth_error(config: &RunConfig, fit: Option<(&BasisWeights, &RadiusGrid)>) -> Result<Option<f64>, CliError> {
    let Some(path) = &config.truth else { return Ok(None) };
    let truth: SizeDistribution = io::read_json(path)?;
    Ok(Some(match fit {
        Some((w, g)) => relative_l2_error(w, g, &truth)?,
        None => 100.0,
    }))
}

/// Writes the record (also for failed inversions) and passes `outcome` on.
fn finish(config: &RunConfig, mut record: InversionRecord, outcome: Result<(), CliError>) -> Result<(), CliError> {
    if let Err(e) = &outcome {
        record.error = Some(ErrorRecord {
            kind: e.kind().to_string(),
            message: e.to_string(),
        });
    }
    let out = config.out.as_deref();
    io::write_json(out, &record)?;
    if config.emit_plot_data {
        if let Some(out) = out {
            let curve: Vec<(f64, f64)> = record
                .reconstruction
                .radius_um
                .iter()
                .copied()
                .zip(record.reconstruction.density.iter().copied())
                .collect();
            write_pairs(&io::sidecar(out, "curve"), ("radius_um", "density"), &curve)?;
            if let Some(res) = &record.diagnostics.fraction_residuals {
                let n = res.len();
                let scan: Vec<(f64, f64)> =
                    res.iter().enumerate().map(|(i, &r)| (i as f64 / (n - 1).max(1) as f64, r)).collect();
                write_pairs(&io::sidecar(out, "scan"), ("fraction", "residual"), &scan)?;
            }
        }
    }
    outcome
}

fn write_pairs(path: &Path, header: (&str, &str), rows: &[(f64, f64)]) -> Result<(), CliError> {
    let mut text = format!("{},{}\n", header.0, header.1);
    for (a, b) in rows {
        text.push_str(&format!("{a},{b}\n"));
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn invert_single(config: &RunConfig) -> Result<(), CliError> {
    let mut record = blank_record(config, config.method_or_default(), vec![config.material.clone()]);
    let outcome = fill_single(config, &mut record);
    finish(config, record, outcome)
}

fn fill_single(config: &RunConfig, record: &mut InversionRecord) -> Result<(), CliError> {
    let meas = io::read_measurement(config.measurement.as_deref().expect("checked while parsing"))?;
    let settings = settings_for(config)?;
    let kernel = MieKernel::pure(table(config, &config.medium)?, table(config, &config.material)?);
    let mut cache = KernelCache::new(&kernel, &meas.wavelengths, &integration_grid())?;
    let t = Instant::now();
    let result = invert(&meas, &settings, record.method, |n| cache.level(n));
    record.diagnostics.seconds = t.elapsed().as_secs_f64();
    let inv = match result {
        Ok(inv) => inv,
        Err(e) => {
            record.truth_l2_percent = truth_error(config, None)?;
            return Err(e.into());
        }
    };
    record.diagnostics.delta_sq = Some(inv.delta_sq);
    let (w, k) = inv.best();
    record.reconstruction = Reconstruction::sample(w, k.collocation())?;
    record.diagnostics.n_col = Some(k.collocation().len());
    match &inv.bic {
        Some(b) => {
            record.candidates = vec![CandidateRecord::from_weights(&b.weights, b.kernel.collocation())];
            record.diagnostics.bic_scores = Some(b.scores.clone());
        }
        None => {
            record.candidates = inv.ranked.iter().map(CandidateRecord::from_candidate).collect();
            record.diagnostics.residual_sq = Some(inv.ranked[0].residual_sq);
        }
    }
    record.truth_l2_percent = truth_error(config, Some((w, k.collocation())))?;
    Ok(())
}

fn invert_mixture(config: &RunConfig) -> Result<(), CliError> {
    let (a, b) = config.two_materials();
    let mut record = blank_record(config, Method::Constrained, vec![a, b]);
    let outcome = fill_mixture(config, &mut record);
    if outcome.is_err() {
        record.fraction = Some(0.5);
    }
    finish(config, record, outcome)
}

fn fill_mixture(config: &RunConfig, record: &mut InversionRecord) -> Result<(), CliError> {
    let meas = io::read_measurement(config.measurement.as_deref().expect("checked while parsing"))?;
    let mut settings = TwoComponentSettings {
        reg_kind: config.reg_or_default(),
        mc: monte_carlo(config)?,
        ..TwoComponentSettings::default()
    };
    if let Some(grid) = &config.tau_grid {
        settings.tau_grid = grid.clone();
    }
    let t = Instant::now();
    let family = KernelFamily::build(
        &table(config, &record.materials[0])?,
        &table(config, &record.materials[1])?,
        &table(config, &config.medium)?,
        &meas.wavelengths,
        &integration_grid(),
        DEFAULT_ANCHORS,
        DEFAULT_FRACTIONS,
    )?;
    let result = invert_two_component(&family, &meas, &settings);
    record.diagnostics.seconds = t.elapsed().as_secs_f64();
    let inv = match result {
        Ok(inv) => inv,
        Err(e) => {
            record.truth_l2_percent = truth_error(config, None)?;
            return Err(e.into());
        }
    };
    let best = &inv.ranked[0];
    record.fraction = Some(inv.fraction());
    record.reconstruction = Reconstruction::sample(&best.weights, best.kernel.collocation())?;
    record.candidates = inv.ranked.iter().map(CandidateRecord::from_candidate).collect();
    record.diagnostics.delta_sq = Some(inv.delta_sq);
    record.diagnostics.n_col = Some(inv.n_col);
    record.diagnostics.residual_sq = Some(best.residual_sq);
    record.diagnostics.used_fallback_tau_grid = Some(inv.used_fallback);
    record.diagnostics.fraction_residuals = Some(inv.scan.residuals.clone());
    record.truth_l2_percent = truth_error(config, Some((&best.weights, best.kernel.collocation())))?;
    Ok(())
}

fn study(config: &RunConfig) -> Result<(), CliError> {
    let mut sc = StudyConfig::new(config.scale);
    if let Some(f) = config.family {
        sc.families = vec![f];
    }
    if let Some(m) = config.method {
        sc.methods = vec![m];
    }
    if let Some(r) = config.reg_kind {
        sc.reg_kinds = vec![r];
    }
    if let Some(grid) = &config.tau_grid {
        sc.tau_grid = grid.clone();
    }
    if let Some(t) = config.threads {
        sc.threads = t;
    }
    sc.noise_fraction = config.noise_fraction;
    sc.seed = config.seed;
    sc.mc = monte_carlo(config)?;
    let report = run_study(&sc, &table(config, &config.material)?, &table(config, &config.medium)?)?;
    let rows = method_rows(&report);
    let doc = StudyDocument {
        schema: STUDY_SCHEMA.to_string(),
        report,
    };
    io::write_json(config.out.as_deref(), &doc)?;
    if let Some(out) = &config.out {
        io::write_csv(&io::sidecar(out, "summary"), &rows)?;
    }
    Ok(())
}

fn study_mixture(config: &RunConfig) -> Result<(), CliError> {
    let mut sc = TwoComponentStudyConfig::new(config.scale);
    if let Some(f) = config.family {
        sc.families = vec![f];
    }
    if let Some(r) = config.reg_kind {
        sc.reg_kinds = vec![r];
    }
    if let Some(grid) = &config.tau_grid {
        sc.tau_grid = grid.clone();
    }
    if let Some(t) = config.threads {
        sc.threads = t;
    }
    sc.noise_fraction = config.noise_fraction;
    sc.seed = config.seed;
    sc.mc = monte_carlo(config)?;
    let (a, b) = config.two_materials();
    let report = run_two_component_study(
        &sc,
        &table(config, &a)?,
        &table(config, &b)?,
        &table(config, &config.medium)?,
    )?;
    let rows = fraction_rows(&report);
    let doc = TwoComponentStudyDocument {
        schema: STUDY2_SCHEMA.to_string(),
        report,
    };
    io::write_json(config.out.as_deref(), &doc)?;
    if let Some(out) = &config.out {
        io::write_csv(&io::sidecar(out, "summary"), &rows)?;
    }
    Ok(())
}
