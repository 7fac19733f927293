//! Flag and config-file parsing.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use aerosol_retrieval::model_selection::{Method, RegularizerKind};
use aerosol_retrieval::orthant_mvn::DEFAULT_SAMPLES;
use aerosol_retrieval::simulation_study::{Family, Scale, DEFAULT_REPEATS};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::CliError;

pub const DATA_DIR_ENV: &str = "AEROSOL_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "aerosol",
    version,
    about = "Particle size distributions from multi-wavelength extinction spectra",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a noisy measurement from a model size distribution
    Simulate(Flags),
    /// Retrieve a size distribution for a known particle material
    Invert(Flags),
    /// Retrieve a size distribution and the volume fraction of a two-material mixture
    Invert2(Flags),
    /// Compare inversion methods on synthetic single-material data
    Study(Flags),
    /// Two-material study over a set of true volume fractions
    Study2(Flags),
}

/// Options shared by every command. Each may also come from the config file.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Flags {
    /// TOML file with default values for any of these options
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Measurement table `wavelength_um,mean_extinction,variance[,repeats]`
    #[arg(long)]
    pub measurement: Option<PathBuf>,
    /// Model distribution JSON: written by `simulate`, scored against by `invert`
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Particle material (built-in name or table in the data directory)
    #[arg(long)]
    pub material: Option<String>,
    /// Two materials `A,B`; retrieved fractions refer to A
    #[arg(long, value_delimiter = ',')]
    pub materials: Option<Vec<String>>,
    /// Ambient medium
    #[arg(long)]
    pub medium: Option<String>,
    /// constrained, morozov, unconstrained or bic
    #[arg(long)]
    pub method: Option<Method>,
    /// Regularizer: tikhonov, firstdiff or twomey
    #[arg(long)]
    pub reg: Option<RegularizerKind>,
    /// Discrepancy safety factors `a,b,...`
    #[arg(long, value_delimiter = ',')]
    pub tau_grid: Option<Vec<f64>>,
    /// Seed for noise draws and evidence integrals
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (stdout if omitted, except for `simulate`)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Study size: reduced or full
    #[arg(long)]
    pub scale: Option<Scale>,
    /// Noise standard deviation relative to the true extinction
    #[arg(long)]
    pub noise_fraction: Option<f64>,
    /// Size-distribution family for `simulate` (or the only family of a study)
    #[arg(long)]
    pub family: Option<Family>,
    /// Index into the family's 100-member parameter grid
    #[arg(long)]
    pub parameter: Option<usize>,
    /// True volume percentage of the first material for `simulate --materials`
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Noisy draws averaged by `simulate`
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Quasi-Monte Carlo points per evidence integral
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Worker threads for studies
    #[arg(long)]
    pub threads: Option<usize>,
    /// Directory with `<material>.csv` index tables
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Also write (r, n(r)) and (fraction, residual) curves as CSV
    #[arg(long)]
    #[serde(default)]
    pub emit_plot_data: bool,
}

macro_rules! prefer {
    ($flags:ident, $file:ident; $($field:ident),*) => {
        $( if $flags.$field.is_none() { $flags.$field = $file.$field.take(); } )*
    };
}

impl Flags {
    /// Fills unset options from `file`.
    pub fn merge(mut self, mut file: Flags) -> Flags {
        prefer!(self, file; measurement, truth, material, materials, medium, method, reg, tau_grid, seed, out,
            scale, noise_fraction, family, parameter, fraction, repeats, mc_samples, threads, data_dir);
        self.emit_plot_data |= file.emit_plot_data;
        self
    }

    pub fn load(path: &Path) -> Result<Flags, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    Invert,
    Invert2,
    Study,
    Study2,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::Simulate => "simulate",
            CommandKind::Invert => "invert",
            CommandKind::Invert2 => "invert2",
            CommandKind::Study => "study",
            CommandKind::Study2 => "study2",
        }
    }

    fn two_component(&self) -> bool {
        matches!(self, CommandKind::Invert2 | CommandKind::Study2)
    }
}

/// Fully resolved options of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: CommandKind,
    pub measurement: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub material: String,
    pub materials: Option<(String, String)>,
    pub medium: String,
    pub method: Option<Method>,
    pub reg_kind: Option<RegularizerKind>,
    pub tau_grid: Option<Vec<f64>>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub scale: Scale,
    pub noise_fraction: f64,
    pub family: Option<Family>,
    pub parameter: usize,
    pub fraction: Option<f64>,
    pub repeats: usize,
    pub mc_samples: usize,
    pub threads: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub emit_plot_data: bool,
}

impl RunConfig {
    pub fn reg_or_default(&self) -> RegularizerKind {
        self.reg_kind.unwrap_or(RegularizerKind::Tikhonov)
    }

    pub fn method_or_default(&self) -> Method {
        self.method.unwrap_or(Method::Constrained)
    }

    pub fn two_materials(&self) -> (String, String) {
        self.materials.clone().unwrap_or_else(|| ("H2O".into(), "CsI".into()))
    }
}

/// Parses `args` (including the program name); a `--config` file supplies
/// defaults that explicit flags override.
pub fn parse_config<I, T>(args: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(CliError::Clap)?;
    let (command, flags) = match cli.command {
        Command::Simulate(f) => (CommandKind::Simulate, f),
        Command::Invert(f) => (CommandKind::Invert, f),
        Command::Invert2(f) => (CommandKind::Invert2, f),
        Command::Study(f) => (CommandKind::Study, f),
        Command::Study2(f) => (CommandKind::Study2, f),
    };
    let flags = match &flags.config {
        Some(path) => {
            let file = Flags::load(path)?;
            flags.merge(file)
        }
        None => flags,
    };
    resolve(command, flags)
}

fn resolve(command: CommandKind, f: Flags) -> Result<RunConfig, CliError> {
    let materials = match f.materials {
        None => None,
        Some(list) if list.len() == 2 => Some((list[0].trim().to_string(), list[1].trim().to_string())),
        Some(list) => {
            return Err(CliError::Usage(format!("--materials takes exactly two names, got {}", list.len())));
        }
    };
    let mixed = command.two_component() || (command == CommandKind::Simulate && materials.is_some());
    let noise_fraction = f.noise_fraction.unwrap_or(if mixed { 0.05 } else { 0.30 });
    if !(0.0..1.0).contains(&noise_fraction) {
        return Err(CliError::Usage(format!("--noise-fraction {noise_fraction} must lie in [0, 1)")));
    }
    if let Some(grid) = &f.tau_grid {
        if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0)) {
            return Err(CliError::Usage("--tau-grid needs positive values".into()));
        }
    }
    if let Some(p) = f.fraction {
        if !(0.0..=100.0).contains(&p) {
            return Err(CliError::Usage(format!("--fraction {p} must be a percentage in [0, 100]")));
        }
    }
    let parameter = f.parameter.unwrap_or(0);
    if parameter >= 100 {
        return Err(CliError::Usage(format!("--parameter {parameter} must be below 100")));
    }
    if matches!(command, CommandKind::Invert | CommandKind::Invert2) && f.measurement.is_none() {
        return Err(CliError::Usage(format!("`{}` needs --measurement PATH", command.name())));
    }
    if let Some(path) = &f.measurement {
        if command != CommandKind::Simulate && !path.is_file() {
            return Err(CliError::Usage(format!("measurement file {} does not exist", path.display())));
        }
    }
    if command == CommandKind::Simulate && f.out.is_none() {
        return Err(CliError::Usage("`simulate` needs --out PATH for the measurement table".into()));
    }
    if command.two_component() && f.method.is_some_and(|m| m != Method::Constrained) {
        return Err(CliError::Usage("two-material commands only support --method constrained".into()));
    }
    let repeats = f.repeats.unwrap_or(DEFAULT_REPEATS);
    if repeats < 2 {
        return Err(CliError::Usage("--repeats must be at least 2".into()));
    }
    Ok(RunConfig {
        command,
        measurement: f.measurement,
        truth: f.truth,
        material: f.material.unwrap_or_else(|| "H2O".into()),
        materials,
        medium: f.medium.unwrap_or_else(|| "air".into()),
        method: f.method,
        reg_kind: f.reg,
        tau_grid: f.tau_grid,
        seed: f.seed.unwrap_or(0x5eed),
        out: f.out,
        scale: f.scale.unwrap_or(Scale::Reduced),
        noise_fraction,
        family: f.family,
        parameter,
        fraction: f.fraction,
        repeats,
        mc_samples: f.mc_samples.unwrap_or(DEFAULT_SAMPLES),
        threads: f.threads,
        data_dir: f.data_dir,
        emit_plot_data: f.emit_plot_data,
    })
}
