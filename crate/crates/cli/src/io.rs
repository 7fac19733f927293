//! Measurement tables, index-table lookup and JSON/CSV output.

use std::fs::File;
use std::path::{Path, PathBuf};

use aerosol_retrieval::model_selection::Measurement;
use aerosol_retrieval::optics::IndexTable;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
struct MeasurementRow {
    wavelength_um: f64,
    mean_extinction: f64,
    variance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    repeats: Option<usize>,
}

/// Reads `wavelength_um,mean_extinction,variance[,repeats]`. `variance` is
/// the spread of one measurement; `repeats` (default 1) is how many were
/// averaged into the mean.
pub fn read_measurement(path: &Path) -> Result<Measurement, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let rows = reader
        .deserialize::<MeasurementRow>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(CliError::Input(format!("{}: no measurement rows", path.display())));
    }
    let repeats = rows[0].repeats.unwrap_or(1);
    if rows.iter().any(|r| r.repeats.unwrap_or(1) != repeats) || repeats == 0 {
        return Err(CliError::Input(format!(
            "{}: repeats must be a positive count shared by all rows",
            path.display()
        )));
    }
    Ok(Measurement::new(
        rows.iter().map(|r| r.wavelength_um).collect(),
        rows.iter().map(|r| r.mean_extinction).collect(),
        rows.iter().map(|r| r.variance).collect(),
        repeats,
    )?)
}

pub fn write_measurement(path: &Path, meas: &Measurement) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    for i in 0..meas.len() {
        writer
            .serialize(MeasurementRow {
                wavelength_um: meas.wavelengths[i],
                mean_extinction: meas.mean_extinction[i],
                variance: meas.variance[i],
                repeats: Some(meas.repeats),
            })
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

/// `name` as a path, then `<dir>/<name>.csv` (case-insensitive), then the
/// built-in tables.
pub fn resolve_table(name: &str, data_dir: Option<&Path>) -> Result<IndexTable, CliError> {
    let direct = Path::new(name);
    if direct.extension().is_some_and(|e| e == "csv") && direct.is_file() {
        let stem = direct.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(IndexTable::load(stem, direct)?);
    }
    if let Some(dir) = data_dir {
        if let Some(path) = find_table(dir, name) {
            return Ok(IndexTable::load(name, path)?);
        }
    }
    IndexTable::builtin(name).map_err(|_| {
        CliError::Input(match data_dir {
            Some(dir) => format!("no index table for `{name}` in {} and no built-in of that name", dir.display()),
            None => format!("no built-in index table `{name}`; set --data-dir or the data directory variable"),
        })
    })
}

fn find_table(dir: &Path, name: &str) -> Option<PathBuf> {
    let exact = dir.join(format!("{name}.csv"));
    if exact.is_file() {
        return Some(exact);
    }
    let wanted = format!("{}.csv", name.to_ascii_lowercase());
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.file_name().is_some_and(|f| f.to_string_lossy().to_ascii_lowercase() == wanted))
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| CliError::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Writes a header and rows of plain values.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

/// `out.json` -> `out.<suffix>.csv`.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(format!("{suffix}.csv"))
}
