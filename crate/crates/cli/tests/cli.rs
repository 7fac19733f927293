use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aerosol_cli::config::DATA_DIR_ENV;
use aerosol_cli::record::{InversionRecord, OUTPUT_POINTS, RECORD_SCHEMA, STUDY_SCHEMA};
use aerosol_cli::{parse_config, CommandKind, EXIT_FAILURE, EXIT_NO_MODELS, EXIT_OK};
use aerosol_retrieval::model_selection::{Method, RegularizerKind};
use aerosol_retrieval::simulation_study::{Family, Scale};

fn aerosol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aerosol"))
        .args(args)
        .env_remove(DATA_DIR_ENV)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_record(path: &Path) -> (String, InversionRecord) {
    let text = std::fs::read_to_string(path).unwrap();
    let record = serde_json::from_str(&text).unwrap();
    (text, record)
}

fn write_measurement(dir: &Path, rows: &str) -> PathBuf {
    let path = dir.join("m.csv");
    std::fs::write(&path, format!("wavelength_um,mean_extinction,variance\n{rows}")).unwrap();
    path
}

#[test]
fn no_arguments_lists_commands() {
    let out = aerosol(&[]);
    assert_eq!(out.status.code(), Some(EXIT_FAILURE));
    let text = String::from_utf8_lossy(&out.stderr).to_string() + &String::from_utf8_lossy(&out.stdout);
    for cmd in ["simulate", "invert", "invert2", "study", "study2"] {
        assert!(text.contains(cmd), "{cmd} missing from usage");
    }
}

#[test]
fn defaults_are_filled_in() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_measurement(dir.path(), "1.0,1.0,0.1\n");
    let cfg = parse_config(["aerosol", "invert", "--measurement", path_str(&m), "--material", "H2O", "--reg", "twomey"])
        .unwrap();
    assert_eq!(cfg.command, CommandKind::Invert);
    assert_eq!(cfg.reg_kind, Some(RegularizerKind::Twomey));
    assert_eq!(cfg.method_or_default(), Method::Constrained);
    assert_eq!(cfg.medium, "air");
    assert_eq!(cfg.noise_fraction, 0.30);
    assert_eq!(cfg.scale, Scale::Reduced);
    assert_eq!(cfg.tau_grid, None);

    let cfg = parse_config(["aerosol", "study2"]).unwrap();
    assert_eq!(cfg.noise_fraction, 0.05);
    assert_eq!(cfg.two_materials(), ("H2O".to_string(), "CsI".to_string()));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(
        &file,
        "reg = \"firstdiff\"\nseed = 11\ntau-grid = [0.8, 0.9]\nfamily = \"lognormal\"\nscale = \"full\"\n",
    )
    .unwrap();
    let cfg = parse_config(["aerosol", "study", "--config", path_str(&file), "--reg", "twomey", "--family", "rrsb"])
        .unwrap();
    assert_eq!(cfg.reg_kind, Some(RegularizerKind::Twomey));
    assert_eq!(cfg.family, Some(Family::Rrsb));
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.tau_grid, Some(vec![0.8, 0.9]));
    assert_eq!(cfg.scale, Scale::Full);

    std::fs::write(&file, "colour = \"blue\"\n").unwrap();
    assert!(parse_config(["aerosol", "study", "--config", path_str(&file)]).is_err());
}

#[test]
fn invalid_usage_is_reported() {
    assert!(parse_config(["aerosol", "invert"]).is_err());
    assert!(parse_config(["aerosol", "invert", "--measurement", "/nonexistent.csv"]).is_err());
    assert!(parse_config(["aerosol", "study", "--reg", "ridge"]).is_err());
    assert!(parse_config(["aerosol", "study", "--noise-fraction", "1.5"]).is_err());
    assert!(parse_config(["aerosol", "invert2", "--method", "bic"]).is_err());
    assert!(parse_config(["aerosol", "study2", "--materials", "H2O"]).is_err());
    let out = aerosol(&["study", "--method", "ridge"]);
    assert_eq!(out.status.code(), Some(EXIT_FAILURE));
}

#[test]
fn simulate_then_invert_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let truth = dir.path().join("truth.json");
    let rec = dir.path().join("rec.json");
    let out = aerosol(&["simulate", "--out", path_str(&m), "--truth", path_str(&truth), "--seed", "4"]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let out = aerosol(&[
        "invert",
        "--measurement",
        path_str(&m),
        "--truth",
        path_str(&truth),
        "--out",
        path_str(&rec),
        "--emit-plot-data",
    ]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));

    let (text, record) = read_record(&rec);
    assert_eq!(record.schema, RECORD_SCHEMA);
    assert!(record.error.is_none());
    assert!(record.truth_l2_percent.unwrap() < 100.0);
    assert!((record.posterior_sum() - 1.0).abs() < 1e-12);
    assert_eq!(record.reconstruction.radius_um.len(), OUTPUT_POINTS);
    assert!(record.reconstruction.density.iter().all(|&v| v >= 0.0));
    assert!(record.reconstruction.density.iter().any(|&v| v > 0.0));

    // every number re-parses to the same bits and re-serializes to the same text
    let again = serde_json::to_string_pretty(&record).unwrap();
    assert_eq!(again.trim_end(), text.trim_end());
    let reparsed: InversionRecord = serde_json::from_str(&again).unwrap();
    assert_eq!(reparsed, record);
    let weights: Vec<u64> = record.candidates[0].weights.iter().map(|w| w.to_bits()).collect();
    let weights2: Vec<u64> = reparsed.candidates[0].weights.iter().map(|w| w.to_bits()).collect();
    assert_eq!(weights, weights2);

    let curve = std::fs::read_to_string(dir.path().join("rec.curve.csv")).unwrap();
    assert!(curve.starts_with("radius_um,density\n"));
    assert_eq!(curve.lines().count(), OUTPUT_POINTS + 1);
}

#[test]
fn every_method_writes_a_record() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    assert_eq!(aerosol(&["simulate", "--out", path_str(&m), "--family", "hedrih", "--parameter", "40"]).status.code(), Some(0));
    for method in ["morozov", "unconstrained", "bic"] {
        let rec = dir.path().join(format!("{method}.json"));
        let out = aerosol(&["invert", "--measurement", path_str(&m), "--method", method, "--out", path_str(&rec)]);
        assert_eq!(out.status.code(), Some(EXIT_OK), "{method}: {}", String::from_utf8_lossy(&out.stderr));
        let (_, record) = read_record(&rec);
        assert_eq!(record.method.to_string(), method);
        assert!((record.posterior_sum() - 1.0).abs() < 1e-12);
        assert!(record.reconstruction.density.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn weak_signal_exits_with_no_models() {
    let dir = tempfile::tempdir().unwrap();
    let rows: String = (0..48).map(|i| format!("{},1e-3,1.0\n", 0.6 + 0.05 * i as f64)).collect();
    let m = write_measurement(dir.path(), &rows);
    let rec = dir.path().join("rec.json");
    let out = aerosol(&["invert", "--measurement", path_str(&m), "--out", path_str(&rec)]);
    assert_eq!(out.status.code(), Some(EXIT_NO_MODELS));
    let (_, record) = read_record(&rec);
    assert_eq!(record.error.as_ref().unwrap().kind, "no_models");
    assert!(record.candidates.is_empty());
    assert_eq!(record.reconstruction.density, vec![0.0; OUTPUT_POINTS]);
}

#[test]
fn bad_input_exits_with_failure_and_error_object() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_measurement(dir.path(), "1.0,1.0,-2.0\n");
    let rec = dir.path().join("rec.json");
    let out = aerosol(&["invert", "--measurement", path_str(&m), "--out", path_str(&rec)]);
    assert_eq!(out.status.code(), Some(EXIT_FAILURE));
    let (_, record) = read_record(&rec);
    assert!(record.error.is_some());

    let out = aerosol(&["simulate", "--out", path_str(&dir.path().join("x.csv")), "--material", "Unobtainium"]);
    assert_eq!(out.status.code(), Some(EXIT_FAILURE));
}

#[test]
fn tables_come_from_the_data_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("glass.csv"), "wavelength_um,real,imag\n0.5,1.5,0.0\n4.0,1.5,0.0\n").unwrap();
    let m = dir.path().join("m.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_aerosol"))
        .args(["simulate", "--material", "Glass", "--out", path_str(&m)])
        .env(DATA_DIR_ENV, dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&m).unwrap();
    assert!(text.starts_with("wavelength_um,mean_extinction,variance,repeats"));
    assert_eq!(text.lines().count(), 49);
}

#[test]
fn two_material_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let rec = dir.path().join("rec.json");
    let out = aerosol(&[
        "simulate", "--out", path_str(&m), "--materials", "H2O,CsI", "--fraction", "67", "--family", "hedrih",
        "--parameter", "30", "--seed", "2",
    ]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let out = aerosol(&["invert2", "--measurement", path_str(&m), "--out", path_str(&rec), "--emit-plot-data"]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, record) = read_record(&rec);
    assert_eq!(record.materials, vec!["H2O", "CsI"]);
    let p = record.fraction.unwrap();
    assert!((p - 0.67).abs() < 0.1, "{p}");
    assert!((record.posterior_sum() - 1.0).abs() < 1e-12);
    let scan = std::fs::read_to_string(dir.path().join("rec.scan.csv")).unwrap();
    assert!(scan.starts_with("fraction,residual\n"));
    assert_eq!(scan.lines().count(), 202);
}

#[test]
fn study_report_has_every_section() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("study.json");
    let out = aerosol(&[
        "study", "--scale", "reduced", "--family", "hedrih", "--method", "morozov", "--out", path_str(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(doc["schema"], STUDY_SCHEMA);
    for key in ["config", "summaries", "runs", "total_seconds"] {
        assert!(!doc[key].is_null(), "{key} missing");
    }
    assert_eq!(doc["runs"].as_array().unwrap().len(), 30);
    let row = &doc["summaries"][0];
    for key in ["avg_l2", "worst_l2", "failures", "avg_seconds", "worst_seconds", "avg_dimension"] {
        assert!(row.get(key).is_some(), "{key} missing");
    }
    let table = std::fs::read_to_string(dir.path().join("study.summary.csv")).unwrap();
    assert!(table.starts_with("family,reg,method,runs,avg_l2_percent"));
    assert_eq!(table.lines().count(), 2);
}
