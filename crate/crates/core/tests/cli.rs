use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::DMatrix;
use svi_glmm::cli::{ingest_csv, ModelConfig};
use svi_glmm::data_model::Family;

fn epilepsy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/epilepsy.csv")
}

fn epilepsy_config(model_two: bool) -> ModelConfig {
    let mut c = ModelConfig::new("seizures", "patient", Family::Poisson);
    c.fixed = ["base", "trt", "base_trt", "age", "visit"].iter().map(|s| s.to_string()).collect();
    if model_two {
        c.random = vec!["visit".into()];
    }
    c
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_svi-glmm"))
}

fn write_config(dir: &Path, config: &ModelConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

#[test]
fn patient_one_design_rows() {
    let text = std::fs::read_to_string(epilepsy()).unwrap();
    let mut ages: Vec<(String, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[4].parse::<f64>().unwrap().ln())
        })
        .collect();
    ages.dedup();
    let mean_log_age = ages.iter().map(|a| a.1).sum::<f64>() / ages.len() as f64;
    assert_eq!(ages.len(), 59);

    let base = (11.0f64 / 4.0).ln();
    let age = 31.0f64.ln() - mean_log_age;
    let visits = [-0.3, -0.1, 0.1, 0.3];

    let one = ingest_csv(&epilepsy(), &epilepsy_config(false)).unwrap();
    let c = &one.clusters[0];
    assert_eq!(c.id, "1");
    assert_eq!(one.n(), 59);
    for (j, v) in visits.iter().enumerate() {
        let expected = [1.0, base, 0.0, 0.0, age, *v];
        for (k, e) in expected.iter().enumerate() {
            assert!((c.x[(j, k)] - e).abs() < 1e-12, "row {j} column {k}: {} vs {e}", c.x[(j, k)]);
        }
    }
    assert_eq!(c.z, DMatrix::from_element(4, 1, 1.0));

    let two = ingest_csv(&epilepsy(), &epilepsy_config(true)).unwrap();
    let z = &two.clusters[0].z;
    assert_eq!(z.ncols(), 2);
    for (j, v) in visits.iter().enumerate() {
        assert_eq!(z[(j, 0)], 1.0);
        assert!((z[(j, 1)] - v).abs() < 1e-15);
    }
}

#[test]
fn fit_diagnose_and_trace_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &epilepsy_config(false));
    let fit = dir.path().join("fit.json");
    let status = bin()
        .args(["fit", "--data"])
        .arg(epilepsy())
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&fit)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let report = dir.path().join("report.json");
    let status = bin()
        .args(["diagnose", "--fit"])
        .arg(&fit)
        .arg("--data")
        .arg(epilepsy())
        .arg("--out")
        .arg(&report)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(report.exists() && report.with_extension("csv").exists());

    let trace = dir.path().join("trace.csv");
    let status = bin().args(["trace", "--fit"]).arg(&fit).arg("--out").arg(&trace).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let header = std::fs::read_to_string(&trace).unwrap();
    assert!(header.starts_with("sweep,lower_bound,step_size,elapsed_secs,stochastic"));

    let sim = dir.path().join("sim.csv");
    let status = bin()
        .args(["simulate", "--fit"])
        .arg(&fit)
        .arg("--data")
        .arg(epilepsy())
        .arg("--out")
        .arg(&sim)
        .args(["--replicates", "2", "--seed", "3"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let rows = std::fs::read_to_string(&sim).unwrap().lines().count();
    assert_eq!(rows, 1 + 2 * 236);
}

#[test]
fn stochastic_fits_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &epilepsy_config(false));
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = bin()
            .args(["fit", "--stochastic", "--batch-size", "10", "--seed", "17", "--data"])
            .arg(epilepsy())
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
        v["elapsed_secs"] = 0.into();
        for t in v["trace"].as_array_mut().unwrap() {
            t["elapsed_secs"] = 0.into();
        }
        v
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(64));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));

    let missing = bin()
        .args(["fit", "--data", "/nonexistent.csv", "--config"])
        .arg(write_config(dir.path(), &epilepsy_config(false)))
        .arg("--out")
        .arg(dir.path().join("x.json"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(65));

    let mut bad = epilepsy_config(false);
    bad.fit.step_alpha = 0.2;
    let bad_config = write_config(dir.path(), &bad);
    let out = bin()
        .args(["fit", "--data"])
        .arg(epilepsy())
        .arg("--config")
        .arg(bad_config)
        .arg("--out")
        .arg(dir.path().join("y.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(64));

    let mut wrong = epilepsy_config(false);
    wrong.response = "no_such_column".into();
    let out = bin()
        .args(["fit", "--data"])
        .arg(epilepsy())
        .arg("--config")
        .arg(write_config(dir.path(), &wrong))
        .arg("--out")
        .arg(dir.path().join("z.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(65));
}
