use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

fn gkrls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gkrls"))
        .args(args)
        .env_remove("GKRLS_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas").join(name);
    let s: Value = serde_json::from_str(&std::fs::read_to_string(&path).expect("schema file")).expect("schema json");
    jsonschema::validator_for(&s).expect("valid schema")
}

fn assert_valid(schema_name: &str, v: &Value) {
    let val = schema(schema_name);
    let errors: Vec<String> = val.iter_errors(v).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("json output")).expect("parse json")
}

fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().expect("header").iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.expect("record").iter().map(String::from).collect())
        .collect();
    (header, rows)
}

/// y = 1 + 2·x1 − x2 + sin(2·x1) + noise, optional binary column.
fn write_fixture(dir: &Path, n: usize, linear_only: bool) -> PathBuf {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let mut w = csv::Writer::from_path(dir.join("d.csv")).expect("fixture file");
    w.write_record(["y", "x1", "x2", "b"]).unwrap();
    for _ in 0..n {
        let x1: f64 = rng.random_range(-2.0..2.0);
        let x2: f64 = rng.random_range(-2.0..2.0);
        let e: f64 = rng.random_range(-0.5..0.5);
        let b = if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 };
        let f = 1.0 + 2.0 * x1 - x2 + if linear_only { 0.0 } else { (2.0 * x1).sin() };
        w.write_record(&[(f + e).to_string(), x1.to_string(), x2.to_string(), b.to_string()])
            .unwrap();
    }
    w.flush().unwrap();
    dir.join("d.csv")
}

#[test]
fn fit_smoke_writes_artifact_and_valid_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 200, false);
    let model = dir.path().join("m.gkm");
    let o = gkrls(&[
        "fit",
        "--data",
        p(&data),
        "--spec",
        "y ~ fixed(x1) + kernel(x1, x2)",
        "--family",
        "gaussian",
        "--seed",
        "1",
        "--out",
        p(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&model.with_extension("json"));
    assert_valid("fit_report.schema.json", &report);
    assert_eq!(report["converged"], Value::Bool(true));
    assert_eq!(report["n"], 200);

    let bytes = std::fs::read(&model).unwrap();
    assert_eq!(&bytes[..8], b"GKRLSMDL");
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let meta: Value = serde_json::from_slice(&bytes[60..60 + meta_len]).unwrap();
    assert_valid("model_meta.schema.json", &meta);
}

#[test]
fn repeated_fit_gives_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 150, false);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = gkrls(&[
            "fit",
            "--data",
            p(&data),
            "--spec",
            "y ~ fixed(x1) + kernel(x1, x2)",
            "--seed",
            "3",
            "--out",
            p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a.gkm"), run("b.gkm"));
}

#[test]
fn binomial_on_non_binary_outcome_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 60, false);
    let o = gkrls(&[
        "fit",
        "--data",
        p(&data),
        "--spec",
        "y ~ kernel(x1, x2)",
        "--family",
        "binomial",
        "--out",
        p(&dir.path().join("m.gkm")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("error"), "{}", stderr(&o));
}

#[test]
fn mutually_exclusive_options_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 30, false);
    let out = dir.path().join("m.gkm");
    let base = ["fit", "--data", p(&data), "--spec", "y ~ kernel(x1, x2)", "--out", p(&out)];
    let mut a = base.to_vec();
    a.extend(["--delta", "5", "--sketch-size", "10"]);
    let o = gkrls(&a);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let mut b = base.to_vec();
    b.extend(["--smoothing", "gcv", "--lambda", "1"]);
    assert_eq!(code(&gkrls(&b)), 2);
    assert!(!out.exists());
}

#[test]
fn missing_data_file_is_a_data_error() {
    let o = gkrls(&["fit", "--data", "/nonexistent/x.csv", "--spec", "y ~ kernel(x1)", "--out", "/tmp/never.gkm"]);
    assert_eq!(code(&o), 3);
}

fn fit_linear(dir: &Path) -> (PathBuf, PathBuf, Value) {
    let data = write_fixture(dir, 120, true);
    let model = dir.join("lin.gkm");
    let o = gkrls(&["fit", "--data", p(&data), "--spec", "y ~ fixed(x1, x2)", "--out", p(&model)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&model.with_extension("json"));
    (data, model, report)
}

#[test]
fn effects_on_linear_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model, report) = fit_linear(dir.path());
    let coef_x1 = report["fixed"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "x1")
        .expect("x1 coefficient")["estimate"]
        .as_f64()
        .unwrap();

    let json = dir.path().join("ame.json");
    let o = gkrls(&["effects", "--model", p(&model), "--data", p(&data), "--var", "x1", "--json", p(&json)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = csv_rows(&String::from_utf8_lossy(&o.stdout));
    assert_eq!(header, ["variable", "kind", "label", "grid", "estimate", "se", "ci_lo", "ci_hi"]);
    assert_eq!(rows.len(), 1);
    let ame: f64 = rows[0][4].parse().unwrap();
    let se: f64 = rows[0][5].parse().unwrap();
    assert!((ame - coef_x1).abs() < 1e-6, "AME {ame} vs coefficient {coef_x1}");
    assert!(se > 0.0);
    assert_valid("effect_estimate.schema.json", &read_json(&json));

    let out = dir.path().join("grid.csv");
    let o = gkrls(&[
        "effects", "--model", p(&model), "--data", p(&data), "--var", "x2", "--kind", "grid", "--grid", "-1:1:7",
        "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = csv_rows(&std::fs::read_to_string(&out).unwrap());
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r[5].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn effects_reject_unknown_variable() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model, _) = fit_linear(dir.path());
    let o = gkrls(&["effects", "--model", p(&model), "--data", p(&data), "--var", "nope"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn effects_grid_kind_needs_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model, _) = fit_linear(dir.path());
    let o = gkrls(&["effects", "--model", p(&model), "--data", p(&data), "--var", "x1", "--kind", "grid"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn predict_without_outcome_column() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model, report) = fit_linear(dir.path());
    let new = dir.path().join("new.csv");
    std::fs::write(&new, "x1,x2\n0,0\n1,0\n0,1\n").unwrap();
    let o = gkrls(&["predict", "--model", p(&model), "--data", p(&new), "--se"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = csv_rows(&String::from_utf8_lossy(&o.stdout));
    assert_eq!(header, ["row", "prediction", "se", "ci_lo", "ci_hi"]);
    assert_eq!(rows.len(), 3);
    let coef = |name: &str| {
        report["fixed"].as_array().unwrap().iter().find(|c| c["name"] == name).unwrap()["estimate"]
            .as_f64()
            .unwrap()
    };
    let pred: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let intercept = pred[0];
    assert!((pred[1] - intercept - coef("x1")).abs() < 1e-9);
    assert!((pred[2] - intercept - coef("x2")).abs() < 1e-9);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn simulate_three_hills_emits_one_row_per_replicate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("th.csv");
    let summary = dir.path().join("th.json");
    let o = gkrls(&[
        "simulate",
        "--dgp",
        "three_hills",
        "--n",
        "3000",
        "--reps",
        "20",
        "--seed",
        "7",
        "--out",
        p(&out),
        "--summary",
        p(&summary),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = csv_rows(&std::fs::read_to_string(&out).unwrap());
    assert_eq!(rows.len(), 20);
    assert!(header.contains(&"oos_rmse".to_string()));
    assert_valid("simulate_three_hills_summary.schema.json", &read_json(&summary));
}

#[test]
fn coverage_emits_table_layout() {
    let o = gkrls(&["coverage", "--sims", "50", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = csv_rows(&String::from_utf8_lossy(&o.stdout));
    assert_eq!(header, ["method", "coverage", "mae", "avg_se", "sims", "failures"]);
    let methods: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(methods, ["unsketched_hh", "unsketched_bayes", "gkrls_bayes", "gkrls_linear_bayes"]);
    for r in &rows {
        let obj = serde_json::json!({
            "method": r[0],
            "coverage": r[1].parse::<f64>().unwrap(),
            "mae": r[2].parse::<f64>().unwrap(),
            "avg_se": r[3].parse::<f64>().unwrap(),
            "sims": r[4].parse::<u64>().unwrap(),
            "failures": r[5].parse::<u64>().unwrap(),
        });
        assert_valid("coverage_row.schema.json", &obj);
    }
}

#[test]
fn bench_slope_matches_log_log_regression_of_its_own_records() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("t.csv");
    let report = dir.path().join("s.json");
    let o = gkrls(&[
        "bench",
        "--grid",
        "500:2000:3",
        "--stages",
        "estimation",
        "--out",
        p(&records),
        "--report",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = read_json(&report);
    assert_valid("bench_report.schema.json", &rep);

    let (header, rows) = csv_rows(&std::fs::read_to_string(&records).unwrap());
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (cn, ct) = (col("n"), col("estimation_seconds"));
    // one replicate per size, so the median is the single time
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r[cn].parse::<f64>().unwrap().ln(), r[ct].parse::<f64>().unwrap().max(1e-9).ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let oracle = sxy / sxx;
    let slope = rep["slopes"][0]["slope"].as_f64().unwrap();
    assert_eq!(rep["slopes"][0]["stage"], "estimation");
    assert!((slope - oracle).abs() < 1e-9, "slope {slope} vs oracle {oracle}");
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let emit = |name: &str, flag: Option<&str>, env: Option<&str>| {
        let path = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gkrls"));
        cmd.args(["simulate", "--dgp", "plr_synthetic", "--n", "50", "--emit-data", p(&path)]);
        cmd.env_remove("GKRLS_SEED");
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        if let Some(s) = env {
            cmd.env("GKRLS_SEED", s);
        }
        let o = cmd.output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(path).unwrap()
    };
    let by_flag = emit("a.csv", Some("5"), None);
    let by_env = emit("b.csv", None, Some("5"));
    let other = emit("c.csv", None, Some("6"));
    let flag_wins = emit("d.csv", Some("6"), Some("5"));
    assert_eq!(by_flag, by_env);
    assert_ne!(by_flag, other);
    assert_eq!(flag_wins, other);
}

#[test]
fn dml_and_rlearner_on_emitted_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("plr.csv");
    let o = gkrls(&["simulate", "--dgp", "plr_synthetic", "--n", "300", "--emit-data", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let out = dir.path().join("dml.json");
    let o = gkrls(&[
        "dml", "--data", p(&data), "--outcome", "y", "--treatment", "w", "--folds", "3", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out);
    assert_valid("causal_output.schema.json", &v);
    assert_eq!(v["estimate"]["fold_hygiene_checked"], true);
    assert_eq!(v["estimate"]["n"], 300);

    let out = dir.path().join("rl.json");
    let o = gkrls(&[
        "rlearner",
        "--data",
        p(&data),
        "--outcome",
        "y",
        "--treatment",
        "w",
        "--folds",
        "3",
        "--tau-spec",
        "pseudo_outcome ~ kernel(x1, x2)",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out);
    assert_valid("causal_output.schema.json", &v);
    assert_eq!(v["estimate"]["tau_cv"].as_array().unwrap().len(), 300);
}

#[test]
fn dml_rejects_treatment_in_nuisance_spec() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("plr.csv");
    gkrls(&["simulate", "--dgp", "plr_synthetic", "--n", "60", "--emit-data", p(&data)]);
    let o = gkrls(&[
        "dml", "--data", p(&data), "--outcome", "y", "--treatment", "w", "--spec", "y ~ kernel(x1, w)",
    ]);
    assert_eq!(code(&o), 3);
}
