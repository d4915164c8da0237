use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn koopman(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopman"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&o.stderr)))
}

fn config_file(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

/// Rows of a CSV written by the CLI, after checking the hash line.
fn read_csv(path: &Path) -> (String, Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(!text.contains('\r'));
    let (first, rest) = text.split_once('\n').unwrap();
    let hash = first.strip_prefix("# config_hash: ").expect("hash line").to_string();
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    let header = reader.headers().unwrap().iter().map(String::from).collect();
    let rows = reader.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (hash, header, rows)
}

#[test]
fn simulate_writes_trajectory_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopman(dir.path(), &["simulate", "--system", "duffing", "--x0", "0.5,-0.25", "--t", "2", "--steps", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (hash, header, rows) = read_csv(&dir.path().join("trajectory_duffing.csv"));
    assert_eq!(hash.len(), 64);
    assert_eq!(header, ["t", "x1", "x2"]);
    assert_eq!(rows.len(), 21);
    assert_eq!(rows[0], ["0.0", "0.5", "-0.25"]);

    let back = koopman(dir.path(), &["simulate", "--system", "bistable", "--x0", "0.5", "--t", "-1", "--steps", "4"]);
    assert_eq!(code(&back), 0);
    let (_, _, rows) = read_csv(&dir.path().join("trajectory_bistable.csv"));
    assert_eq!(rows.last().unwrap()[0], "-1.0");
    // backwards in time the state moves away from the stable point 1 towards 0
    let x: f64 = rows.last().unwrap()[1].parse().unwrap();
    assert!(x > 0.0 && x < 0.5);
}

#[test]
fn config_errors_exit_2_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopman(dir.path(), &["simulate", "--system", "nope", "--x0", "1", "--t", "1"]);
    assert_eq!(code(&o), 2);
    let e = stderr_json(&o);
    assert_eq!(e["error"]["kind"], "config");
    assert_eq!(e["exit_code"], 2);

    let cfg = config_file(dir.path(), r#"{"schema_version": 1, "unknown": true}"#);
    let o = koopman(dir.path(), &["--config", cfg.to_str().unwrap(), "fit"]);
    assert_eq!(code(&o), 2);
    assert!(stderr_json(&o)["error"]["message"].as_str().unwrap().contains("unknown"));

    let cfg = config_file(dir.path(), "{ not json");
    assert_eq!(code(&koopman(dir.path(), &["--config", cfg.to_str().unwrap(), "verify"])), 2);

    let o = koopman(dir.path(), &["verify", "--only", "theorem99"]);
    assert_eq!(code(&o), 2);
    assert_eq!(stderr_json(&o)["error"]["kind"], "config");

    let o = koopman(dir.path(), &["bogus-verb"]);
    assert_eq!(code(&o), 2);
    assert_eq!(stderr_json(&o)["exit_code"], 2);
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    // backwards from |x| > 1 the bistable flow blows up in finite time
    let o = koopman(dir.path(), &["simulate", "--system", "bistable", "--x0", "3", "--t", "-5"]);
    assert_eq!(code(&o), 3);
    let e = stderr_json(&o);
    assert_eq!(e["error"]["kind"], "runtime");
    assert!(e["error"]["message"].as_str().unwrap().contains("escaped"));
}

#[test]
fn fit_linear_is_exact_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopman(dir.path(), &["--json", "fit", "--fit", "linear"]);
    assert_eq!(code(&o), 0);
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    let fit = &summary["fits"][0];
    assert_eq!(fit["ridge_defaulted"], true);
    let lambdas: Vec<f64> = fit["eigenpairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["lambda"][0].as_f64().unwrap())
        .collect();
    assert!(lambdas.iter().any(|l| (l + 1.0).abs() <= 1e-6), "{lambdas:?}");

    let path = dir.path().join("model_linear.json");
    let first = std::fs::read(&path).unwrap();
    let artifact: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(artifact["config_hash"], summary["config_hash"]);
    assert_eq!(artifact["model"]["ridge_defaulted"], true);
    assert_eq!(code(&koopman(dir.path(), &["fit", "--fit", "linear"])), 0);
    assert_eq!(first, std::fs::read(&path).unwrap());

    let human = koopman(dir.path(), &["fit", "--fit", "linear"]);
    assert!(String::from_utf8(human.stdout).unwrap().contains("-1.00000000"));
}

#[test]
fn verify_filter_and_forced_violation() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopman(dir.path(), &["verify", "--only", "lemma1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let doc: Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(doc["reports"].as_array().unwrap().len(), 1);
    assert_eq!(doc["reports"][0]["theorem_id"], "lemma1");
    assert_eq!(doc["schema_version"], 1);
    let (hash, header, _) = read_csv(&dir.path().join("counterexamples_lemma1.csv"));
    assert_eq!(hash, doc["config_hash"].as_str().unwrap());
    assert_eq!(header[0], "case");

    let cfg = config_file(dir.path(), r#"{"schema_version": 1, "checks": {"lemma1": {"tol_phi": 0.0}}}"#);
    let o = koopman(dir.path(), &["--config", cfg.to_str().unwrap(), "--json", "verify", "--only", "lemma1"]);
    assert_eq!(code(&o), 1);
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["verdict"], "violated");
    let (_, _, rows) = read_csv(&dir.path().join("counterexamples_lemma1.csv"));
    assert!(!rows.is_empty());
}

#[test]
fn grid_plateaus_single_row_and_extrapolation() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&koopman(dir.path(), &["grid", "--fit", "bistable_basin", "--pair", "0"])), 2);
    assert_eq!(code(&koopman(dir.path(), &["fit", "--fit", "bistable_basin"])), 0);
    let artifact: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("model_bistable_basin.json")).unwrap()).unwrap();
    let pairs = artifact["eigenpairs"].as_array().unwrap();
    let zero = pairs
        .iter()
        .position(|p| p["lambda"][0].as_f64().unwrap().abs() <= 1e-3 && p["vanishes_on_sample"] == false)
        .unwrap();
    let pair = zero.to_string();

    let o = koopman(dir.path(), &["--json", "grid", "--fit", "bistable_basin", "--pair", &pair, "--region=-2:2", "--resolution", "401"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    let gap = summary["plateau_gap"].as_f64().unwrap();
    let (_, header, rows) = read_csv(&dir.path().join(format!("grid_bistable_basin_pair{pair}.csv")));
    assert_eq!(header, ["x1", "re_phi", "im_phi", "abs_phi", "extrapolation"]);
    assert_eq!(rows.len(), 401);
    let re: Vec<(f64, f64)> = rows.iter().map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap())).collect();
    assert!(re.iter().all(|(_, v)| v.is_finite()));
    let left: Vec<f64> = re.iter().filter(|(x, _)| *x < -0.1).map(|p| p.1).collect();
    let right: Vec<f64> = re.iter().filter(|(x, _)| *x > 0.1).map(|p| p.1).collect();
    let spread = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread(&left) < 1e-3 && spread(&right) < 1e-3);
    let step = (right[0] - left[0]).abs();
    assert!(step > 0.5 && (step - gap).abs() < 1e-2, "step {step} gap {gap}");

    let o = koopman(dir.path(), &["grid", "--fit", "bistable_basin", "--pair", &pair, "--resolution", "1"]);
    assert_eq!(code(&o), 0);
    let (_, _, rows) = read_csv(&dir.path().join(format!("grid_bistable_basin_pair{pair}.csv")));
    assert_eq!(rows.len(), 1);

    let o = koopman(dir.path(), &["grid", "--fit", "bistable_basin", "--pair", &pair, "--region=-3:3", "--resolution", "7"]);
    assert_eq!(code(&o), 0);
    let (_, _, rows) = read_csv(&dir.path().join(format!("grid_bistable_basin_pair{pair}.csv")));
    let flags: Vec<&str> = rows.iter().map(|r| r[4].as_str()).collect();
    assert_eq!(flags, ["1", "0", "0", "0", "0", "0", "1"]);

    let o = koopman(dir.path(), &["grid", "--fit", "bistable_basin", "--pair", "999"]);
    assert_eq!(code(&o), 2);
    assert!(stderr_json(&o)["error"]["message"].as_str().unwrap().contains("pair"));
}

#[test]
fn control_reports_and_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopman(dir.path(), &["control"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let human = String::from_utf8(o.stdout).unwrap();
    assert!(human.contains("t_c = ") && human.contains("certified"), "{human}");
    let doc: Value = serde_json::from_slice(&std::fs::read(dir.path().join("control_report.json")).unwrap()).unwrap();
    let exps = doc["experiments"].as_array().unwrap();
    let crossing = exps.iter().find(|e| e["scenario"] == "crossing").unwrap();
    let still = exps.iter().find(|e| e["scenario"] == "uncontrolled").unwrap();
    assert!(crossing["t_c"].as_f64().is_some());
    assert!(crossing.get("certified_change_bound").is_some());
    assert!(still.get("t_c").is_none());
    let (hash, header, rows) = read_csv(&dir.path().join("control_crossing.csv"));
    assert_eq!(hash, doc["config_hash"].as_str().unwrap());
    assert_eq!(&header[..3], ["t", "x1", "label"]);
    assert_eq!(rows.len(), 5001);

    let bad = config_file(
        dir.path(),
        r#"{"schema_version": 1, "control": {"scenarios": [{"name": "bad", "schedule": {"kind": "piecewise", "switch_times": [2.0, 1.0], "values": [[0.0], [1.0], [2.0]]}}]}}"#,
    );
    let o = koopman(dir.path(), &["--config", bad.to_str().unwrap(), "control"]);
    assert_eq!(code(&o), 2);
    let bad = config_file(dir.path(), r#"{"schema_version": 1, "control": {"scenarios": [{"name": "bad", "schedule": {"kind": "ramp"}}]}}"#);
    assert_eq!(code(&koopman(dir.path(), &["--config", bad.to_str().unwrap(), "control"])), 2);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let a: Value = serde_json::from_slice(&koopman(dir.path(), &["--json", "fit", "--fit", "linear"]).stdout).unwrap();
    let b: Value =
        serde_json::from_slice(&koopman(dir.path(), &["--json", "--seed", "99", "fit", "--fit", "linear"]).stdout).unwrap();
    assert_ne!(a["config_hash"], b["config_hash"]);
    let artifact: Value = serde_json::from_slice(&std::fs::read(dir.path().join("model_linear.json")).unwrap()).unwrap();
    assert_eq!(artifact["seed"], 99);
}
