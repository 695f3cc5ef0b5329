use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fosr::io::write_long_csv;
use fosr_core::sim::{generate, Sampling, ScenarioSpec};

fn fosr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fosr"))
        .args(args)
        .output()
        .unwrap()
}

fn write_data(dir: &Path, sampling: Sampling, beta: u8, delta: f64, n: usize) -> PathBuf {
    let spec = ScenarioSpec {
        n,
        seed: 7,
        ..ScenarioSpec::new(sampling, beta, delta)
    };
    let ds = generate(&spec, 0).unwrap();
    let path = dir.join("data.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    write_long_csv(&mut f, &ds).unwrap();
    path
}

const X: &str = "x1,x2,x3,x4,x5";
const Z: &str = "z1,z2,z3";

#[test]
fn test_command_is_reproducible_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), Sampling::Dense, 1, 2.0, 30);
    let data = data.to_str().unwrap();
    let out = dir.path().join("res.json");
    let args = [
        "test", "--data", data, "--x-cols", X, "--z-cols", Z, "--perms", "99", "--seed", "3",
    ];
    let a = fosr(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = fosr(&args);
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stderr).contains("p-value"));

    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.to_str().unwrap()]);
    let c = fosr(&with_out);
    assert!(c.status.success());
    assert_eq!(std::fs::read(&out).unwrap(), a.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["t_perm"].as_array().unwrap().len(), 99);
    let p = v["p_value"].as_f64().unwrap();
    assert!(p > 0.0 && p < 0.05, "strong signal p = {p}");

    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("res.json.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["seed"], 3);
    assert_eq!(m["input_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn f_method_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), Sampling::Dense, 1, 0.0, 20);
    let o = fosr(&[
        "test",
        "--method",
        "f",
        "--data",
        data.to_str().unwrap(),
        "--x-cols",
        X,
        "--z-cols",
        Z,
        "--perms",
        "19",
        "--fast-f",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["f_observed"].as_f64().unwrap() >= 0.0);
}

#[test]
fn validate_reports_non_finite_with_data_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "id,time,y,x\na,0.1,NaN,1\na,0.2,1,1\nb,0.1,2,0\n").unwrap();
    let o = fosr(&[
        "validate",
        "--data",
        path.to_str().unwrap(),
        "--x-cols",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("subject a"));
}

#[test]
fn validate_accepts_clean_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), Sampling::Sparse, 0, 0.0, 10);
    let o = fosr(&[
        "validate",
        "--data",
        data.to_str().unwrap(),
        "--x-cols",
        X,
        "--z-cols",
        Z,
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok: 10 subjects"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(fosr(&["test"]).status.code(), Some(1));
    assert_eq!(fosr(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = fosr(&[
        "simulate",
        "--scenario",
        "dense-b9",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(dir.path().join("error.json").exists());
}

#[test]
fn missing_input_exits_two_and_writes_error_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = fosr(&[
        "test",
        "--data",
        "/nonexistent.csv",
        "--x-cols",
        "x",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert!(v["error"].as_str().unwrap().contains("nonexistent"));
}

#[test]
fn version_names_manifest_schema() {
    let o = fosr(&["--version"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("manifest schema 1"));
}

#[test]
fn describe_covariance_reports_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), Sampling::Dense, 0, 0.0, 40);
    let o = fosr(&[
        "describe-covariance",
        "--data",
        data.to_str().unwrap(),
        "--x-cols",
        X,
        "--z-cols",
        Z,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["zeta"].as_u64().unwrap() >= 1);
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--n", "20", "--out", dir.to_str().unwrap()];
    args.extend(extra);
    fosr(&args)
}

#[test]
fn simulate_small_study() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(
        dir.path(),
        &[
            "--reps",
            "5",
            "--perms",
            "10",
            "--deltas",
            "0",
            "--kernels",
            "linear,gaussian",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("dense-null.json")).unwrap())
            .unwrap();
    for m in v["results"][0]["methods"].as_array().unwrap() {
        let ps = m["p_values"].as_array().unwrap();
        assert_eq!(ps.len(), 5);
        assert!(ps.iter().all(|p| {
            let p = p.as_f64().unwrap();
            p > 0.0 && p <= 1.0
        }));
    }
    assert!(dir.path().join("dense-null.json.manifest.json").exists());

    let svg = std::fs::read_to_string(dir.path().join("dense-null_power.svg")).unwrap();
    // one marker per method at the single delta, plus one in the legend
    assert_eq!(svg.matches("<path d=\"M").count() - 1, 4);
}

#[test]
fn simulate_empty_grid_gives_header_only_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(dir.path(), &["--reps", "2", "--perms", "5", "--deltas", ""]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("dense-null_power.csv")).unwrap();
    assert_eq!(csv, "scenario,method,delta,power\n");
}
