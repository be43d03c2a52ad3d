use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use halipw::sim::{generate, Scenario};
use serde_json::Value;

fn halipw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halipw")).args(args).env_remove("HALIPW_THREADS").output().expect("spawn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sample_csv(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("data.csv");
    generate(Scenario::SuppObs, n, 3).unwrap().write_csv(&path, "a", "y").unwrap();
    path
}

const QUICK: [&str; 6] = ["--folds", "3", "--degree", "2", "--grid-size", "15"];

fn entries(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 4] = [
        (
            "estimate",
            &[
                "--input", "--a", "--y", "--w", "--selector", "--folds", "--degree", "--kappas", "--estimator", "--seed",
                "--grid-size", "--grid-ratio", "--tol", "--max-iter", "--arm", "--dump-fits", "--output", "--format",
                "--threads",
            ],
        ),
        ("ate", &["--input", "--selector", "--folds", "--degree", "--kappas", "--estimator", "--seed", "--output", "--format"]),
        (
            "simulate",
            &[
                "--scenario", "--n", "--reps", "--variants", "--seed", "--folds", "--degree", "--kappas", "--estimator",
                "--grid-size", "--grid-ratio", "--long", "--output", "--format", "--threads",
            ],
        ),
        ("basis-dump", &["--input", "--w", "--degree", "--output"]),
    ];
    for (cmd, flags) in cases {
        let o = halipw(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = String::from_utf8(o.stdout).unwrap();
        for flag in flags {
            assert!(text.contains(&format!("{flag} ")), "{cmd} help lacks {flag}");
        }
    }
    let o = halipw(&["simulate", "--help"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("[default: main1]") && text.contains("[default: 200]") && text.contains("[default: 2]"));
}

#[test]
fn estimate_writes_versioned_json() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample_csv(dir.path(), 120);
    let out = dir.path().join("est.json");
    let fits = dir.path().join("fits.json");
    let mut args = vec!["estimate", "--input", input.to_str().unwrap(), "--a", "a", "--y", "y", "--selector", "dcar", "--seed", "7"];
    args.extend(QUICK);
    args.extend(["--output", out.to_str().unwrap(), "--dump-fits", fits.to_str().unwrap()]);
    let o = halipw(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["command"], "estimate");
    let r = &v["report"];
    let (psi, se) = (r["psi_hat"].as_f64().unwrap(), r["se"].as_f64().unwrap());
    assert!(psi.is_finite() && se > 0.0);
    assert!((r["ci_high"].as_f64().unwrap() - r["ci_low"].as_f64().unwrap() - 2.0 * 1.959964 * se).abs() < 1e-12);
    assert_eq!(r["selector"]["kind"], "dcar");
    assert_eq!(r["n"], 120);

    let d: Value = serde_json::from_slice(&std::fs::read(&fits).unwrap()).unwrap();
    assert_eq!(d["folds"].as_array().unwrap().len(), 3);
    assert_eq!(d["lambda_index"], r["selector"]["lambda_index"]);
    assert_eq!(entries(dir.path()), ["data.csv", "est.json", "fits.json"]);
}

#[test]
fn estimate_csv_and_control_arm() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample_csv(dir.path(), 100);
    let mut args = vec!["estimate", "--input", input.to_str().unwrap(), "--arm", "control", "--format", "csv", "--selector", "cv"];
    args.extend(QUICK);
    let o = halipw(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("arm,psi_hat,se"));
    assert!(lines[1].starts_with("control,"));
}

#[test]
fn ate_reports_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample_csv(dir.path(), 100);
    let mut args = vec!["ate", "--input", input.to_str().unwrap(), "--w", "w1,w2", "--selector", "cv"];
    args.extend(QUICK);
    let o = halipw(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let r = &v["report"];
    let diff = r["treated"]["psi_hat"].as_f64().unwrap() - r["control"]["psi_hat"].as_f64().unwrap();
    assert!((r["ate"].as_f64().unwrap() - diff).abs() < 1e-12);
    assert_eq!(r["treated"]["arm"], "treated");
    assert_eq!(r["control"]["arm"], "control");
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = halipw(&[
            "simulate", "--scenario", "supp_rct", "--n", "80", "--reps", "3", "--variants", "dcar,cv,unadjusted", "--seed",
            "1", "--folds", "3", "--grid-size", "12", "--output", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out).unwrap()
    };
    let first = run("a.csv");
    assert_eq!(first, run("b.csv"));
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(1).unwrap().starts_with("supp_rct,dcar,80,"));
}

#[test]
fn simulate_json_and_long_layouts() {
    let base = ["simulate", "--scenario", "supp_obs", "--n", "60", "--reps", "2", "--variants", "unadjusted,oracle_g"];
    let o = halipw(&[&base[..], &["--format", "json"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["table"]["rows"].as_array().unwrap().len(), 2);
    assert_eq!(v["config"]["folds"], 5);

    let o = halipw(&[&base[..], &["--long"]].concat());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "scenario,variant,n,metric,value,mcse");
    assert_eq!(text.lines().count(), 1 + 2 * 4);
}

#[test]
fn basis_dump_lists_sections_and_knots() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.csv");
    std::fs::write(&input, "w1,w2\n0.1,1\n0.5,0\n0.3,1\n").unwrap();
    let o = halipw(&["basis-dump", "--input", input.to_str().unwrap(), "--degree", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["columns"], serde_json::json!(["w1", "w2"]));
    let bases = v["basis"]["bases"].as_array().unwrap();
    assert!(!bases.is_empty());
    for b in bases {
        assert_eq!(b["section"].as_array().unwrap().len(), b["knot"].as_array().unwrap().len());
    }
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "w1,a,y\n0.1,1,2\n0.2,0,1\n0.3,1,1\n0.4,0,3\n0.5,2,1\n").unwrap();
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["estimate", "--input", "missing.csv"], "missing.csv"),
        (vec!["estimate", "--input", bad.to_str().unwrap()], "row 5"),
        (vec!["estimate", "--input", bad.to_str().unwrap(), "--y", "outcome"], "outcome"),
        (vec!["estimate", "--bogus"], "--bogus"),
        (vec!["simulate", "--scenario", "main9"], "main9"),
        (vec!["simulate", "--kappas", "0.1,0.2"], "start at 0"),
        (vec!["simulate", "--grid-ratio", "2"], "auto"),
        (vec!["simulate", "--reps", "0"], "reps"),
        (vec!["simulate", "--degree", "0"], "degree"),
        (vec!["simulate", "--variants", "tmle"], "tmle"),
    ];
    for (args, needle) in cases {
        let o = halipw(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        let err = stderr(&o);
        assert!(err.starts_with("error:"), "{args:?}: {err}");
        assert!(err.contains(needle), "{args:?}: {err}");
    }
}

#[test]
fn runtime_failures_exit_with_two() {
    let o = halipw(&[
        "simulate", "--scenario", "supp_obs", "--n", "60", "--reps", "2", "--variants", "dcar", "--max-iter", "1",
        "--tol", "1e-15", "--grid-size", "10",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).lines().any(|l| l.starts_with("error:")));
}

#[test]
fn failed_run_leaves_no_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never.csv");
    let o = halipw(&["simulate", "--reps", "0", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(entries(dir.path()).is_empty());
}

#[test]
fn thread_count_from_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_halipw"))
        .args(["simulate", "--scenario", "supp_rct", "--n", "50", "--reps", "2", "--variants", "unadjusted"])
        .env("HALIPW_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_halipw")).args(["simulate", "--reps", "1"]).env("HALIPW_THREADS", "x").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
