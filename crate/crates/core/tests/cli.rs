use std::f64::consts::PI;
use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn feynkac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feynkac"))
        .args(args)
        .env_remove("FEYNKAC_THREADS")
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn heat_example_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("heat.json");
    let out = feynkac(&[
        "propagate",
        "--paths",
        "100000",
        "--seed",
        "4",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let (est, se) = (r["estimate"].as_f64().unwrap(), r["std_error"].as_f64().unwrap());
    assert!((est - 1.0 / (4.0 * PI).sqrt()).abs() < 3.0 * se, "{est} ± {se}");
    assert_eq!(r["command"], "propagate");
    assert_eq!(r["seed"], 4);
    assert_eq!(r["n_paths"], 100000);
    assert!(r["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert_eq!(r["resolved_config"]["command"]["condition"], "gaussian");
}

#[test]
fn report_goes_to_stdout_without_json_flag() {
    let out = feynkac(&["lamperti-check", "--model", "gbm"]);
    assert!(out.status.success());
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["max_error_analytic"].as_f64().unwrap() < 1e-10);
}

#[test]
fn missing_output_directory_is_an_io_error() {
    let out = feynkac(&["dnls", "--paths", "2", "--out", "/definitely/not/here/x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_json(&out);
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("/definitely/not/here"));
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let csv = dir.path().join(name);
        let json = dir.path().join(format!("{name}.json"));
        let out = feynkac(&[
            "simulate",
            "--paths",
            "20",
            "--steps",
            "16",
            "--seed",
            "11",
            "--out",
            csv.to_str().unwrap(),
            "--json",
            json.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        fs::read(csv).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("path_id,step,time,site,value\n"));
    assert_eq!(text.lines().count(), 1 + 20 * 17);
}

#[test]
fn invalid_k_exits_with_usage_code() {
    let out = feynkac(&["dnls", "--k", "5"]);
    assert_eq!(out.status.code(), Some(64));
    let e = stderr_json(&out);
    assert!(e["message"].as_str().unwrap().contains("k must be 2 or 3"));
}

#[test]
fn conflicting_flags_are_listed() {
    let out = feynkac(&["propagate", "--method", "bridge", "--drift", "ou"]);
    assert_eq!(out.status.code(), Some(64));
    let msg = stderr_json(&out)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("--method bridge") && msg.contains("--drift"), "{msg}");
    let out = feynkac(&["dnls", "--route", "integrator", "--zero-noise"]);
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# small run\nsites = 8\nsteps = 40\npaths = 3\nzero_noise = true\n",
    )
    .unwrap();
    let json = dir.path().join("r.json");
    let out = feynkac(&[
        "dnls",
        "--config",
        cfg.to_str().unwrap(),
        "--paths",
        "2",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let c = &r["resolved_config"]["command"];
    assert_eq!(
        (c["sites"].as_u64(), c["steps"].as_u64(), c["paths"].as_u64()),
        (Some(8), Some(40), Some(2))
    );
    assert_eq!(c["zero_noise"], true);
    assert!(r["max_sum_deviation"].as_f64().unwrap() < 1e-12);

    fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let out = feynkac(&["dnls", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(64));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("bogus-key"));
}

#[test]
fn thread_env_fallback() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_feynkac"))
            .args(["sample-path", "--kind", "sheet", "--samples", "50"])
            .env("FEYNKAC_THREADS", threads)
            .output()
            .unwrap()
    };
    let a = run("1");
    let b = run("3");
    assert!(a.status.success() && b.status.success());
    let strip = |o: &Output| {
        let mut v: Value = serde_json::from_slice(&o.stdout).unwrap();
        v.as_object_mut().unwrap().remove("wall_time_s");
        v
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(run("zero").status.code(), Some(64));
}

#[test]
fn numeric_failures_exit_with_one() {
    // a steep confining potential leaves a handful of paths carrying the weight
    let out = feynkac(&[
        "propagate",
        "--method",
        "ratio",
        "--potential",
        "50*x^2",
        "--paths",
        "200",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stderr_json(&out)["error"], "ill_conditioned_ratio");
    let out = feynkac(&["propagate", "--drift", "100*x^3", "--paths", "200"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "estimation");
}

#[test]
fn bridge_oracle_in_report() {
    let out = feynkac(&[
        "propagate",
        "--method",
        "bridge",
        "--potential",
        "harmonic",
        "--paths",
        "4000",
        "--steps",
        "32",
        "--oracle",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((r["oracle"].as_f64().unwrap() - (2.0 * PI * 1f64.sinh()).powf(-0.5)).abs() < 1e-4);
    assert!(r["oracle_z_score"].as_f64().unwrap().abs() < 4.0);
}
