use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_covar");

const TOY: &str = r#"
seed = 5

[problem]
kind = "toy"

[reference]
value = 2.2469118399226833

[estimator]
kind = "decoupled"
oracle = true
k = 300
h = 300

[experiment]
replications = 6

[[experiment.rows]]
kind = "sns"
gamma = 10000

[[experiment.rows]]
kind = "sns"
gamma = 100000

[[experiment.rows]]
kind = "sns"
gamma = 1000000
"#;

const LINEAR: &str = r#"
seed = 8

[problem]
kind = "toy"

[estimator]
kind = "decoupled"
family = "LINEAR_REGRESSION"
gamma = 20000
constants = { l = 10, n = 40000 }
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn price(args: &[&str]) -> f64 {
    let mut full = vec!["price"];
    full.extend_from_slice(args);
    stdout(&run(&full)).trim().parse().unwrap()
}

#[test]
fn prices_from_the_command_line() {
    let bs = price(&["bs", "--s", "100", "--k", "100", "--r", "0.05", "--sigma", "0.2", "--ttm", "1"]);
    assert!((bs - 10.450583572185565).abs() < 1e-8);
    assert_eq!(price(&["bs", "--s", "110", "--k", "100", "--ttm", "1e-12"]), 10.0);
    let heston = price(&[
        "heston", "--s", "100", "--k", "100", "--r", "0.05", "--ttm", "1", "--kappa", "2", "--theta", "0.04",
        "--sigma-v", "1e-6", "--rho", "-0.5", "--v0", "0.04",
    ]);
    assert!((heston / bs - 1.0).abs() < 1e-3);
    let out = run(&["price", "barrier", "--s", "130", "--k", "100", "--b", "120"]);
    assert_eq!(stdout(&out).trim().parse::<f64>().unwrap(), 0.0);
    let b = price(&["barrier", "--s", "100", "--k", "100", "--b", "150", "--r", "0.05"]);
    assert!(b > 0.0 && b < bs);
}

#[test]
fn exit_codes_follow_error_kind() {
    assert_eq!(run(&["price", "bs", "--bogus", "1"]).status.code(), Some(4));
    assert_eq!(run(&["estimate", "--config", "/nonexistent/x.toml"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "seed = 1\nwhatever = 3\n[problem]\nkind = \"toy\"\n");
    let o = run(&["estimate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(run(&["price", "bs", "--s=-1", "--k", "1", "--ttm", "1"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn oracle_estimate_is_close_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let a = stdout(&run(&["estimate", "--config", &cfg, "--no-timings"]));
    let b = stdout(&run(&["estimate", "--config", &cfg, "--no-timings"]));
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let est = v["covar_hat"].as_f64().unwrap();
    assert!((est / 2.2469118399226833 - 1.0).abs() < 0.1, "{est}");
    let other = stdout(&run(&["estimate", "--config", &cfg, "--no-timings", "--seed", "6"]));
    assert_ne!(a, other);
    let k200 = stdout(&run(&["estimate", "--config", &cfg, "--no-timings", "--override", "estimator.k=200"]));
    let v: serde_json::Value = serde_json::from_str(&k200).unwrap();
    assert_eq!(v["sizing"]["k"], 200);
}

#[test]
fn experiment_writes_rows_and_slope() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let out = dir.path().join("rows.csv");
    let o = run(&["experiment", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let text = stdout(&o);
    assert!(text.starts_with("reference 2.246912 (given)"), "{text}");
    assert!(text.contains("slope sns/none:"), "{text}");
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 15);
    assert_eq!(rdr.records().count(), 3);
}

#[test]
fn experiment_output_is_thread_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    for ext in ["csv", "json"] {
        let mut files = Vec::new();
        for threads in ["1", "4"] {
            let out = dir.path().join(format!("t{threads}.{ext}"));
            stdout(&run(&[
                "experiment", "--config", &cfg, "--threads", threads, "--no-timings", "--out",
                out.to_str().unwrap(),
            ]));
            files.push(std::fs::read(&out).unwrap());
        }
        assert_eq!(files[0], files[1], "{ext}");
    }
}

#[test]
fn fitted_surfaces_can_be_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "linear.toml", LINEAR);
    let models = dir.path().join("models");
    let summary = stdout(&run(&["fit", "--config", &cfg, "--out", models.to_str().unwrap()]));
    let s: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(s["m"], 2000);
    assert!(models.join("mu.cvsm").exists() && models.join("pi.cvsm").exists());
    let reused = stdout(&run(&[
        "estimate", "--config", &cfg, "--no-timings", "--fitted", models.to_str().unwrap(),
    ]));
    let fresh = stdout(&run(&["estimate", "--config", &cfg, "--no-timings"]));
    let a: serde_json::Value = serde_json::from_str(&reused).unwrap();
    let b: serde_json::Value = serde_json::from_str(&fresh).unwrap();
    assert_eq!(a["covar_hat"], b["covar_hat"]);
}

#[test]
fn simulate_writes_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let exact = stdout(&run(&["simulate", "--config", &cfg, "--count", "5"]));
    let mut rdr = csv::Reader::from_reader(exact.as_bytes());
    assert_eq!(rdr.headers().unwrap().iter().last(), Some("pi"));
    assert_eq!(rdr.records().count(), 5);
    let nested = stdout(&run(&["simulate", "--config", &cfg, "--count", "4", "--inner", "3"]));
    let mut rdr = csv::Reader::from_reader(nested.as_bytes());
    assert_eq!(rdr.headers().unwrap().iter().last(), Some("y_bar"));
    assert_eq!(rdr.records().count(), 4);
}
