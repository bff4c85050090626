use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const LOG_CONSUMPTION: &str = r#"
[market]
n_stocks = 1
n_brownian = 1
rate = "constant:0.04"
drift = ["constant:0.1"]
vol = [["constant:0.3"]]
initial_prices = [1.0, 1.0]
horizon = 2.0

[preference]
family = "log"
h = "constant:1"

[problem]
kind = "consumption_only"
x = 1.0
steps = 40
n_paths = 400
seed = 42
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optima"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn csv_column(text: &str, name: &str) -> Vec<f64> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn solve_writes_worked_log_value() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "log.toml", LOG_CONSUMPTION);
    let out = dir.path().join("out");
    let res = run(&["solve"], &cfg, &out);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["manifest.toml", "solution.csv", "scalars.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let scalars = fs::read_to_string(out.join("scalars.csv")).unwrap();
    let v = csv_column(&scalars, "V")[0];
    // T log(x / T) with x = 1, T = 2
    assert!((v - 2.0 * 0.5f64.ln()).abs() <= 1e-6, "V = {v}");
    assert!(scalars.contains(",interior,"));

    let manifest: toml::Table = fs::read_to_string(out.join("manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["config_text"].as_str().unwrap(), LOG_CONSUMPTION);
    assert_eq!(manifest["run"]["seed"].as_integer(), Some(42));
    assert!(manifest["run"]["assumptions"].as_array().is_some_and(|a| !a.is_empty()));

    let solution = fs::read_to_string(out.join("solution.csv")).unwrap();
    assert_eq!(solution.lines().count(), 42);
    assert_eq!(csv_column(&solution, "mean_xi")[0], 1.0);
    assert_eq!(csv_column(&solution, "mean_c")[0], 0.5);
}

#[test]
fn malformed_config_is_rejected_with_location() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let typo = LOG_CONSUMPTION.replace("seed = 42", "seed = 42\nsede = 1");
    let cfg = write_config(dir.path(), "typo.toml", &typo);
    let res = run(&["solve"], &cfg, &out);
    assert_eq!(code(&res), 2);
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("sede") && err.contains("line"), "{err}");

    let bad_coef = LOG_CONSUMPTION.replace("constant:0.04", "cubic:0.04");
    let cfg = write_config(dir.path(), "coef.toml", &bad_coef);
    let res = run(&["solve"], &cfg, &out);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("market.rate"));

    let res = run(&["solve"], &dir.path().join("absent.toml"), &out);
    assert_eq!(code(&res), 2);
}

#[test]
fn solver_errors_exit_three() {
    let dir = TempDir::new().unwrap();
    // terminal-only log problem without a bequest weight has no interior solution
    let cfg = LOG_CONSUMPTION.replace("consumption_only", "terminal_only");
    let cfg = write_config(dir.path(), "c.toml", &cfg);
    let res = run(&["solve"], &cfg, &dir.path().join("out"));
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn floor_branch_is_recorded() {
    let dir = TempDir::new().unwrap();
    let body = LOG_CONSUMPTION.replace("x = 1.0", "x = -2.0").replace("kind = \"consumption_only\"", "kind = \"both\"")
        + "\n[endowment]\nkind = \"deterministic\"\nrate = \"constant:1.0\"\nmc_inner_paths = 100\nmc_inner_steps = 10\nmc_seed = 0\n";
    let body = body.replace("h = \"constant:1\"", "h = \"constant:1\"\nbequest = 1.0").replace("rate = \"constant:0.04\"", "rate = \"constant:0.0\"");
    let cfg = write_config(dir.path(), "floor.toml", &body);
    let out = dir.path().join("out");
    let res = run(&["solve"], &cfg, &out);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let manifest: toml::Table = fs::read_to_string(out.join("manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["results"]["branch"].as_str(), Some("floor"));
    assert!(fs::read_to_string(out.join("scalars.csv")).unwrap().contains(",floor,"));
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "log.toml", LOG_CONSUMPTION);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert_eq!(code(&run(&["simulate"], &cfg, &a)), 0);
    assert_eq!(code(&run(&["simulate"], &cfg, &b)), 0);
    assert_eq!(code(&run(&["simulate", "--seed", "43"], &cfg, &c)), 0);
    let pa = fs::read(a.join("paths.csv")).unwrap();
    assert_eq!(pa, fs::read(b.join("paths.csv")).unwrap());
    assert_ne!(pa, fs::read(c.join("paths.csv")).unwrap());
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "log.toml", LOG_CONSUMPTION);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let res = Command::new(env!("CARGO_BIN_EXE_optima"))
            .args(["solve", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .env("OPTIMA_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&res), 0);
        outputs.push(fs::read(out.join("solution.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn zero_rate_and_risk_price_give_unit_deflator() {
    let dir = TempDir::new().unwrap();
    let body = LOG_CONSUMPTION.replace("constant:0.04", "constant:0.0").replace("constant:0.1", "constant:0.0");
    let cfg = write_config(dir.path(), "flat.toml", &body);
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["simulate", "--paths", "20"], &cfg, &out)), 0);
    let paths = fs::read_to_string(out.join("paths.csv")).unwrap();
    assert!(csv_column(&paths, "H").iter().all(|&h| h == 1.0));
}

#[test]
fn bond_column_matches_exponential() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "log.toml", LOG_CONSUMPTION);
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["simulate", "--paths", "5"], &cfg, &out)), 0);
    let paths = fs::read_to_string(out.join("paths.csv")).unwrap();
    let t = csv_column(&paths, "time");
    let b = csv_column(&paths, "B");
    for (t, b) in t.iter().zip(&b) {
        let expected = (0.04 * t).exp();
        assert!((b - expected).abs() <= 1e-12 * expected, "B({t}) = {b}, expected {expected}");
    }
}

#[test]
fn verify_exit_codes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "log.toml", LOG_CONSUMPTION);
    let out = dir.path().join("out");
    let res = run(&["verify"], &cfg, &out);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stdout));
    let table = fs::read_to_string(out.join("verify.csv")).unwrap();
    assert!(table.starts_with("name,statistic,threshold,verdict\n"));
    assert!(table.lines().skip(1).all(|l| l.ends_with(",pass")));

    let biased = format!("{LOG_CONSUMPTION}\n[verify]\ninject_bias = 0.05\n");
    let cfg = write_config(dir.path(), "biased.toml", &biased);
    let res = run(&["verify"], &cfg, &out);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stdout).lines().any(|l| l.starts_with("budget_martingale") && l.ends_with("fail")));

    let missing = format!("{LOG_CONSUMPTION}\n[verify]\npaths_file = \"nowhere.csv\"\n");
    let cfg = write_config(dir.path(), "missing.toml", &missing);
    assert_eq!(code(&run(&["verify"], &cfg, &out)), 2);
}

#[test]
fn verify_reads_simulated_paths() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "log.toml", LOG_CONSUMPTION);
    assert_eq!(code(&run(&["simulate"], &cfg, &dir.path().join("sim"))), 0);
    let body = format!("{LOG_CONSUMPTION}\n[verify]\npaths_file = \"sim/paths.csv\"\n");
    let cfg = write_config(dir.path(), "from_file.toml", &body);
    let res = run(&["verify"], &cfg, &dir.path().join("out"));
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stdout));
}

fn oracle_config(family: &str, periods: &str) -> String {
    let alpha = if family == "power" { "alpha = 0.5\n" } else { "" };
    format!(
        r#"
[market]
n_stocks = 1
n_brownian = 1
rate = "constant:0.03"
drift = ["constant:0.08"]
vol = [["constant:0.2"]]
initial_prices = [1.0, 1.0]
horizon = 1.0

[preference]
family = "{family}"
{alpha}h = "constant:1"
bequest = 0.5

[problem]
kind = "both"
x = 1.3
steps = 10
n_paths = 10
seed = 0

[oracle]
periods = [{periods}]
p_up = 0.5
"#
    )
}

#[test]
fn oracle_agrees_on_small_trees() {
    let dir = TempDir::new().unwrap();
    for (family, periods) in [("log", "2"), ("power", "3")] {
        let cfg = write_config(dir.path(), "o.toml", &oracle_config(family, periods));
        let out = dir.path().join(family);
        let res = run(&["oracle"], &cfg, &out);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        let table = fs::read_to_string(out.join("oracle.csv")).unwrap();
        let dv = csv_column(&table, "abs_dv");
        assert!(dv.iter().all(|d| *d <= 1e-8), "{family}: {dv:?}");
    }
}

#[test]
fn oracle_refuses_large_trees() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "o.toml", &oracle_config("log", "5"));
    let res = run(&["oracle"], &cfg, &dir.path().join("out"));
    assert_eq!(code(&res), 2);
}
