use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_statetame"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("STATETAME_THREADS")
        .output()
        .unwrap()
}

fn config(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL_GBM: &str = r#"
n_paths = 400
[grid]
horizon = 1.0
n_steps = 8
[market]
family = "constant"
initial_prices = [100.0]
rate = 0.05
drift = [0.08]
volatility = [[0.2]]
[[claims]]
id = "call"
payoff = { family = "call", strike = 100.0 }
"#;

#[test]
fn simulate_prints_resolved_config_and_writes_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "run.toml", SMALL_GBM);
    let out = dir.path().join("out");
    let o = run(&["simulate", "--config", &cfg, "--seed", "9"], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed["seed"], 9);
    assert_eq!(printed["estimator"]["degree"], 4);
    assert_eq!(json(&out.join("resolved_config.json")), printed);
    assert!(out.join("scenarios.csv").exists());
    assert!(out.join("summary.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "run.toml", SMALL_GBM);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(code(&run(&["price-european", "--config", &cfg], out)), 0);
    }
    for name in ["valuation_call.json", "hedge_path_call.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn missing_volatility_is_a_usage_error_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "run.toml", &SMALL_GBM.replace("volatility = [[0.2]]", ""));
    let o = run(&["simulate", "--config", &cfg], &dir.path().join("out"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("volatility"), "{}", stderr(&o));
}

#[test]
fn invalid_inputs_exit_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let unknown = write(dir.path(), "unknown.toml", &format!("{SMALL_GBM}\nbogus = 1\n"));
    assert_eq!(code(&run(&["simulate", "--config", &unknown], &out)), 2);
    let cfg = write(dir.path(), "run.toml", SMALL_GBM);
    assert_eq!(code(&run(&["simulate", "--config", &cfg, "--paths", "0"], &out)), 2);
    assert_eq!(
        code(&run(&["price-european", "--config", &cfg, "--claim", "nope"], &out)),
        2
    );
    assert_eq!(code(&run(&["simulate", "--config", "/nonexistent.toml"], &out)), 2);
}

#[test]
fn exploding_euler_scheme_is_a_numerical_error() {
    let dir = TempDir::new().unwrap();
    let text = SMALL_GBM.replace("volatility = [[0.2]]", "volatility = [[1e154]]\nscheme = \"euler\"");
    let cfg = write(dir.path(), "run.toml", &text);
    let o = run(&["simulate", "--config", &cfg], &dir.path().join("out"));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn arbitrage_is_reported_with_portfolio() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = run(
        &[
            "check-arbitrage",
            "--config",
            &config("two_asset_arbitrage.toml"),
            "--paths",
            "500",
        ],
        &out,
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let report = json(&out.join("arbitrage_report.json"));
    assert_eq!(report["report"]["is_state_arbitrage_free"], false);
    assert_eq!(report["arbitrage_gain"]["fraction_positive"], 1.0);
    assert!(report["arbitrage_gain"]["min_deflated_terminal_gain"].as_f64().unwrap() >= 0.0);
    let csv = fs::read_to_string(out.join("arbitrage_portfolio.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    assert!(out.join("arbitrage_gain.csv").exists());
}

#[test]
fn black_scholes_market_is_free() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cfg = write(dir.path(), "run.toml", SMALL_GBM);
    let o = run(&["check-arbitrage", "--config", &cfg], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!out.join("arbitrage_portfolio.csv").exists());
}

#[test]
fn unattainable_claim_cites_rank_condition() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cfg = config("degenerate_vol.toml");
    let o = run(
        &["hedge", "--config", &cfg, "--claim", "call-all", "--paths", "500"],
        &out,
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("rank condition"), "{}", stderr(&o));
    assert_eq!(json(&out.join("attainability_call-all.json"))["min_rank"], 1);

    let o = run(
        &["hedge", "--config", &cfg, "--claim", "call-w1", "--paths", "500"],
        &out,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hedge = json(&out.join("hedge_call-w1.json"));
    assert_eq!(hedge["flagged"], false);
}

#[test]
fn lattice_trace_never_decreases() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = run(&["price-american", "--config", &config("american_lattice.toml")], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(out.join("trace_american-put.csv")).unwrap();
    let values: Vec<f64> = reader.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert!(values.len() > 1);
    assert!(values.windows(2).all(|w| w[1] >= w[0]), "{values:?}");
    let american = json(&out.join("american_american-put.json"));
    assert!(american.to_string().contains(&format!("{}", values.last().unwrap())));
}

#[test]
fn environment_overrides_nested_keys() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "run.toml", SMALL_GBM);
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_statetame"))
        .args(["simulate", "--config", &cfg, "--out"])
        .arg(&out)
        .env("STATETAME_SEED", "5")
        .env("STATETAME_GRID__N_STEPS", "4")
        .env("STATETAME_MARKET__VOLATILITY__0__0", "0.3")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved = json(&out.join("resolved_config.json"));
    assert_eq!(resolved["seed"], 5);
    assert_eq!(resolved["grid"]["n_steps"], 4);
    assert_eq!(resolved["market"]["volatility"][0][0], 0.3);
}

#[test]
fn oracle_writes_boundary() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = run(&["oracle", "--config", &config("american_lattice.toml")], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = json(&out.join("oracle_american-put.json"));
    assert!(v.to_string().contains("value"));
    assert!(out.join("exercise_boundary_american-put.csv").exists());
}
