use relgate::data::{load_csv, synth_gbm, SynthParams};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn relgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relgate")).args(args).output().expect("spawn relgate")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, days: &str, drift: &str, vol: &str) {
    let o = relgate(&["synth", "--assets", "2", "--days", days, "--drift", drift, "--vol", vol, "--seed", "4", "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

const TINY: &str = "num_workers=1\nbatch_size=8\nwindow_len=5\nmax_episode_len=10\nlayers=1\nheads=2\nmodel_dim=8\nffn_dim=16\nupdates_per_episode=2\nseed=5\n";

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("config.txt");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&relgate(&[])), 2);
    assert_eq!(code(&relgate(&["frobnicate"])), 2);
    assert_eq!(code(&relgate(&["backtest", "ucrp"])), 2);
    assert_eq!(code(&relgate(&["--help"])), 0);
}

#[test]
fn synth_output_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "30", "0.001,0.002", "0.01");
    let params = SynthParams::new(2, 30, vec![0.001, 0.002], vec![0.01, 0.01], 4);
    for s in synth_gbm(&params).unwrap() {
        let loaded = load_csv(&dir.path().join(format!("{}.csv", s.symbol))).unwrap();
        assert_eq!(loaded, s);
    }
}

#[test]
fn synth_rejects_mismatched_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = relgate(&["synth", "--assets", "3", "--drift", "0.1,0.2", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn empty_training_run_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "60", "0.001", "0.01");
    let cfg = write_config(dir.path(), "total_episodes=0\n");
    let out = dir.path().join("run");
    let o = relgate(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(out.join("run_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["episodes"], 0);
    assert_eq!(manifest["config"]["total_episodes"], "0");
    assert_eq!(manifest["dataset"]["files"].as_array().unwrap().len(), 2);
    for a in manifest["artifacts"].as_array().unwrap() {
        assert!(out.join(a.as_str().unwrap()).is_file(), "{a}");
    }
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "60", "0.001", "0.01");
    let cfg = write_config(dir.path(), "foo=3\n");
    let o = relgate(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("run"))]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("`foo`"), "{}", stderr(&o));
}

#[test]
fn short_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "10", "0.001", "0.01");
    let cfg = write_config(dir.path(), "total_episodes=1\n");
    let o = relgate(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn training_and_backtests_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "80", "0.002,0.0", "0.01");
    let cfg = write_config(dir.path(), "total_episodes=3\n");
    for run in ["a", "b"] {
        let o = relgate(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join(run))]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["run_log.csv", "checkpoint.bin", "checkpoint.manifest", "config.txt"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let ckpt = dir.path().join("a").join("checkpoint");
    for (policy, run) in [(p(&ckpt), "bt1"), (p(&ckpt), "bt2")] {
        let o = relgate(&[
            "backtest", policy, "--data", p(&data), "--start", "2000-02-01", "--end", "2000-04-01", "--out",
            p(&dir.path().join(run)),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["values.csv", "metrics.json"] {
        assert_eq!(fs::read(dir.path().join("bt1").join(f)).unwrap(), fs::read(dir.path().join("bt2").join(f)).unwrap());
    }
}

#[test]
fn zero_cost_ucrp_is_flat_on_constant_prices() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "60", "0", "0");
    let out = dir.path().join("bt");
    let o = relgate(&[
        "backtest", "ucrp", "--data", p(&data), "--start", "2000-01-10", "--end", "2000-03-01", "--zero-cost", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["cumulative_return_pct"], 0.0);
    let values = fs::read_to_string(out.join("values.csv")).unwrap();
    assert!(values.lines().skip(1).all(|l| l.split(',').nth(1) == Some("100000")), "{values}");
}

#[test]
fn metrics_are_present_and_finite() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "200", "0.001,-0.001", "0.02");
    for policy in ["ucrp", "mpt"] {
        let out = dir.path().join(policy);
        let o = relgate(&["backtest", policy, "--data", p(&data), "--start", "2000-04-01", "--end", "2000-09-01", "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        for k in ["cumulative_return_pct", "annualized_sharpe", "annualized_sortino", "max_drawdown"] {
            assert!(m[k].as_f64().unwrap().is_finite(), "{k}");
        }
        assert_eq!(m["model"], policy);
    }
    let table = dir.path().join("report.csv");
    let o = relgate(&["report", p(&dir.path().join("ucrp")), p(&dir.path().join("mpt")), "--out", p(&table)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("model,cumulative_return_pct,annualized_sharpe"));
}

#[test]
fn bad_policy_and_missing_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "60", "0.001", "0.01");
    let out = p(dir.path());
    let bt = |policy: &str| relgate(&["backtest", policy, "--data", p(&data), "--start", "2000-01-10", "--end", "2000-03-01", "--out", out]);
    assert_eq!(code(&bt("nonsense")), 2);
    assert_eq!(code(&relgate(&["report", "--out", out])), 2);
    assert_eq!(code(&relgate(&["report", p(&dir.path().join("missing")), "--out", p(&dir.path().join("r.csv"))])), 1);
    let o = relgate(&["backtest", "ucrp", "--data", p(&data), "--start", "2030-01-01", "--end", "2030-02-01", "--out", out]);
    assert_eq!(code(&o), 1);
}
