use anyhow::{anyhow, bail, Context, Result};
use chrono::{NaiveDate, SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use relgate::agent::load_actor;
use relgate::baselines::MetricReport;
use relgate::data::{align_and_transform, load_dir, synth_gbm, write_csv, AlignedDataset, SynthParams};
use relgate::env::{CostModel, MarketData};
use relgate::trainer::{evaluate, train, EvaluationReport, Greedy, Mpt, Policy, TrainConfig, Ucrp, CONFIG_KEYS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "relgate", version, about = "Gated relative-attention DDPG portfolio agent")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write checkpoints, a run log and a run manifest.
    Train(TrainArgs),
    /// Roll a policy over a date span and write its value series and metrics.
    Backtest(BacktestArgs),
    /// Write synthetic geometric-Brownian OHLCV CSVs.
    Synth(SynthArgs),
    /// Merge backtest outputs into one comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file
    #[arg(long)]
    config: PathBuf,
    /// Directory of per-asset CSVs or a saved dataset cache
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BacktestArgs {
    /// `ucrp`, `mpt`, or a checkpoint stem such as `run/checkpoint`
    policy: String,
    #[arg(long)]
    data: PathBuf,
    /// First rebalancing date (rounded forward to a trading day)
    #[arg(long)]
    start: NaiveDate,
    /// Last valuation date (rounded back to a trading day)
    #[arg(long)]
    end: NaiveDate,
    #[arg(long)]
    out: PathBuf,
    /// Disable fees and slippage
    #[arg(long)]
    zero_cost: bool,
    #[arg(long, default_value_t = 100_000.0)]
    initial_cash: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    assets: usize,
    #[arg(long, default_value_t = 500)]
    days: usize,
    /// Daily log drift, one value for all assets or one per asset
    #[arg(long, value_delimiter = ',', default_value = "0.0005")]
    drift: Vec<f64>,
    /// Daily log volatility, one value for all assets or one per asset
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    vol: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    start: Option<NaiveDate>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Backtest output directories
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Bad command-line input detected after parsing; exits with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Serialize, Deserialize)]
struct Metrics {
    model: String,
    start: NaiveDate,
    end: NaiveDate,
    days: usize,
    zero_cost: bool,
    cumulative_return_pct: f64,
    annualized_sharpe: f64,
    annualized_sortino: f64,
    max_drawdown: f64,
}

#[derive(Serialize)]
struct FileHash {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct DatasetIdentity {
    path: PathBuf,
    files: Vec<FileHash>,
    symbols: Vec<String>,
    start: Option<NaiveDate>,
    end: Option<NaiveDate>,
    days: usize,
}

#[derive(Serialize)]
struct RunManifest {
    config: BTreeMap<String, String>,
    seed: u64,
    dataset: DatasetIdentity,
    episodes: usize,
    updates: usize,
    artifacts: Vec<PathBuf>,
    started: String,
    finished: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Backtest(a) => cmd_backtest(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Report(a) => cmd_report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}

fn load_dataset(dir: &Path) -> Result<AlignedDataset> {
    if dir.join("dataset.manifest").is_file() {
        return AlignedDataset::load(dir).with_context(|| format!("loading dataset cache {}", dir.display()));
    }
    let series = load_dir(dir).with_context(|| format!("loading CSVs from {}", dir.display()))?;
    Ok(align_and_transform(&series)?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_dir(dir: &Path) -> Result<Vec<FileHash>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            Ok(FileHash {
                name: p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                sha256: sha256_hex(&fs::read(p)?),
            })
        })
        .collect()
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Restricts the dataset to the configured training dates.
fn training_span(ds: AlignedDataset, cfg: &TrainConfig) -> Result<AlignedDataset> {
    if cfg.train_start.is_none() && cfg.train_end.is_none() {
        return Ok(ds);
    }
    let start = match cfg.train_start {
        Some(d) => ds.day_on_or_after(d).ok_or_else(|| anyhow!("no trading day on or after train_start {d}"))?,
        None => 0,
    };
    let end = match cfg.train_end {
        Some(d) => ds.day_on_or_before(d).ok_or_else(|| anyhow!("no trading day on or before train_end {d}"))? + 1,
        None => ds.num_days(),
    };
    Ok(ds.slice(start, end)?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = now();
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg = TrainConfig::parse(&text).with_context(|| format!("config {}", a.config.display()))?;
    let ds = training_span(load_dataset(&a.data)?, &cfg)?;
    let files = hash_dir(&a.data)?;
    let identity = DatasetIdentity {
        path: a.data.clone(),
        files,
        symbols: ds.symbols.clone(),
        start: ds.dates.first().copied(),
        end: ds.dates.last().copied(),
        days: ds.num_days(),
    };
    let data = MarketData::new(ds, cfg.window_len)?;
    fs::create_dir_all(&a.out)?;
    let snapshot = cfg.to_text();
    fs::write(a.out.join("config.txt"), &snapshot)?;
    let report = train(&cfg, data, Some(&a.out))?;

    let mut artifacts = vec![PathBuf::from("config.txt"), PathBuf::from("run_log.csv")];
    for stem in &report.checkpoints {
        let rel = stem.strip_prefix(&a.out).unwrap_or(stem);
        for ext in ["arch", "manifest", "bin"] {
            artifacts.push(rel.with_extension(ext));
        }
    }
    let config = snapshot
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter(|(k, _)| CONFIG_KEYS.contains(&k.trim()))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    let manifest = RunManifest {
        config,
        seed: cfg.seed,
        dataset: identity,
        episodes: report.episodes,
        updates: report.updates,
        artifacts,
        started,
        finished: now(),
    };
    fs::write(a.out.join("run_manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("trained {} episodes, {} updates -> {}", report.episodes, report.updates, a.out.display());
    Ok(())
}

/// Strips a checkpoint file extension so either the stem or one of its files can be named.
fn checkpoint_stem(token: &str) -> PathBuf {
    let p = PathBuf::from(token);
    match p.extension().and_then(|e| e.to_str()) {
        Some("arch" | "manifest" | "bin") => p.with_extension(""),
        _ => p,
    }
}

fn resolve_policy(token: &str, columns: usize) -> Result<(Box<dyn Policy>, usize)> {
    match token {
        "ucrp" => Ok((Box::new(Ucrp), 1)),
        "mpt" => Ok((Box::new(Mpt::default()), 1)),
        _ => {
            let stem = checkpoint_stem(token);
            if !stem.with_extension("arch").is_file() {
                bail!(UsageError(format!("unknown policy `{token}`: expected ucrp, mpt or a checkpoint stem")));
            }
            let (net, params) = load_actor::<f64>(&stem).with_context(|| format!("loading checkpoint {}", stem.display()))?;
            if net.trunk.cfg.height != columns {
                bail!(
                    "checkpoint expects {} columns (assets plus cash) but the dataset has {columns}",
                    net.trunk.cfg.height
                );
            }
            let window = net.trunk.cfg.time_len;
            Ok((Box::new(Greedy { net, params }), window))
        }
    }
}

fn cmd_backtest(a: BacktestArgs) -> Result<()> {
    if a.end <= a.start {
        bail!(UsageError(format!("--end {} must be after --start {}", a.end, a.start)));
    }
    let ds = load_dataset(&a.data)?;
    let (mut policy, window) = resolve_policy(&a.policy, ds.columns())?;
    let start = ds.day_on_or_after(a.start).ok_or_else(|| anyhow!("no trading day on or after {}", a.start))?;
    let end = ds.day_on_or_before(a.end).ok_or_else(|| anyhow!("no trading day on or before {}", a.end))?;
    if end <= start {
        bail!("span {}..{} holds fewer than two trading days", a.start, a.end);
    }
    let data = MarketData::new(ds, window)?;
    let costs = if a.zero_cost { CostModel::zero() } else { CostModel::default() };
    let rep = evaluate(policy.as_mut(), &data, start, end - start, costs, a.initial_cash)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("values.csv"), rep.to_csv())?;
    let metrics = metrics_of(policy.name(), &rep, a.zero_cost);
    fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    println!(
        "{}: cumulative {:.4}%, sharpe {:.4} -> {}",
        metrics.model,
        metrics.cumulative_return_pct,
        metrics.annualized_sharpe,
        a.out.display()
    );
    Ok(())
}

fn metrics_of(model: &str, rep: &EvaluationReport, zero_cost: bool) -> Metrics {
    let MetricReport {
        cumulative_return_pct,
        annualized_sharpe,
        annualized_sortino,
        max_drawdown,
    } = rep.metrics;
    Metrics {
        model: model.to_string(),
        start: rep.dates[0],
        end: *rep.dates.last().expect("non-empty span"),
        days: rep.actions.len(),
        zero_cost,
        cumulative_return_pct,
        annualized_sharpe,
        annualized_sortino,
        max_drawdown,
    }
}

/// One value broadcast to every asset, or exactly one per asset.
fn per_asset(name: &str, v: &[f64], n: usize) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        k if k == n => Ok(v.to_vec()),
        k => bail!(UsageError(format!("--{name} has {k} values for {n} assets"))),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.assets == 0 || a.days == 0 {
        bail!(UsageError("--assets and --days must be positive".into()));
    }
    let mut p = SynthParams::new(
        a.assets,
        a.days,
        per_asset("drift", &a.drift, a.assets)?,
        per_asset("vol", &a.vol, a.assets)?,
        a.seed,
    );
    if let Some(d) = a.start {
        p.start_date = d;
    }
    fs::create_dir_all(&a.out)?;
    for s in synth_gbm(&p)? {
        write_csv(&s, &a.out.join(format!("{}.csv", s.symbol)))?;
    }
    println!("wrote {} assets x {} days -> {}", a.assets, a.days, a.out.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut out = String::from("model,cumulative_return_pct,annualized_sharpe,annualized_sortino,max_drawdown,run\n");
    for dir in &a.runs {
        let path = dir.join("metrics.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Metrics = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.model,
            m.cumulative_return_pct,
            m.annualized_sharpe,
            m.annualized_sortino,
            m.max_drawdown,
            dir.display()
        ));
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, out)?;
    println!("{} runs -> {}", a.runs.len(), a.out.display());
    Ok(())
}
