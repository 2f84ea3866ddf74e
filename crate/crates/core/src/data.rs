//! OHLCV ingestion, calendar alignment, log-differencing and synthetic series.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::env::estimate_spread;
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor, TensorError};

pub const NUM_FEATURES: usize = 5;
pub const CSV_HEADER: [&str; 6] = ["date", "open", "high", "low", "close", "volume"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("{symbol} {date}: {msg}")]
    Inconsistent { symbol: String, date: NaiveDate, msg: String },
    #[error("{symbol}: duplicate date {date}")]
    DuplicateDate { symbol: String, date: NaiveDate },
    #[error("no common dates across inputs (need at least 2, found {0})")]
    EmptyIntersection(usize),
    #[error("no input series")]
    NoSeries,
    #[error("no CSV files in {0}")]
    EmptyDirectory(String),
    #[error("spread estimation: {0}")]
    Spread(String),
    #[error("dataset cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    pub fn features(&self) -> [f64; NUM_FEATURES] {
        [self.open, self.high, self.low, self.close, self.volume]
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let f = self.features();
        if f.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if self.open <= 0.0 || self.high <= 0.0 || self.low <= 0.0 || self.close <= 0.0 {
            return Err("prices must be positive".into());
        }
        if self.volume < 0.0 {
            return Err("negative volume".into());
        }
        if self.high < self.low {
            return Err(format!("high {} below low {}", self.high, self.low));
        }
        if self.high < self.open.max(self.close) {
            return Err(format!("high {} below max(open, close)", self.high));
        }
        if self.low > self.open.min(self.close) {
            return Err(format!("low {} above min(open, close)", self.low));
        }
        Ok(())
    }
}

/// One asset's dated OHLCV rows with strictly increasing dates.
#[derive(Clone, Debug, PartialEq)]
pub struct AssetSeries {
    pub symbol: String,
    pub bars: Vec<Bar>,
}

impl AssetSeries {
    pub fn new(symbol: impl Into<String>, mut bars: Vec<Bar>) -> Result<Self> {
        let symbol = symbol.into();
        bars.sort_by_key(|b| b.date);
        for w in bars.windows(2) {
            if w[0].date == w[1].date {
                return Err(DataError::DuplicateDate {
                    symbol,
                    date: w[0].date,
                });
            }
        }
        for b in &bars {
            b.validate().map_err(|msg| DataError::Inconsistent {
                symbol: symbol.clone(),
                date: b.date,
                msg,
            })?;
        }
        Ok(Self { symbol, bars })
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }
}

/// Reads `date,open,high,low,close,volume` with ISO-8601 dates. The symbol is the file stem.
pub fn load_csv(path: &Path) -> Result<AssetSeries> {
    let display = path.display().to_string();
    let symbol = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    if header != CSV_HEADER {
        return Err(DataError::Malformed {
            path: display,
            line: 1,
            msg: format!("expected header {}, got {}", CSV_HEADER.join(","), header.join(",")),
        });
    }
    let mut bars = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let bad = |msg: String| DataError::Malformed {
            path: display.clone(),
            line,
            msg,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| bad(format!("date `{}`: {e}", &rec[0])))?;
        let mut v = [0.0; 5];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = rec[k + 1]
                .parse()
                .map_err(|_| bad(format!("{} `{}` is not a number", CSV_HEADER[k + 1], &rec[k + 1])))?;
        }
        bars.push(Bar {
            date,
            open: v[0],
            high: v[1],
            low: v[2],
            close: v[3],
            volume: v[4],
        });
    }
    AssetSeries::new(symbol, bars)
}

pub fn write_csv(series: &AssetSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for b in &series.bars {
        w.write_record([
            b.date.format("%Y-%m-%d").to_string(),
            format!("{}", b.open),
            format!("{}", b.high),
            format!("{}", b.low),
            format!("{}", b.close),
            format!("{}", b.volume),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// All `*.csv` files of a directory, sorted by file name.
pub fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::EmptyDirectory(dir.display().to_string()));
    }
    Ok(files)
}

pub fn load_dir(dir: &Path) -> Result<Vec<AssetSeries>> {
    csv_files(dir)?.iter().map(|p| load_csv(p)).collect()
}

/// Assets on a common calendar with cash in column 0.
///
/// Matrices are indexed by day `t` over `dates` (the first common date is consumed
/// by differencing), column `c` (0 = cash) and feature `f` (OHLCV), flattened as
/// `(t · columns + c) · 5 + f`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedDataset {
    pub symbols: Vec<String>,
    pub dates: Vec<NaiveDate>,
    raw: Vec<f64>,
    diff: Vec<f64>,
    /// `(t · columns + c)`, zero for cash.
    spread: Vec<f64>,
}

impl AlignedDataset {
    pub fn num_days(&self) -> usize {
        self.dates.len()
    }

    /// Risky assets, excluding cash.
    pub fn num_assets(&self) -> usize {
        self.symbols.len()
    }

    pub fn columns(&self) -> usize {
        self.symbols.len() + 1
    }

    fn at(&self, t: usize, c: usize, f: usize) -> usize {
        (t * self.columns() + c) * NUM_FEATURES + f
    }

    pub fn raw(&self, t: usize, c: usize, f: usize) -> f64 {
        self.raw[self.at(t, c, f)]
    }

    pub fn diff(&self, t: usize, c: usize, f: usize) -> f64 {
        self.diff[self.at(t, c, f)]
    }

    /// Closing prices of day `t`, cash first (always 1).
    pub fn closes(&self, t: usize) -> Vec<f64> {
        (0..self.columns()).map(|c| self.raw(t, c, 3)).collect()
    }

    pub fn spreads(&self, t: usize) -> &[f64] {
        let n = self.columns();
        &self.spread[t * n..(t + 1) * n]
    }

    /// Log-differenced close of asset column `c` on day `t`.
    pub fn log_return(&self, t: usize, c: usize) -> f64 {
        self.diff(t, c, 3)
    }

    pub fn day_of(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// First day on or after `date`.
    pub fn day_on_or_after(&self, date: NaiveDate) -> Option<usize> {
        let i = self.dates.partition_point(|d| *d < date);
        (i < self.dates.len()).then_some(i)
    }

    /// Last day on or before `date`.
    pub fn day_on_or_before(&self, date: NaiveDate) -> Option<usize> {
        self.dates.partition_point(|d| *d <= date).checked_sub(1)
    }

    /// Days `start..end` as a standalone dataset (spreads keep their original history).
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.num_days() {
            return Err(DataError::Cache(format!("day range {start}..{end} outside 0..{}", self.num_days())));
        }
        let row = self.columns() * NUM_FEATURES;
        let n = self.columns();
        Ok(Self {
            symbols: self.symbols.clone(),
            dates: self.dates[start..end].to_vec(),
            raw: self.raw[start * row..end * row].to_vec(),
            diff: self.diff[start * row..end * row].to_vec(),
            spread: self.spread[start * n..end * n].to_vec(),
        })
    }

    /// Writes a cache directory: `dataset.manifest` plus one checkpoint per asset
    /// holding `raw` (T, 5), `diff` (T, 5) and `spread` (T).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("# relgate-dataset v1\n");
        manifest.push_str(&format!("symbols={}\n", self.symbols.join(",")));
        manifest.push_str(&format!("start={}\nend={}\ndays={}\n", self.dates[0], self.dates[self.num_days() - 1], self.num_days()));
        let dates: Vec<String> = self.dates.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("dates={}\n", dates.join(",")));
        fs::write(dir.join("dataset.manifest"), manifest)?;
        let t = self.num_days();
        for (a, sym) in self.symbols.iter().enumerate() {
            let c = a + 1;
            let pick = |src: &[f64]| -> Vec<f64> {
                (0..t)
                    .flat_map(|d| (0..NUM_FEATURES).map(move |f| (d, f)))
                    .map(|(d, f)| src[self.at(d, c, f)])
                    .collect()
            };
            let raw = Tensor::new(&[t, NUM_FEATURES], pick(&self.raw))?;
            let diff = Tensor::new(&[t, NUM_FEATURES], pick(&self.diff))?;
            let spread = Tensor::new(&[t], (0..t).map(|d| self.spreads(d)[c]).collect())?;
            write_checkpoint(&dir.join(sym), [("raw", &raw), ("diff", &diff), ("spread", &spread)])?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("dataset.manifest"))?;
        let field = |k: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| DataError::Cache(format!("manifest missing `{k}`")))
        };
        let symbols: Vec<String> = field("symbols")?.split(',').map(str::to_string).collect();
        let dates = field("dates")?
            .split(',')
            .map(|d| d.parse::<NaiveDate>().map_err(|e| DataError::Cache(format!("date `{d}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let t = dates.len();
        let n = symbols.len() + 1;
        let mut raw = vec![0.0; t * n * NUM_FEATURES];
        let mut diff = vec![0.0; t * n * NUM_FEATURES];
        let mut spread = vec![0.0; t * n];
        for d in 0..t {
            for f in 0..NUM_FEATURES {
                raw[(d * n) * NUM_FEATURES + f] = 1.0;
            }
        }
        for (a, sym) in symbols.iter().enumerate() {
            let c = a + 1;
            let parts = read_checkpoint::<f64>(&dir.join(sym))?;
            let get = |name: &str, len: usize| -> Result<&Tensor<f64>> {
                parts
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t)
                    .filter(|t| t.numel() == len)
                    .ok_or_else(|| DataError::Cache(format!("{sym}: missing or mis-sized `{name}`")))
            };
            let (r, df, sp) = (get("raw", t * NUM_FEATURES)?, get("diff", t * NUM_FEATURES)?, get("spread", t)?);
            for d in 0..t {
                for f in 0..NUM_FEATURES {
                    raw[(d * n + c) * NUM_FEATURES + f] = r.data()[d * NUM_FEATURES + f];
                    diff[(d * n + c) * NUM_FEATURES + f] = df.data()[d * NUM_FEATURES + f];
                }
                spread[d * n + c] = sp.data()[d];
            }
        }
        Ok(Self {
            symbols,
            dates,
            raw,
            diff,
            spread,
        })
    }
}

/// Intersects calendars, builds raw and log-differenced matrices, and estimates spreads.
pub fn align_and_transform(series: &[AssetSeries]) -> Result<AlignedDataset> {
    if series.is_empty() {
        return Err(DataError::NoSeries);
    }
    let mut common: BTreeSet<NaiveDate> = series[0].bars.iter().map(|b| b.date).collect();
    for s in &series[1..] {
        let dates: BTreeSet<NaiveDate> = s.bars.iter().map(|b| b.date).collect();
        common = common.intersection(&dates).copied().collect();
    }
    if common.len() < 2 {
        return Err(DataError::EmptyIntersection(common.len()));
    }
    let all_dates: Vec<NaiveDate> = common.into_iter().collect();
    let n_all = all_dates.len();
    let t = n_all - 1;
    let n = series.len() + 1;
    let mut raw = vec![1.0; t * n * NUM_FEATURES];
    let mut diff = vec![0.0; t * n * NUM_FEATURES];
    let mut spread = vec![0.0; t * n];
    for (a, s) in series.iter().enumerate() {
        let c = a + 1;
        let bars: Vec<&Bar> = {
            let mut it = s.bars.iter().peekable();
            all_dates
                .iter()
                .map(|d| {
                    while it.peek().is_some_and(|b| b.date < *d) {
                        it.next();
                    }
                    it.next().expect("date is in the intersection")
                })
                .collect()
        };
        let logf = |b: &Bar| -> [f64; NUM_FEATURES] {
            let f = b.features();
            [f[0].ln(), f[1].ln(), f[2].ln(), f[3].ln(), f[4].max(1.0).ln()]
        };
        let logs: Vec<[f64; NUM_FEATURES]> = bars.iter().map(|b| logf(b)).collect();
        for d in 1..n_all {
            for f in 0..NUM_FEATURES {
                let k = ((d - 1) * n + c) * NUM_FEATURES + f;
                raw[k] = bars[d].features()[f];
                diff[k] = logs[d][f] - logs[d - 1][f];
            }
        }
        let close_log: Vec<f64> = logs.iter().map(|l| l[3]).collect();
        let eta: Vec<f64> = logs.iter().map(|l| 0.5 * (l[1] + l[2])).collect();
        let d_series = estimate_spread(&close_log, &eta).map_err(|e| DataError::Spread(e.to_string()))?;
        for d in 1..n_all {
            spread[(d - 1) * n + c] = d_series[d];
        }
    }
    Ok(AlignedDataset {
        symbols: series.iter().map(|s| s.symbol.clone()).collect(),
        dates: all_dates[1..].to_vec(),
        raw,
        diff,
        spread,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub num_assets: usize,
    pub num_days: usize,
    pub drift: Vec<f64>,
    pub volatility: Vec<f64>,
    pub seed: u64,
    pub start_price: f64,
    /// Fractional widening of high/low beyond max/min(open, close).
    pub intraday: f64,
    pub start_date: NaiveDate,
}

impl SynthParams {
    pub fn new(num_assets: usize, num_days: usize, drift: Vec<f64>, volatility: Vec<f64>, seed: u64) -> Self {
        Self {
            num_assets,
            num_days,
            drift,
            volatility,
            seed,
            start_price: 100.0,
            intraday: 0.002,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
        }
    }
}

/// Consecutive weekdays starting at `start` (moved forward off a weekend).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Geometric Brownian closes per asset; open is the previous close and high/low
/// widen max/min(open, close) by `intraday`.
pub fn synth_gbm(p: &SynthParams) -> Result<Vec<AssetSeries>> {
    if p.drift.len() != p.num_assets || p.volatility.len() != p.num_assets {
        return Err(DataError::Spread(format!(
            "need {} drift and volatility values, got {} and {}",
            p.num_assets,
            p.drift.len(),
            p.volatility.len()
        )));
    }
    let dates = business_days(p.start_date, p.num_days);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut out = Vec::with_capacity(p.num_assets);
    for a in 0..p.num_assets {
        let (mu, sigma) = (p.drift[a], p.volatility[a]);
        let mut close = p.start_price;
        let mut bars = Vec::with_capacity(p.num_days);
        for (t, &date) in dates.iter().enumerate() {
            let open = close;
            if t > 0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                close *= (mu - 0.5 * sigma * sigma + sigma * z).exp();
            }
            let vz: f64 = StandardNormal.sample(&mut rng);
            bars.push(Bar {
                date,
                open,
                high: open.max(close) * (1.0 + p.intraday),
                low: open.min(close) * (1.0 - p.intraday),
                close,
                volume: (1e6 * (0.1 * vz).exp()).round(),
            });
        }
        out.push(AssetSeries::new(format!("ASSET{a}"), bars)?);
    }
    Ok(out)
}
