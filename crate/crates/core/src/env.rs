//! Market simulator: observation windows, integer-share rebalancing with fees and
//! spread slippage, and a Sortino-style reward.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use thiserror::Error;

use crate::data::{AlignedDataset, NUM_FEATURES};
use crate::tensor::Tensor;
use crate::Scalar;

pub const DEFAULT_FEE_RATE: f64 = 0.002;
pub const DEFAULT_SLIPPAGE: f64 = 0.5;
pub const DEFAULT_INITIAL_CASH: f64 = 100_000.0;
pub const DEFAULT_MAX_EPISODE_LEN: usize = 50;
pub const SPREAD_WINDOW: usize = 30;
/// Downside deviations below this are treated as zero.
pub const REWARD_EPS: f64 = 1e-8;
pub const REWARD_CAP: f64 = 10.0;
/// Per-iteration shrink of target values when cash would go negative.
pub const SHRINK: f64 = 0.999;
const MAX_SHRINK_ITERS: usize = 100_000;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action has {got} weights, expected {expected}")]
    ActionLength { expected: usize, got: usize },
    #[error("action is not on the simplex: {0}")]
    NotSimplex(String),
    #[error("start day {start} out of range: need {min} <= start < {max}")]
    StartOutOfRange { start: usize, min: usize, max: usize },
    #[error("episode is over; call reset")]
    Terminal,
    #[error("environment was never reset")]
    NotReset,
    #[error("no feasible integer allocation leaves non-negative cash")]
    Infeasible,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;

/// Roll-style bid-ask spread from log closes and log mid-prices `(log high + log low) / 2`.
///
/// The product for day `k` is `(c_k − η_k)(c_k − η_{k+1})`, so `d_t` averages products
/// `k ∈ [t−30, t−1]`, which only touch prices up to day `t`. `d_0` has no history and is 0.
pub fn estimate_spread(close_log: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
    let n = close_log.len();
    if eta.len() != n {
        return Err(EnvError::Invalid(format!("{n} closes but {} mid-prices", eta.len())));
    }
    if n < 2 {
        return Err(EnvError::Invalid(format!("spread needs at least 2 days, got {n}")));
    }
    if close_log.iter().chain(eta).any(|v| !v.is_finite()) {
        return Err(EnvError::Invalid("non-finite log price".into()));
    }
    let products: Vec<f64> = (0..n.saturating_sub(1))
        .map(|k| (close_log[k] - eta[k]) * (close_log[k] - eta[k + 1]))
        .collect();
    let mut out = vec![0.0; n];
    for (t, slot) in out.iter_mut().enumerate().skip(1) {
        let lo = t.saturating_sub(SPREAD_WINDOW);
        let w = &products[lo..t];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        *slot = 2.0 * mean.max(0.0).sqrt();
    }
    Ok(out)
}

/// Mean over downside deviation of the episode's returns so far, floored at `REWARD_EPS`
/// in the denominator and clamped to `±REWARD_CAP`.
pub fn sortino_reward(returns: &[f64]) -> f64 {
    if returns.is_empty() {
        return 0.0;
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let downside = (returns.iter().map(|r| r.min(0.0).powi(2)).sum::<f64>() / n).sqrt();
    (mean / downside.max(REWARD_EPS)).clamp(-REWARD_CAP, REWARD_CAP)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub fee_rate: f64,
    pub slippage: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            fee_rate: DEFAULT_FEE_RATE,
            slippage: DEFAULT_SLIPPAGE,
        }
    }
}

impl CostModel {
    pub fn zero() -> Self {
        Self {
            fee_rate: 0.0,
            slippage: 0.0,
        }
    }

    /// Proportional cost of trading `notional` of an asset whose spread is `spread`.
    pub fn rate(&self, spread: f64) -> f64 {
        self.fee_rate + self.slippage * spread
    }
}

/// Target portfolio weights over cash and the risky assets.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionVector(Vec<f64>);

impl ActionVector {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < -Self::TOLERANCE) {
            return Err(EnvError::NotSimplex(format!("{w:?}")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > Self::TOLERANCE {
            return Err(EnvError::NotSimplex(format!("weights sum to {s}")));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn cash_only(n: usize) -> Self {
        let mut w = vec![0.0; n];
        w[0] = 1.0;
        Self(w)
    }

    /// Clips to `[0, 1]` and renormalises; falls back to uniform when nothing is left.
    pub fn project(raw: &[f64]) -> Self {
        let clipped: Vec<f64> = raw.iter().map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }).collect();
        let s: f64 = clipped.iter().sum();
        if s <= 0.0 {
            Self::uniform(raw.len())
        } else {
            Self(clipped.into_iter().map(|v| v / s).collect())
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Last `L` days of log-differenced features, stored `(5, L, m+1)` with row 0 the most recent day.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationWindow {
    pub day: usize,
    pub window_len: usize,
    pub columns: usize,
    data: Arc<[f64]>,
}

impl ObservationWindow {
    pub fn build(ds: &AlignedDataset, day: usize, window_len: usize) -> Result<Self> {
        if day + 1 < window_len || day >= ds.num_days() {
            return Err(EnvError::StartOutOfRange {
                start: day,
                min: window_len.saturating_sub(1),
                max: ds.num_days(),
            });
        }
        let n = ds.columns();
        let mut data = vec![0.0; NUM_FEATURES * window_len * n];
        for f in 0..NUM_FEATURES {
            for r in 0..window_len {
                for c in 0..n {
                    data[(f * window_len + r) * n + c] = ds.diff(day - r, c, f);
                }
            }
        }
        Ok(Self {
            day,
            window_len,
            columns: n,
            data: data.into(),
        })
    }

    pub fn get(&self, feature: usize, row: usize, column: usize) -> f64 {
        self.data[(feature * self.window_len + row) * self.columns + column]
    }

    pub fn planes(&self) -> &[f64] {
        &self.data
    }

    /// Features-last layout `(L, m+1, 5)` for the encoder.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let (l, n) = (self.window_len, self.columns);
        Tensor::from_fn(&[l, n, NUM_FEATURES], |i| {
            let f = i % NUM_FEATURES;
            let c = (i / NUM_FEATURES) % n;
            let r = i / (NUM_FEATURES * n);
            S::of(self.get(f, r, c))
        })
    }

    /// Stacks windows into `(B, L, m+1, 5)`.
    pub fn batch<S: Scalar>(windows: &[&ObservationWindow]) -> Tensor<S> {
        let first = windows[0];
        let per = first.window_len * first.columns * NUM_FEATURES;
        let mut data = Vec::with_capacity(per * windows.len());
        for w in windows {
            data.extend_from_slice(w.to_tensor::<S>().data());
        }
        Tensor::new(&[windows.len(), first.window_len, first.columns, NUM_FEATURES], data).expect("consistent window shapes")
    }
}

/// Dataset plus lazily built per-day observation windows, shared across workers.
#[derive(Debug)]
pub struct MarketData {
    pub dataset: AlignedDataset,
    pub window_len: usize,
    windows: Vec<OnceLock<ObservationWindow>>,
}

impl MarketData {
    pub fn new(dataset: AlignedDataset, window_len: usize) -> Result<Arc<Self>> {
        if window_len == 0 || window_len >= dataset.num_days() {
            return Err(EnvError::Invalid(format!(
                "window length {window_len} needs 1..{} days",
                dataset.num_days()
            )));
        }
        let windows = (0..dataset.num_days()).map(|_| OnceLock::new()).collect();
        Ok(Arc::new(Self {
            dataset,
            window_len,
            windows,
        }))
    }

    pub fn window(&self, day: usize) -> Result<ObservationWindow> {
        if let Some(w) = self.windows.get(day).and_then(|c| c.get()) {
            return Ok(w.clone());
        }
        let w = ObservationWindow::build(&self.dataset, day, self.window_len)?;
        Ok(self.windows[day].get_or_init(|| w).clone())
    }

    /// First day an episode may start on.
    pub fn first_start(&self) -> usize {
        self.window_len - 1
    }

    /// One past the last valid start (an episode needs a following day).
    pub fn end_start(&self) -> usize {
        self.dataset.num_days() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PortfolioLedger {
    /// Cash first (real-valued), then integer share counts.
    pub shares: Vec<f64>,
    pub value: f64,
    pub returns: Vec<f64>,
}

impl PortfolioLedger {
    pub fn cash(columns: usize, cash: f64) -> Self {
        let mut shares = vec![0.0; columns];
        shares[0] = cash;
        Self {
            shares,
            value: cash,
            returns: Vec::new(),
        }
    }

    pub fn value_at(&self, closes: &[f64]) -> f64 {
        self.shares.iter().zip(closes).map(|(s, c)| s * c).sum()
    }

    pub fn weights_at(&self, closes: &[f64]) -> Vec<f64> {
        let p = self.value_at(closes);
        self.shares.iter().zip(closes).map(|(s, c)| s * c / p).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RebalanceOutcome {
    pub shares: Vec<f64>,
    pub cost: f64,
    pub value_before: f64,
}

/// Share count for a target value, snapping quotients within 1e-9 (relative) of an
/// integer so that re-submitting current weights does not lose a share to rounding.
fn whole_shares(target: f64, price: f64) -> f64 {
    let q = target / price;
    let r = q.round();
    if (q - r).abs() <= 1e-9 * q.abs().max(1.0) {
        r
    } else {
        q.floor()
    }
}

/// Converts target weights into whole shares at `closes`, paying fees and spread
/// slippage from cash. Target values shrink by [`SHRINK`] until cash is non-negative.
pub fn rebalance(held: &[f64], action: &ActionVector, closes: &[f64], spreads: &[f64], costs: &CostModel) -> Result<RebalanceOutcome> {
    let n = held.len();
    if action.len() != n {
        return Err(EnvError::ActionLength {
            expected: n,
            got: action.len(),
        });
    }
    let value_before: f64 = held.iter().zip(closes).map(|(s, c)| s * c).sum();
    let mut targets: Vec<f64> = action.weights().iter().map(|w| w * value_before).collect();
    for _ in 0..MAX_SHRINK_ITERS {
        let mut shares = vec![0.0; n];
        let mut invested = 0.0;
        let mut cost = 0.0;
        for i in 1..n {
            shares[i] = whole_shares(targets[i], closes[i]).max(0.0);
            invested += closes[i] * shares[i];
            cost += closes[i] * (shares[i] - held[i]).abs() * costs.rate(spreads[i]);
        }
        let cash = value_before - invested - cost;
        if cash >= 0.0 {
            shares[0] = cash;
            return Ok(RebalanceOutcome {
                shares,
                cost,
                value_before,
            });
        }
        if shares[1..].iter().all(|&s| s == 0.0) {
            break;
        }
        for t in &mut targets[1..] {
            *t *= SHRINK;
        }
    }
    Err(EnvError::Infeasible)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: ObservationWindow,
    pub reward: f64,
    pub terminal: bool,
    pub log_return: f64,
    pub cost: f64,
    pub value: f64,
}

pub struct MarketEnv {
    data: Arc<MarketData>,
    pub costs: CostModel,
    pub max_episode_len: usize,
    day: usize,
    steps: usize,
    ledger: Option<PortfolioLedger>,
    terminal: bool,
    trace: Option<BufWriter<File>>,
}

impl MarketEnv {
    pub fn new(data: Arc<MarketData>, costs: CostModel, max_episode_len: usize) -> Self {
        Self {
            data,
            costs,
            max_episode_len,
            day: 0,
            steps: 0,
            ledger: None,
            terminal: false,
            trace: None,
        }
    }

    pub fn data(&self) -> &Arc<MarketData> {
        &self.data
    }

    pub fn columns(&self) -> usize {
        self.data.dataset.columns()
    }

    pub fn day(&self) -> usize {
        self.day
    }

    pub fn ledger(&self) -> Option<&PortfolioLedger> {
        self.ledger.as_ref()
    }

    /// Appends one CSV row per step: day, date, action, shares, cost, value, reward.
    pub fn enable_trace(&mut self, path: &Path) -> Result<()> {
        let exists = path.exists();
        let mut w = BufWriter::new(File::options().create(true).append(true).open(path)?);
        if !exists {
            let n = self.columns();
            let mut cols = vec!["day".to_string(), "date".to_string()];
            cols.extend((0..n).map(|i| format!("a{i}")));
            cols.extend((0..n).map(|i| format!("s{i}")));
            cols.extend(["cost", "value", "reward"].map(String::from));
            writeln!(w, "{}", cols.join(","))?;
        }
        self.trace = Some(w);
        Ok(())
    }

    pub fn reset(&mut self, start: usize, initial_cash: f64) -> Result<ObservationWindow> {
        let (min, max) = (self.data.first_start(), self.data.end_start());
        if start < min || start >= max {
            return Err(EnvError::StartOutOfRange { start, min, max });
        }
        if !(initial_cash > 0.0 && initial_cash.is_finite()) {
            return Err(EnvError::Invalid(format!("initial cash {initial_cash}")));
        }
        self.day = start;
        self.steps = 0;
        self.terminal = false;
        self.ledger = Some(PortfolioLedger::cash(self.columns(), initial_cash));
        self.data.window(start)
    }

    pub fn step(&mut self, action: &ActionVector) -> Result<StepOutcome> {
        if self.terminal {
            return Err(EnvError::Terminal);
        }
        let ds = &self.data.dataset;
        let ledger = self.ledger.as_mut().ok_or(EnvError::NotReset)?;
        let t = self.day;
        let closes = ds.closes(t);
        let out = rebalance(&ledger.shares, action, &closes, ds.spreads(t), &self.costs)?;
        let next = ds.closes(t + 1);
        let value: f64 = out.shares.iter().zip(&next).map(|(s, c)| s * c).sum();
        if !(value > 0.0) {
            return Err(EnvError::Invalid(format!("portfolio value {value} on day {}", t + 1)));
        }
        let log_return = value.ln() - out.value_before.ln();
        ledger.shares = out.shares;
        ledger.value = value;
        ledger.returns.push(log_return);
        let reward = sortino_reward(&ledger.returns);
        self.day = t + 1;
        self.steps += 1;
        self.terminal = self.steps >= self.max_episode_len || self.day + 1 >= ds.num_days();
        if let Some(w) = self.trace.as_mut() {
            let mut row = vec![t.to_string(), ds.dates[t].to_string()];
            row.extend(action.weights().iter().map(|v| v.to_string()));
            row.extend(ledger.shares.iter().map(|v| v.to_string()));
            row.extend([out.cost, value, reward].map(|v| v.to_string()));
            writeln!(w, "{}", row.join(","))?;
            w.flush()?;
        }
        Ok(StepOutcome {
            observation: self.data.window(self.day)?,
            reward,
            terminal: self.terminal,
            log_return,
            cost: out.cost,
            value,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sortino_worked_example() {
        let r = sortino_reward(&[0.01, -0.02, 0.03]);
        assert!((r - 0.577_350_269).abs() < 1e-6, "{r}");
    }

    #[test]
    fn sortino_caps_without_downside() {
        assert_eq!(sortino_reward(&[0.01, 0.02]), REWARD_CAP);
        assert_eq!(sortino_reward(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn rebalance_worked_example() {
        let costs = CostModel {
            fee_rate: 0.002,
            slippage: 0.0,
        };
        let a = ActionVector::new(vec![0.5, 0.5]).unwrap();
        let out = rebalance(&[1000.0, 0.0], &a, &[1.0, 30.0], &[0.0, 0.0], &costs).unwrap();
        assert_eq!(out.shares[1], 16.0);
        assert!((out.cost - 0.96).abs() < 1e-12);
        assert!((out.shares[0] - 519.04).abs() < 1e-9);
    }

    #[test]
    fn holding_current_weights_costs_nothing() {
        let held = [123.4, 7.0, 3.0];
        let closes = [1.0, 13.7, 41.1];
        let p: f64 = held.iter().zip(&closes).map(|(s, c)| s * c).sum();
        let w: Vec<f64> = held.iter().zip(&closes).map(|(s, c)| s * c / p).collect();
        let out = rebalance(&held, &ActionVector::new(w).unwrap(), &closes, &[0.0, 0.01, 0.02], &CostModel::default()).unwrap();
        assert_eq!(&out.shares[1..], &held[1..]);
        assert_eq!(out.cost, 0.0);
    }

    #[test]
    fn shrinks_until_cash_is_non_negative() {
        let a = ActionVector::new(vec![0.0, 1.0]).unwrap();
        let out = rebalance(&[100.0, 0.0], &a, &[1.0, 10.0], &[0.0, 0.0], &CostModel::default()).unwrap();
        assert_eq!(out.shares[1], 9.0);
        assert!(out.shares[0] >= 0.0);
    }

    #[test]
    fn projection_falls_back_to_uniform() {
        assert_eq!(ActionVector::project(&[-1.0, -2.0]).weights(), &[0.5, 0.5]);
        assert_eq!(ActionVector::project(&[2.0, 0.0, 1.0]).weights(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn spread_is_zero_when_close_equals_mid() {
        let c = [0.1, 0.2, 0.15, 0.3];
        assert!(estimate_spread(&c, &c).unwrap().iter().all(|&d| d == 0.0));
    }
}
