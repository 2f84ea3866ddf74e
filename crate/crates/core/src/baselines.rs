//! Uniform constant rebalancing, long-only max-Sharpe, and the evaluation metrics.

use crate::env::ActionVector;

pub const TRADING_DAYS: f64 = 252.0;
pub const MPT_LOOKBACK: usize = 50;
pub const MPT_RIDGE: f64 = 1e-6;
pub const MPT_STEP: f64 = 0.01;
pub const MPT_ITERS: usize = 500;

/// Equal weight on every risky asset, nothing in cash.
pub fn ucrp_action(m: usize) -> ActionVector {
    let mut w = vec![1.0 / m as f64; m + 1];
    w[0] = 0.0;
    ActionVector::project(&w)
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Sample mean and covariance (denominator n − 1) with `ridge` on the diagonal.
pub fn mean_cov(returns: &[Vec<f64>], ridge: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = returns.len();
    let n = returns[0].len() as f64;
    let mu: Vec<f64> = returns.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let c: f64 = returns[i].iter().zip(&returns[j]).map(|(a, b)| (a - mu[i]) * (b - mu[j])).sum();
            cov[i][j] = c / (n - 1.0) + if i == j { ridge } else { 0.0 };
        }
    }
    (mu, cov)
}

pub fn portfolio_sharpe(w: &[f64], mu: &[f64], cov: &[Vec<f64>]) -> f64 {
    let ret: f64 = w.iter().zip(mu).map(|(a, b)| a * b).sum();
    let var: f64 = (0..w.len()).map(|i| (0..w.len()).map(|j| w[i] * cov[i][j] * w[j]).sum::<f64>()).sum();
    if var <= 0.0 {
        0.0
    } else {
        ret / var.sqrt()
    }
}

/// Long-only max-Sharpe weights over the risky assets by projected gradient ascent.
///
/// `returns[i]` is the trailing daily log-return window of asset `i`. Output has the
/// cash slot first: all cash when every trailing mean is non-positive, UCRP when the
/// covariance is degenerate.
pub fn mpt_action(returns: &[Vec<f64>]) -> ActionVector {
    let m = returns.len();
    if m == 0 {
        return ActionVector::cash_only(1);
    }
    if returns[0].len() < 2 || returns.iter().flatten().any(|r| !r.is_finite()) {
        return ucrp_action(m);
    }
    let (mu, cov) = mean_cov(returns, MPT_RIDGE);
    if mu.iter().all(|&x| x <= 0.0) {
        return ActionVector::cash_only(m + 1);
    }
    if (0..m).any(|i| !(cov[i][i] > 0.0)) {
        return ucrp_action(m);
    }
    let mut w = vec![1.0 / m as f64; m];
    let mut best = (portfolio_sharpe(&w, &mu, &cov), w.clone());
    for _ in 0..MPT_ITERS {
        let ret: f64 = w.iter().zip(&mu).map(|(a, b)| a * b).sum();
        let sw: Vec<f64> = (0..m).map(|i| (0..m).map(|j| cov[i][j] * w[j]).sum()).collect();
        let var: f64 = w.iter().zip(&sw).map(|(a, b)| a * b).sum();
        let sd = var.sqrt();
        // ∇(wᵀμ / √(wᵀΣw)) = μ/σ − (wᵀμ) Σw / σ³
        let raw: Vec<f64> = (0..m).map(|i| mu[i] / sd - ret * sw[i] / (sd * var)).collect();
        let grad = face_direction(&w, &raw);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-12 {
            break;
        }
        let step: Vec<f64> = w.iter().zip(&grad).map(|(a, g)| a + MPT_STEP * g / norm).collect();
        w = project_simplex(&step);
        let s = portfolio_sharpe(&w, &mu, &cov);
        if s > best.0 {
            best = (s, w.clone());
        }
    }
    let mut out = vec![0.0];
    out.extend(best.1);
    ActionVector::project(&out)
}

/// The gradient projected onto the face of the simplex it can move along: zero weights
/// pushed outward stay put and the remaining components sum to zero.
fn face_direction(w: &[f64], grad: &[f64]) -> Vec<f64> {
    let mut free: Vec<bool> = vec![true; w.len()];
    loop {
        let n = free.iter().filter(|&&f| f).count();
        let mean = grad.iter().zip(&free).filter(|(_, &f)| f).map(|(g, _)| g).sum::<f64>() / n as f64;
        let mut changed = false;
        for i in 0..w.len() {
            if free[i] && w[i] <= 0.0 && grad[i] < mean {
                free[i] = false;
                changed = true;
            }
        }
        if !changed {
            return (0..w.len()).map(|i| if free[i] { grad[i] - mean } else { 0.0 }).collect();
        }
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `mean / sample std · √252`; zero when the std is zero or fewer than two returns.
pub fn annualized_sharpe(daily: &[f64]) -> Option<f64> {
    if daily.len() < 2 {
        return None;
    }
    let mu = mean(daily);
    let var = daily.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / (daily.len() - 1) as f64;
    let sd = var.sqrt();
    Some(if sd <= 1e-15 * mu.abs().max(1.0) { 0.0 } else { mu / sd * TRADING_DAYS.sqrt() })
}

/// `mean / downside deviation · √252`; zero when there is no downside.
pub fn annualized_sortino(daily: &[f64]) -> Option<f64> {
    if daily.len() < 2 {
        return None;
    }
    let mu = mean(daily);
    let dd = (daily.iter().map(|r| r.min(0.0).powi(2)).sum::<f64>() / daily.len() as f64).sqrt();
    Some(if dd == 0.0 { 0.0 } else { mu / dd * TRADING_DAYS.sqrt() })
}

/// Largest peak-to-trough fall as a fraction of the peak.
pub fn max_drawdown(values: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &v in values {
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak);
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub cumulative_return_pct: f64,
    pub annualized_sharpe: f64,
    pub annualized_sortino: f64,
    pub max_drawdown: f64,
}

impl MetricReport {
    /// From a value series including the initial point. Ratios use daily log returns.
    pub fn from_values(values: &[f64]) -> Self {
        let first = values.first().copied().unwrap_or(1.0);
        let last = values.last().copied().unwrap_or(first);
        let rets: Vec<f64> = values.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
        Self {
            cumulative_return_pct: (last / first - 1.0) * 100.0,
            annualized_sharpe: annualized_sharpe(&rets).unwrap_or(0.0),
            annualized_sortino: annualized_sortino(&rets).unwrap_or(0.0),
            max_drawdown: max_drawdown(values),
        }
    }
}
