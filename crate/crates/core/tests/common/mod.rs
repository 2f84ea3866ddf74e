//! Test-only oracles: central finite differences and a brute-force attention.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use relgate::tensor::{Bound, Graph, ParamStore, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Relative error with a small absolute floor so near-zero gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Max relative error between backprop and central differences over every
/// element of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
        let y = f(&mut g, &vars).unwrap();
        g.value(y).item().expect("scalar output")
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
    let y = f(&mut g, &vars).unwrap();
    g.backward(y).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    worst
}

/// Same as [`gradcheck`] but over every parameter of a store, checking the
/// gradients the graph writes back into the store. `stride` subsamples
/// elements of large tensors.
pub fn gradcheck_store<F>(store: &ParamStore<f64>, stride: usize, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, Bound<'_, f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let y = f(&mut g, Bound::frozen(s)).unwrap();
        g.value(y).item().expect("scalar output")
    };
    let mut work = store.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let y = f(&mut g, Bound::trainable(&work)).unwrap();
    g.backward(y).unwrap();
    g.write_grads(&mut work);
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        let analytic = work.grad(id).unwrap().clone();
        let n = analytic.numel();
        let mut e = 0;
        while e < n {
            let orig = work.value(id).data()[e];
            work.value_mut(id).data_mut()[e] = orig + FD_STEP;
            let fp = eval(&work);
            work.value_mut(id).data_mut()[e] = orig - FD_STEP;
            let fm = eval(&work);
            work.value_mut(id).data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_err(analytic.data()[e], numeric);
            assert!(
                err < FD_TOL,
                "{}[{e}]: analytic {} vs numeric {numeric}",
                work.name(id),
                analytic.data()[e]
            );
            worst = worst.max(err);
            e += stride;
        }
    }
    worst
}

/// Explicit pairwise 2D relative attention. Returns (output (L,H,D), attention rows).
pub fn attention_oracle(
    x: &Tensor<f64>,
    wq: &Tensor<f64>,
    wk: &Tensor<f64>,
    wv: &Tensor<f64>,
    e_time: &Tensor<f64>,
    e_asset: &Tensor<f64>,
    heads: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (l, h, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let proj = |w: &Tensor<f64>| -> Vec<f64> {
        let mut out = vec![0.0; l * h * d];
        for c in 0..l * h {
            for o in 0..d {
                out[c * d + o] = (0..d).map(|k| x.data()[c * d + k] * w.at(&[k, o])).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let cells = l * h;
    let mut out = vec![0.0; cells * d];
    let mut rows = Vec::new();
    for a in 0..heads {
        for i in 0..l {
            for p in 0..h {
                let qc = i * h + p;
                let mut logits = vec![0.0; cells];
                for j in 0..l {
                    for r in 0..h {
                        let kc = j * h + r;
                        let it = l - 1 - i.abs_diff(j);
                        let ia = h - 1 - p.abs_diff(r);
                        let mut s = 0.0;
                        for t in 0..dh {
                            let qv = q[qc * d + a * dh + t];
                            s += qv * k[kc * d + a * dh + t];
                            s += qv * e_time.at(&[a, it, t]);
                            s += qv * e_asset.at(&[a, ia, t]);
                        }
                        logits[kc] = s / (dh as f64).sqrt();
                    }
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                let probs: Vec<f64> = ex.iter().map(|e| e / z).collect();
                for t in 0..dh {
                    out[qc * d + a * dh + t] = (0..cells).map(|kc| probs[kc] * v[kc * d + a * dh + t]).sum();
                }
                rows.push(probs);
            }
        }
    }
    (out, rows)
}

/// Intraday Brownian path with a bid-ask bounce of half-width `s/2` at the observed prints.
pub fn roll_series(days: usize, spread: f64, vol: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let steps = 100;
    let mut m: f64 = 0.0;
    let (mut close, mut eta) = (Vec::new(), Vec::new());
    for _ in 0..days {
        let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..steps {
            let z: f64 = StandardNormal.sample(&mut r);
            m += vol / (steps as f64).sqrt() * z;
            hi = hi.max(m);
            lo = lo.min(m);
        }
        let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
        close.push(m + sign * spread / 2.0);
        eta.push(0.5 * (hi + spread / 2.0 + lo - spread / 2.0));
    }
    (close, eta)
}
