//! Multi-head self-attention over a (time × asset) grid with learned relative
//! position embeddings on both axes.
//!
//! Relative index convention: for positions `i`, `j` on an axis of length `N`
//! the embedding row is `(N − 1) − |i − j|`, so the last row is distance 0.
//! The query-embedding products are laid out per key with the pad–reshape–drop
//! skew, once for the lower triangle and once on the index-reversed queries for
//! the upper triangle.

use rand::Rng;

use super::{glorot, uniform};
use crate::scalar::Scalar;
use crate::tensor::{invalid, Bound, Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelAttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub time_len: usize,
    pub height: usize,
}

impl RelAttentionConfig {
    pub fn new(model_dim: usize, heads: usize, time_len: usize, height: usize) -> Result<Self> {
        let cfg = Self {
            model_dim,
            heads,
            time_len,
            height,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(invalid(
                "attention",
                format!("{} heads do not divide model dim {}", self.heads, self.model_dim),
            ));
        }
        if self.time_len == 0 || self.height == 0 {
            return Err(invalid("attention", "time and asset extents must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Query/key/value projections plus the time- and asset-axis embeddings.
#[derive(Clone, Copy, Debug)]
pub struct RelAttention {
    pub cfg: RelAttentionConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// `(heads, time_len, head_dim)`
    pub e_time: ParamId,
    /// `(heads, height, head_dim)`
    pub e_asset: ParamId,
}

impl RelAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: RelAttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let lim = 1.0 / (dh as f64).sqrt();
        Ok(Self {
            cfg,
            w_q: store.add(format!("{name}.w_q"), glorot(rng, d, d))?,
            w_k: store.add(format!("{name}.w_k"), glorot(rng, d, d))?,
            w_v: store.add(format!("{name}.w_v"), glorot(rng, d, d))?,
            e_time: store.add(format!("{name}.e_time"), uniform(rng, &[cfg.heads, cfg.time_len, dh], lim))?,
            e_asset: store.add(format!("{name}.e_asset"), uniform(rng, &[cfg.heads, cfg.height, dh], lim))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: Bound<'_, S>, x: Var) -> Result<Var> {
        let w = AttentionWeights {
            w_q: p.var(g, self.w_q),
            w_k: p.var(g, self.w_k),
            w_v: p.var(g, self.w_v),
            e_time: p.var(g, self.e_time),
            e_asset: p.var(g, self.e_asset),
        };
        Ok(attention_2d(g, x, &w, &self.cfg)?.output)
    }
}

/// Graph handles for one attention block's weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub e_time: Var,
    pub e_asset: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Same shape as the input grid.
    pub output: Var,
    /// Attention probabilities, `(batch, heads, L·H, L·H)`, rows indexed by query cell `i·H + p`.
    pub weights: Var,
}

/// Lays out query·embedding products per key.
///
/// Input `(..., N, N)` where column `k` holds the product with the embedding for
/// relative distance `k − (N − 1)`. Output entry `[i, j]` for `j ≤ i` equals
/// input `[i, j − i + N − 1]`; entries above the diagonal are left as produced
/// by the pad–reshape–drop procedure.
pub fn skew<S: Scalar>(g: &mut Graph<S>, t: Var) -> Result<Var> {
    let s = g.shape(t).to_vec();
    let r = s.len();
    if r < 2 || s[r - 1] != s[r - 2] {
        return Err(invalid("skew", format!("trailing axes must be square, got {s:?}")));
    }
    let n = s[r - 1];
    let padded = g.pad(t, r - 1, 1, 0)?;
    let mut tall = s[..r - 2].to_vec();
    tall.extend([n + 1, n]);
    let reshaped = g.reshape(padded, &tall)?;
    g.slice(reshaped, r - 2, 1, n)
}

fn lower_mask<S: Scalar>(n: usize, strict_upper: bool) -> Tensor<S> {
    Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        let keep = if strict_upper { j > i } else { j <= i };
        if keep {
            S::one()
        } else {
            S::zero()
        }
    })
}

/// `P[.., i, j] = q[.., i, :] · e[.., (N − 1) − |i − j|, :]`.
///
/// `q` is `(..., N, D_h)`; `e` is `(..., N, D_h)` with leading axes
/// broadcastable against those of `q`.
pub fn relative_logits<S: Scalar>(g: &mut Graph<S>, q: Var, e: Var) -> Result<Var> {
    let (sq, se) = (g.shape(q).to_vec(), g.shape(e).to_vec());
    let (rq, re) = (sq.len(), se.len());
    let mismatch = || TensorError::ShapeMismatch {
        op: "relative_logits",
        lhs: sq.clone(),
        rhs: se.clone(),
    };
    if rq < 2 || re < 2 || sq[rq - 2..] != se[re - 2..] {
        return Err(mismatch());
    }
    if crate::tensor::broadcast_shapes(&sq[..rq - 2], &se[..re - 2]).is_none() {
        return Err(mismatch());
    }
    let n = sq[rq - 2];
    let mut perm: Vec<usize> = (0..re).collect();
    perm.swap(re - 1, re - 2);
    let et = g.permute(e, &perm)?;

    let forward = g.matmul(q, et)?;
    let lower = skew(g, forward)?;
    if n == 1 {
        return Ok(lower);
    }

    let rev: Vec<usize> = (0..n).rev().collect();
    let q_rev = g.gather(q, rq - 2, &rev)?;
    let backward = g.matmul(q_rev, et)?;
    let skewed = skew(g, backward)?;
    let r = g.shape(skewed).len();
    let rows = g.gather(skewed, r - 2, &rev)?;
    let upper = g.gather(rows, r - 1, &rev)?;

    let lm = g.constant(lower_mask(n, false))?;
    let um = g.constant(lower_mask(n, true))?;
    let lo = g.mul(lower, lm)?;
    let up = g.mul(upper, um)?;
    g.add(lo, up)
}

/// 2D relative multi-head attention.
///
/// `x` is `(L, H, D)` or `(B, L, H, D)`. Logits between query cell `(i, p)` and
/// key cell `(j, q)` are `[q·k + q·e_time[idx(i,j)] + q·e_asset[idx(p,q)]] / sqrt(D_h)`,
/// normalised jointly over all `L·H` keys.
pub fn attention_2d<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    w: &AttentionWeights,
    cfg: &RelAttentionConfig,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    let sx = g.shape(x).to_vec();
    let (l, hgt, d, heads, dh) = (cfg.time_len, cfg.height, cfg.model_dim, cfg.heads, cfg.head_dim());
    let batched = match sx.as_slice() {
        [a, b, c] if [*a, *b, *c] == [l, hgt, d] => false,
        [_, a, b, c] if [*a, *b, *c] == [l, hgt, d] => true,
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "attention_2d",
                lhs: sx.clone(),
                rhs: vec![l, hgt, d],
            })
        }
    };
    for (v, name, shape) in [
        (w.w_q, "w_q", vec![d, d]),
        (w.w_k, "w_k", vec![d, d]),
        (w.w_v, "w_v", vec![d, d]),
        (w.e_time, "e_time", vec![heads, l, dh]),
        (w.e_asset, "e_asset", vec![heads, hgt, dh]),
    ] {
        if g.shape(v) != shape.as_slice() {
            return Err(invalid(
                "attention_2d",
                format!("{name} has shape {:?}, expected {shape:?}", g.shape(v)),
            ));
        }
    }
    let b = if batched { sx[0] } else { 1 };
    let x = if batched { x } else { g.reshape(x, &[1, l, hgt, d])? };
    let cells = l * hgt;

    let split = |g: &mut Graph<S>, wm: Var| -> Result<Var> {
        let y = g.matmul(x, wm)?;
        let y = g.reshape(y, &[b, l, hgt, heads, dh])?;
        g.permute(y, &[0, 3, 1, 2, 4])
    };
    let qh = split(g, w.w_q)?;
    let kh = split(g, w.w_k)?;
    let vh = split(g, w.w_v)?;

    let qf = g.reshape(qh, &[b, heads, cells, dh])?;
    let kf = g.reshape(kh, &[b, heads, cells, dh])?;
    let vf = g.reshape(vh, &[b, heads, cells, dh])?;
    let kt = g.permute(kf, &[0, 1, 3, 2])?;
    let content = g.matmul(qf, kt)?;
    let content = g.reshape(content, &[b, heads, l, hgt, l, hgt])?;

    // asset axis: (b, heads, L, H, H) indexed [i, p, q], broadcast over key time j
    let ea = g.reshape(w.e_asset, &[heads, 1, hgt, dh])?;
    let pa = relative_logits(g, qh, ea)?;
    let pa = g.reshape(pa, &[b, heads, l, hgt, 1, hgt])?;

    // time axis: (b, heads, H, L, L) indexed [p, i, j], broadcast over key asset q
    let qt = g.permute(qh, &[0, 1, 3, 2, 4])?;
    let et = g.reshape(w.e_time, &[heads, 1, l, dh])?;
    let pt = relative_logits(g, qt, et)?;
    let pt = g.permute(pt, &[0, 1, 3, 2, 4])?;
    let pt = g.reshape(pt, &[b, heads, l, hgt, l, 1])?;

    let logits = g.add(content, pa)?;
    let logits = g.add(logits, pt)?;
    let logits = g.reshape(logits, &[b, heads, cells, cells])?;
    let logits = g.scale(logits, S::one() / S::of(dh as f64).sqrt())?;
    let weights = g.softmax(logits)?;

    let heads_out = g.matmul(weights, vf)?;
    let heads_out = g.reshape(heads_out, &[b, heads, l, hgt, dh])?;
    let merged = g.permute(heads_out, &[0, 2, 3, 1, 4])?;
    let out_shape = if batched { vec![b, l, hgt, d] } else { vec![l, hgt, d] };
    let output = g.reshape(merged, &out_shape)?;
    Ok(AttentionOutput { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        uniform(rng, shape, 1.0)
    }

    #[test]
    fn skew_two_by_two_hand_trace() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let s = skew(&mut g, t).unwrap();
        // pad -> [[0,a,b],[0,c,d]], reshape -> [[0,a],[b,0],[c,d]], drop -> [[b,0],[c,d]]
        assert_eq!(g.value(s).data(), &[2.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn skew_single_position() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::new(&[1, 1, 1], vec![7.0]).unwrap()).unwrap();
        let s = skew(&mut g, t).unwrap();
        assert_eq!(g.value(s).data(), &[7.0]);
    }

    #[test]
    fn skew_rejects_non_square() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::zeros(&[1, 2, 3])).unwrap();
        assert!(skew(&mut g, t).is_err());
    }

    #[test]
    fn relative_logits_diagonal_uses_last_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let q = g.constant(randn(&mut rng, &[2, 4, 3])).unwrap();
        let e = g.constant(randn(&mut rng, &[2, 4, 3])).unwrap();
        let p = relative_logits(&mut g, q, e).unwrap();
        let (qv, ev, pv) = (g.value(q), g.value(e), g.value(p));
        for a in 0..2 {
            for i in 0..4 {
                let dot: f64 = (0..3).map(|k| qv.at(&[a, i, k]) * ev.at(&[a, 3, k])).sum();
                assert!((pv.at(&[a, i, i]) - dot).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn relative_logits_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f64>::new();
        let q = g.constant(randn(&mut rng, &[2, 5, 3])).unwrap();
        let e = g.constant(Tensor::zeros(&[2, 5, 3])).unwrap();
        let p = relative_logits(&mut g, q, e).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_logits_head_mismatch() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[2, 4, 3])).unwrap();
        let e = g.constant(Tensor::zeros(&[3, 4, 3])).unwrap();
        assert!(relative_logits(&mut g, q, e).is_err());
    }

    #[test]
    fn single_cell_attention_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = RelAttentionConfig::new(4, 2, 1, 1).unwrap();
        let mut store = ParamStore::<f64>::new();
        let att = RelAttention::new(&mut store, "att", cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(randn(&mut rng, &[1, 1, 4])).unwrap();
        let y = att.forward(&mut g, Bound::frozen(&store), x).unwrap();
        let wv = g.frozen(&store, att.w_v);
        let expect = g.matmul(x, wv).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-15);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = RelAttentionConfig::new(4, 2, 3, 2).unwrap();
        let mut store = ParamStore::<f64>::new();
        let att = RelAttention::new(&mut store, "att", cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 3, 4])).unwrap();
        assert!(att.forward(&mut g, Bound::frozen(&store), x).is_err());
        assert!(RelAttentionConfig::new(6, 4, 1, 1).is_err());
    }
}
