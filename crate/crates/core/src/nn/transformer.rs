//! Gated Transformer encoder: layer norm before each sublayer, and a GRU-style
//! gate in place of each residual connection.

use rand::Rng;

use super::attention::{RelAttention, RelAttentionConfig};
use super::{glorot, LayerNormParams, Linear};
use crate::scalar::Scalar;
use crate::tensor::{invalid, Bound, Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Number of per-cell input features: open, high, low, close, volume.
pub const NUM_FEATURES: usize = 5;

pub const DEFAULT_GATE_BIAS: f64 = 2.0;

/// `g(x, y) = (1 − z) ⊙ x + z ⊙ h` with
/// `r = σ(y W_r + x U_r)`, `z = σ(y W_z + x U_z − b_g)`, `h = tanh(y W_g + (r ⊙ x) U_g)`.
#[derive(Clone, Copy, Debug)]
pub struct GatingUnit {
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub w_g: ParamId,
    pub u_g: ParamId,
    pub b_g: ParamId,
    pub dim: usize,
}

/// Graph handles of a gating unit's weights.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w_r: Var,
    pub u_r: Var,
    pub w_z: Var,
    pub u_z: Var,
    pub w_g: Var,
    pub u_g: Var,
    pub b_g: Var,
}

impl GatingUnit {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        gate_bias: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mat = |suffix: &str, rng: &mut R| store.add(format!("{name}.{suffix}"), glorot(rng, dim, dim));
        let w_r = mat("w_r", rng)?;
        let u_r = mat("u_r", rng)?;
        let w_z = mat("w_z", rng)?;
        let u_z = mat("u_z", rng)?;
        let w_g = mat("w_g", rng)?;
        let u_g = mat("u_g", rng)?;
        let b_g = store.add(format!("{name}.b_g"), Tensor::full(&[dim], S::of(gate_bias)))?;
        Ok(Self {
            w_r,
            u_r,
            w_z,
            u_z,
            w_g,
            u_g,
            b_g,
            dim,
        })
    }

    pub fn vars<S: Scalar>(&self, g: &mut Graph<S>, p: Bound<'_, S>) -> GateVars {
        GateVars {
            w_r: p.var(g, self.w_r),
            u_r: p.var(g, self.u_r),
            w_z: p.var(g, self.w_z),
            u_z: p.var(g, self.u_z),
            w_g: p.var(g, self.w_g),
            u_g: p.var(g, self.u_g),
            b_g: p.var(g, self.b_g),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: Bound<'_, S>, x: Var, y: Var) -> Result<Var> {
        let w = self.vars(g, p);
        gate(g, &w, x, y)
    }
}

/// Gated combination of residual stream `x` and sublayer output `y`.
pub fn gate<S: Scalar>(g: &mut Graph<S>, w: &GateVars, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if sx.last() != sy.last() || sx.last().copied() != Some(g.shape(w.b_g)[0]) {
        return Err(TensorError::ShapeMismatch {
            op: "gate",
            lhs: sx,
            rhs: sy,
        });
    }
    let affine = |g: &mut Graph<S>, wy: Var, ux: Var, xin: Var| -> Result<Var> {
        let a = g.matmul(y, wy)?;
        let b = g.matmul(xin, ux)?;
        g.add(a, b)
    };
    let r_in = affine(g, w.w_r, w.u_r, x)?;
    let r = g.sigmoid(r_in)?;
    let z_in = affine(g, w.w_z, w.u_z, x)?;
    let z_in = g.sub(z_in, w.b_g)?;
    let z = g.sigmoid(z_in)?;
    let rx = g.mul(r, x)?;
    let h_in = affine(g, w.w_g, w.u_g, rx)?;
    let h = g.tanh(h_in)?;
    // x + z ⊙ (h − x)
    let delta = g.sub(h, x)?;
    let step = g.mul(z, delta)?;
    g.add(x, step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub time_len: usize,
    pub height: usize,
    pub time_encoding: bool,
}

impl EncoderConfig {
    pub fn attention(&self) -> RelAttentionConfig {
        RelAttentionConfig {
            model_dim: self.model_dim,
            heads: self.heads,
            time_len: self.time_len,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.ffn_dim == 0 {
            return Err(invalid("encoder", "layer count and ffn width must be positive"));
        }
        self.attention().validate()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNormParams,
    pub attn: RelAttention,
    pub gate_attn: GatingUnit,
    pub ln2: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub gate_ffn: GatingUnit,
}

impl EncoderLayer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &EncoderConfig,
        gate_bias: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), d)?,
            attn: RelAttention::new(store, &format!("{name}.attn"), cfg.attention(), rng)?,
            gate_attn: GatingUnit::new(store, &format!("{name}.gate_attn"), d, gate_bias, rng)?,
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), d)?,
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, cfg.ffn_dim, rng)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), cfg.ffn_dim, d, rng)?,
            gate_ffn: GatingUnit::new(store, &format!("{name}.gate_ffn"), d, gate_bias, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: Bound<'_, S>, x: Var) -> Result<Var> {
        let n1 = self.ln1.forward(g, p, x)?;
        let u = self.attn.forward(g, p, n1)?;
        let x = self.gate_attn.forward(g, p, x, u)?;
        let n2 = self.ln2.forward(g, p, x)?;
        let hidden = self.ffn_in.forward(g, p, n2)?;
        let hidden = g.relu(hidden)?;
        let v = self.ffn_out.forward(g, p, hidden)?;
        self.gate_ffn.forward(g, p, x, v)
    }
}

/// Input projection, optional sinusoidal time encoding and a stack of gated layers.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub cfg: EncoderConfig,
    pub input: Linear,
    pub layers: Vec<EncoderLayer>,
    time_code: Tensor<f64>,
}

/// Standard sinusoidal encoding, `(len, dim)`: even columns sine, odd columns cosine.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Tensor<f64> {
    Tensor::from_fn(&[len, dim], |k| {
        let (pos, c) = (k / dim, k % dim);
        let freq = 10000f64.powf(-((c - c % 2) as f64) / dim as f64);
        let angle = pos as f64 * freq;
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl EncoderStack {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: EncoderConfig,
        gate_bias: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let input = Linear::new(store, &format!("{name}.input"), NUM_FEATURES, cfg.model_dim, rng)?;
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), &cfg, gate_bias, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            input,
            layers,
            time_code: sinusoidal_encoding(cfg.time_len, cfg.model_dim),
        })
    }

    /// Embeds `(B, L, H, 5)` features into `(B, L, H, D)` before the first layer.
    pub fn embed<S: Scalar>(&self, g: &mut Graph<S>, p: Bound<'_, S>, features: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        let c = &self.cfg;
        if s.len() != 4 || s[1..] != [c.time_len, c.height, NUM_FEATURES] {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: s,
                rhs: vec![c.time_len, c.height, NUM_FEATURES],
            });
        }
        let x = self.input.forward(g, p, features)?;
        if !c.time_encoding {
            return Ok(x);
        }
        let code: Tensor<S> = Tensor::from_f64(&[c.time_len, 1, c.model_dim], self.time_code.data())?;
        let code = g.constant(code)?;
        g.add(x, code)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: Bound<'_, S>, features: Var) -> Result<Var> {
        Ok(*self.forward_traced(g, p, features)?.last().expect("at least one layer"))
    }

    /// Embedding followed by each layer's output, in execution order.
    pub fn forward_traced<S: Scalar>(&self, g: &mut Graph<S>, p: Bound<'_, S>, features: Var) -> Result<Vec<Var>> {
        let mut trace = vec![self.embed(g, p, features)?];
        for layer in &self.layers {
            let x = *trace.last().expect("nonempty");
            trace.push(layer.forward(g, p, x)?);
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_gate_passes_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let unit = GatingUnit::new(&mut store, "g", 4, 1e3, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(uniform(&mut rng, &[3, 4], 1.0)).unwrap();
        let y = g.constant(uniform(&mut rng, &[3, 4], 1.0)).unwrap();
        let out = unit.forward(&mut g, Bound::frozen(&store), x, y).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(x)) < 1e-12);
    }

    #[test]
    fn zero_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let unit = GatingUnit::new(&mut store, "g", 4, 0.0, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        let y = g.constant(uniform(&mut rng, &[2, 4], 1.0)).unwrap();
        let out = unit.forward(&mut g, Bound::frozen(&store), x, y).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_rejects_dim_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let unit = GatingUnit::new(&mut store, "g", 4, 0.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        let y = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(unit.forward(&mut g, Bound::frozen(&store), x, y).is_err());
    }

    #[test]
    fn sinusoid_first_row() {
        let pe = sinusoidal_encoding(3, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at(&[2, 3]) - (2.0 * 0.01f64).cos()).abs() < 1e-15);
    }
}
