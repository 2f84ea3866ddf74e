//! Network building blocks over the autodiff graph.

pub mod attention;
pub mod transformer;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::scalar::Scalar;
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Result, Tensor, Var};

/// Glorot-uniform initialised matrix of shape `[fan_in, fan_out]`.
pub fn glorot<S: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], limit)
}

pub fn uniform<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], limit: f64) -> Tensor<S> {
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    Tensor::from_fn(shape, |_| S::of(dist.sample(rng)))
}

/// Affine map `x W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: Bound<'_, S>, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Layer-norm gain (ones) and bias (zeros).
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], S::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: Bound<'_, S>, x: Var) -> Result<Var> {
        let gain = p.var(g, self.gain);
        let bias = p.var(g, self.bias);
        g.layer_norm(x, gain, bias, S::of(LAYER_NORM_EPS))
    }
}
