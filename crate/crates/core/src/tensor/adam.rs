use super::{ParamStore, Result, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are positional: they belong to the
/// store they were first stepped on.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<S>) -> Result<()> {
        if let Some(id) = params.ids().find(|&id| params.grad(id).is_none()) {
            return Err(TensorError::MissingGrad(params.name(id).to_string()));
        }
        if self.m.is_empty() {
            self.m = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let lr = S::of(c.learning_rate);
        let eps = S::of(c.epsilon);
        let bc1 = S::one() - b1.powi(self.step as i32);
        let bc2 = S::one() - b2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = params.grad(id).expect("checked above").data().to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = params.value_mut(id).data_mut();
            for k in 0..g.len() {
                let mk = &mut m.data_mut()[k];
                *mk = b1 * *mk + (S::one() - b1) * g[k];
                let vk = &mut v.data_mut()[k];
                *vk = b2 * *vk + (S::one() - b2) * g[k] * g[k];
                let mhat = m.data()[k] / bc1;
                let vhat = v.data()[k] / bc2;
                w[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers and step count as named tensors, keyed by parameter names of `params`.
    pub fn state(&self, params: &ParamStore<S>) -> Vec<(String, Tensor<S>)> {
        let mut out = vec![("step".to_string(), Tensor::scalar(S::of(self.step as f64)))];
        for id in params.ids() {
            if let (Some(m), Some(v)) = (self.m.get(id.index()), self.v.get(id.index())) {
                out.push((format!("m/{}", params.name(id)), m.clone()));
                out.push((format!("v/{}", params.name(id)), v.clone()));
            }
        }
        out
    }

    pub fn restore(&mut self, params: &ParamStore<S>, state: &[(String, Tensor<S>)]) -> Result<()> {
        let find = |k: &str| state.iter().find(|(n, _)| n == k).map(|(_, t)| t);
        let step = find("step")
            .and_then(|t| t.item())
            .ok_or_else(|| TensorError::Checkpoint("optimizer state missing `step`".into()))?;
        self.step = step.as_f64() as u64;
        self.m.clear();
        self.v.clear();
        if self.step == 0 {
            return Ok(());
        }
        for id in params.ids() {
            let name = params.name(id);
            let get = |p: &str| {
                find(&format!("{p}/{name}"))
                    .cloned()
                    .ok_or_else(|| TensorError::Checkpoint(format!("optimizer state missing `{p}/{name}`")))
            };
            self.m.push(get("m")?);
            self.v.push(get("v")?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> (ParamStore<f64>, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut s, id) = single(0.7);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        s.zero_grads();
        opt.step(&mut s).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m1 = 0.1, v1 = 0.001; mhat = 1, vhat = 1 => p = 1 - 0.1 / (1 + 1e-8)
        let (mut s, id) = single(1.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        s.set_grad(id, Tensor::scalar(1.0)).unwrap();
        opt.step(&mut s).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.value(id).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn repeated_gradient_moves_monotonically() {
        let (mut s, id) = single(1.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        let mut last = 1.0;
        for _ in 0..2 {
            s.set_grad(id, Tensor::scalar(0.5)).unwrap();
            opt.step(&mut s).unwrap();
            let now = s.value(id).data()[0];
            assert!(now < last);
            last = now;
        }
        // both bias-corrected steps have mhat/sqrt(vhat) = 1
        assert!((last - (1.0 - 2.0 * 0.1 / (1.0 + 2e-8))).abs() < 1e-9);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let (mut s, _) = single(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
    }

    #[test]
    fn state_round_trip() {
        let (mut s, id) = single(1.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        s.set_grad(id, Tensor::scalar(1.0)).unwrap();
        opt.step(&mut s).unwrap();
        let state = opt.state(&s);
        let mut other = Adam::new(AdamConfig::with_lr(0.1));
        other.restore(&s, &state).unwrap();
        let mut s2 = s.clone();
        opt.step(&mut s).unwrap();
        other.step(&mut s2).unwrap();
        assert_eq!(s.value(id), s2.value(id));
    }
}
