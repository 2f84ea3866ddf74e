//! Deterministic policy-gradient agent: actor and critic trunks, target copies,
//! Ornstein-Uhlenbeck exploration and the DDPG update rules.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::env::{ActionVector, ObservationWindow};
use crate::nn::transformer::{EncoderConfig, EncoderStack, DEFAULT_GATE_BIAS};
use crate::nn::Linear;
use crate::replay::Transition;
use crate::tensor::{read_checkpoint, write_checkpoint, Adam, AdamConfig, Bound, Graph, ParamStore, Tensor, TensorError, Var};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0} targets for a batch of {1}")]
    TargetCount(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

/// Discrete Ornstein-Uhlenbeck process `x ← x + θ(μ − x)dt + σ√dt·ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct OuNoise {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub dt: f64,
    state: Vec<f64>,
}

impl OuNoise {
    pub fn new(dim: usize, theta: f64, mu: f64, sigma: f64) -> Self {
        Self {
            theta,
            mu,
            sigma,
            dt: 1.0,
            state: vec![mu; dim],
        }
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(dim, 0.13, 0.0, 0.2)
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|x| *x = self.mu);
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[f64] {
        let sd = self.sigma * self.dt.sqrt();
        for x in &mut self.state {
            let e: f64 = StandardNormal.sample(rng);
            *x += self.theta * (self.mu - *x) * self.dt + sd * e;
        }
        &self.state
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentConfig {
    pub encoder: EncoderConfig,
    pub gate_bias: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl AgentConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            gate_bias: DEFAULT_GATE_BIAS,
            lr_actor: 1e-4,
            lr_critic: 1e-4,
            gamma: 0.9,
            tau: 0.15,
        }
    }

    /// `key=value` lines describing the networks, enough to rebuild them before loading weights.
    pub fn architecture(&self) -> String {
        let e = &self.encoder;
        format!(
            "layers={}\nheads={}\nmodel_dim={}\nffn_dim={}\ntime_len={}\nheight={}\ntime_encoding={}\ngate_bias={}\n",
            e.layers, e.heads, e.model_dim, e.ffn_dim, e.time_len, e.height, e.time_encoding, self.gate_bias
        )
    }

    pub fn from_architecture(text: &str) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
                .map(str::trim)
                .ok_or_else(|| AgentError::Checkpoint(format!("architecture missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| AgentError::Checkpoint(format!("bad `{k}`"))) };
        let encoder = EncoderConfig {
            layers: num("layers")?,
            heads: num("heads")?,
            model_dim: num("model_dim")?,
            ffn_dim: num("ffn_dim")?,
            time_len: num("time_len")?,
            height: num("height")?,
            time_encoding: get("time_encoding")?.parse().map_err(|_| AgentError::Checkpoint("bad `time_encoding`".into()))?,
        };
        let mut cfg = Self::new(encoder);
        cfg.gate_bias = get("gate_bias")?.parse().map_err(|_| AgentError::Checkpoint("bad `gate_bias`".into()))?;
        Ok(cfg)
    }
}

/// Encoder, then a per-asset linear score of the latest time row, softmaxed over assets.
#[derive(Clone, Debug)]
pub struct ActorNet {
    pub trunk: EncoderStack,
    pub head: Linear,
}

impl ActorNet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &AgentConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            trunk: EncoderStack::new(store, "actor.trunk", cfg.encoder, cfg.gate_bias, rng)?,
            head: Linear::new(store, "actor.head", cfg.encoder.model_dim, 1, rng)?,
        })
    }

    /// `(B, L, H, 5)` → `(B, H)` simplex weights.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: Bound<'_, S>, x: Var) -> Result<Var> {
        let (b, h) = (g.shape(x)[0], g.shape(x)[2]);
        let z = self.trunk.forward(g, p, x)?;
        let last = g.slice(z, 1, 0, 1)?;
        let logits = self.head.forward(g, p, last)?;
        let logits = g.reshape(logits, &[b, h])?;
        Ok(g.softmax(logits)?)
    }
}

/// Encoder pooled over assets at the latest row, concatenated with a projected action.
#[derive(Clone, Debug)]
pub struct CriticNet {
    pub trunk: EncoderStack,
    pub action_proj: Linear,
    pub hidden: Linear,
    pub out: Linear,
}

impl CriticNet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &AgentConfig, rng: &mut R) -> Result<Self> {
        let (d, h) = (cfg.encoder.model_dim, cfg.encoder.height);
        Ok(Self {
            trunk: EncoderStack::new(store, "critic.trunk", cfg.encoder, cfg.gate_bias, rng)?,
            action_proj: Linear::new(store, "critic.action_proj", h, d, rng)?,
            hidden: Linear::new(store, "critic.hidden", 2 * d, d, rng)?,
            out: Linear::new(store, "critic.out", d, 1, rng)?,
        })
    }

    /// `(B, L, H, 5)`, `(B, H)` → `(B, 1)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: Bound<'_, S>, x: Var, a: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let z = self.trunk.forward(g, p, x)?;
        let last = g.slice(z, 1, 0, 1)?;
        let last = g.reshape(last, &[s[0], s[2], self.trunk.cfg.model_dim])?;
        let pooled = g.mean_axis(last, 1)?;
        let act = self.action_proj.forward(g, p, a)?;
        let joint = g.concat(&[pooled, act], 1)?;
        let hid = self.hidden.forward(g, p, joint)?;
        let hid = g.relu(hid)?;
        Ok(self.out.forward(g, p, hid)?)
    }
}

/// Batched tensors for a set of transitions.
pub struct Batch<S> {
    pub states: Tensor<S>,
    pub actions: Tensor<S>,
    pub rewards: Vec<f64>,
    pub next_states: Tensor<S>,
    pub terminal: Vec<bool>,
}

impl<S: Scalar> Batch<S> {
    pub fn from_transitions(batch: &[Transition]) -> Result<Self> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let states: Vec<&ObservationWindow> = batch.iter().map(|t| &t.state).collect();
        let next: Vec<&ObservationWindow> = batch.iter().map(|t| &t.next_state).collect();
        let h = batch[0].action.len();
        let actions = Tensor::new(&[batch.len(), h], batch.iter().flat_map(|t| t.action.iter().map(|&v| S::of(v))).collect())?;
        Ok(Self {
            states: ObservationWindow::batch(&states),
            actions,
            rewards: batch.iter().map(|t| t.reward).collect(),
            next_states: ObservationWindow::batch(&next),
            terminal: batch.iter().map(|t| t.terminal).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// `G = r + (1 − terminal)·γ·q_next`.
pub fn td_target(reward: f64, terminal: bool, gamma: f64, q_next: f64) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * q_next
    }
}

/// Mean squared TD error `(1/N)Σ(G − Q(s, a))²`.
pub fn critic_loss<S: Scalar>(g: &mut Graph<S>, net: &CriticNet, p: Bound<'_, S>, states: Var, actions: Var, targets: &[f64]) -> Result<Var> {
    let q = net.forward(g, p, states, actions)?;
    let t = g.constant(Tensor::from_f64(&[targets.len(), 1], targets)?)?;
    let d = g.sub(q, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq)?)
}

/// `J = (1/N)Σ Q(s, μ(s))`.
pub fn actor_objective<S: Scalar>(
    g: &mut Graph<S>,
    actor: &ActorNet,
    pa: Bound<'_, S>,
    critic: &CriticNet,
    pc: Bound<'_, S>,
    states: Var,
) -> Result<Var> {
    let a = actor.forward(g, pa, states)?;
    let q = critic.forward(g, pc, states, a)?;
    Ok(g.mean(q)?)
}

/// Online and target networks with their optimizers.
#[derive(Clone, Debug)]
pub struct Agent<S: Scalar> {
    pub config: AgentConfig,
    pub actor_net: ActorNet,
    pub critic_net: CriticNet,
    pub actor: ParamStore<S>,
    pub critic: ParamStore<S>,
    pub target_actor: ParamStore<S>,
    pub target_critic: ParamStore<S>,
    pub actor_opt: Adam<S>,
    pub critic_opt: Adam<S>,
}

impl<S: Scalar> Agent<S> {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, rng: &mut R) -> Result<Self> {
        let mut actor = ParamStore::new();
        let mut critic = ParamStore::new();
        let actor_net = ActorNet::new(&mut actor, &config, rng)?;
        let critic_net = CriticNet::new(&mut critic, &config, rng)?;
        Ok(Self {
            config,
            actor_net,
            critic_net,
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            actor_opt: Adam::new(AdamConfig::with_lr(config.lr_actor)),
            critic_opt: Adam::new(AdamConfig::with_lr(config.lr_critic)),
        })
    }

    pub fn act_batch(&self, params: &ParamStore<S>, states: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let x = g.constant(states.clone())?;
        let a = self.actor_net.forward(&mut g, Bound::frozen(params), x)?;
        Ok(g.value(a).clone())
    }

    /// Greedy action from the online actor.
    pub fn act(&self, obs: &ObservationWindow) -> Result<ActionVector> {
        Self::act_with(&self.actor_net, &self.actor, obs)
    }

    /// Greedy action from any actor parameter snapshot.
    pub fn act_with(net: &ActorNet, params: &ParamStore<S>, obs: &ObservationWindow) -> Result<ActionVector> {
        let mut g = Graph::new();
        let x = g.constant(ObservationWindow::batch::<S>(&[obs]))?;
        let a = net.forward(&mut g, Bound::frozen(params), x)?;
        let w: Vec<f64> = g.value(a).to_f64_vec();
        // softmax already sums to one up to rounding; project to be exact about bounds
        Ok(ActionVector::project(&w))
    }

    /// Greedy action plus OU noise, clipped to `[0, 1]` and renormalised.
    pub fn act_explore_with<R: Rng + ?Sized>(
        net: &ActorNet,
        params: &ParamStore<S>,
        obs: &ObservationWindow,
        noise: &mut OuNoise,
        rng: &mut R,
    ) -> Result<ActionVector> {
        let base = Self::act_with(net, params, obs)?;
        let dx = noise.sample(rng);
        let raw: Vec<f64> = base.weights().iter().zip(dx).map(|(a, n)| a + n).collect();
        Ok(ActionVector::project(&raw))
    }

    pub fn q_values(&self, params: &ParamStore<S>, states: &Tensor<S>, actions: &Tensor<S>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(states.clone())?;
        let a = g.constant(actions.clone())?;
        let q = self.critic_net.forward(&mut g, Bound::frozen(params), x, a)?;
        Ok(g.value(q).to_f64_vec())
    }

    /// Bootstrapped targets from the target networks.
    pub fn td_targets(&self, batch: &Batch<S>) -> Result<Vec<f64>> {
        let a_next = self.act_batch(&self.target_actor, &batch.next_states)?;
        let q_next = self.q_values(&self.target_critic, &batch.next_states, &a_next)?;
        Ok((0..batch.len())
            .map(|i| td_target(batch.rewards[i], batch.terminal[i], self.config.gamma, q_next[i]))
            .collect())
    }

    /// One Adam step on the critic. Returns the loss before the step.
    pub fn critic_update(&mut self, batch: &Batch<S>, targets: &[f64]) -> Result<f64> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        if targets.len() != batch.len() {
            return Err(AgentError::TargetCount(targets.len(), batch.len()));
        }
        let mut g = Graph::new();
        let x = g.constant(batch.states.clone())?;
        let a = g.constant(batch.actions.clone())?;
        let loss = critic_loss(&mut g, &self.critic_net, Bound::trainable(&self.critic), x, a, targets)?;
        g.backward(loss)?;
        self.critic.zero_grads();
        g.write_grads(&mut self.critic);
        let value = g.value(loss).to_f64_vec()[0];
        self.critic_opt.step(&mut self.critic)?;
        Ok(value)
    }

    /// One Adam ascent step on `J` for the actor with the critic frozen. Returns `J` before the step.
    pub fn actor_update(&mut self, states: &Tensor<S>) -> Result<f64> {
        if states.shape()[0] == 0 {
            return Err(AgentError::EmptyBatch);
        }
        let mut g = Graph::new();
        let x = g.constant(states.clone())?;
        let j = actor_objective(&mut g, &self.actor_net, Bound::trainable(&self.actor), &self.critic_net, Bound::frozen(&self.critic), x)?;
        let neg = g.scale(j, -S::one())?;
        g.backward(neg)?;
        self.actor.zero_grads();
        g.write_grads(&mut self.actor);
        let value = g.value(j).to_f64_vec()[0];
        self.actor_opt.step(&mut self.actor)?;
        Ok(value)
    }

    pub fn soft_update(&mut self) -> Result<()> {
        let tau = S::of(self.config.tau);
        self.target_actor.soft_update_from(&self.actor, tau)?;
        self.target_critic.soft_update_from(&self.critic, tau)?;
        Ok(())
    }

    fn groups(&self) -> [(&'static str, &ParamStore<S>); 4] {
        [
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("target_actor", &self.target_actor),
            ("target_critic", &self.target_critic),
        ]
    }

    /// Writes `<stem>.arch`, `<stem>.manifest` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(stem.with_extension("arch"), self.config.architecture())?;
        let mut named: Vec<(String, Tensor<S>)> = Vec::new();
        for (group, store) in self.groups() {
            named.extend(store.iter().map(|(n, t)| (format!("{group}/{n}"), t.clone())));
        }
        for (group, opt, store) in [("adam_actor", &self.actor_opt, &self.actor), ("adam_critic", &self.critic_opt, &self.critic)] {
            named.extend(opt.state(store).into_iter().map(|(n, t)| (format!("{group}/{n}"), t)));
        }
        write_checkpoint(stem, named.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(())
    }

    /// Rebuilds the networks from `<stem>.arch` and loads every parameter group and optimizer state.
    pub fn load(stem: &Path, lr_actor: f64, lr_critic: f64) -> Result<Self> {
        let mut config = AgentConfig::from_architecture(&fs::read_to_string(stem.with_extension("arch"))?)?;
        config.lr_actor = lr_actor;
        config.lr_critic = lr_critic;
        // shapes come from the architecture; values are overwritten below
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut agent = Self::new(config, &mut rng)?;
        let named = read_checkpoint::<S>(stem)?;
        let group = |prefix: &str| -> Vec<(String, Tensor<S>)> {
            named
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|r| (r.to_string(), t.clone())))
                .collect()
        };
        let load = |store: &mut ParamStore<S>, prefix: &str| -> Result<()> {
            let items = group(prefix);
            store.load_values(items.iter().map(|(n, t)| (n.as_str(), t)))?;
            Ok(())
        };
        load(&mut agent.actor, "actor/")?;
        load(&mut agent.critic, "critic/")?;
        load(&mut agent.target_actor, "target_actor/")?;
        load(&mut agent.target_critic, "target_critic/")?;
        let actor_state = group("adam_actor/");
        agent.actor_opt.restore(&agent.actor, &actor_state)?;
        let critic_state = group("adam_critic/");
        agent.critic_opt.restore(&agent.critic, &critic_state)?;
        Ok(agent)
    }
}

/// Loads only the online actor of a checkpoint, for greedy evaluation.
pub fn load_actor<S: Scalar>(stem: &Path) -> Result<(ActorNet, ParamStore<S>)> {
    let agent = Agent::<S>::load(stem, 1e-4, 1e-4)?;
    Ok((agent.actor_net, agent.actor))
}
