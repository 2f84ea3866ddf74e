//! Episodic training with parallel simulator workers and one learner, greedy
//! evaluation, and the run log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex, RwLock};
use std::thread;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agent::{ActorNet, Agent, AgentConfig, AgentError, Batch, OuNoise};
use crate::baselines::{mpt_action, ucrp_action, MetricReport, MPT_LOOKBACK};
use crate::env::{ActionVector, CostModel, EnvError, MarketData, MarketEnv, ObservationWindow};
use crate::nn::transformer::EncoderConfig;
use crate::replay::{Experience, SharedExperience, Transition};
use crate::tensor::ParamStore;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("dataset has {have} days, need at least {need}")]
    ShortDataset { have: usize, need: usize },
    #[error("evaluation span: {0}")]
    Span(String),
    #[error("worker thread panicked")]
    WorkerPanic,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub num_workers: usize,
    pub batch_size: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub tau: f64,
    pub gamma: f64,
    pub rho: f64,
    pub window_len: usize,
    pub max_episode_len: usize,
    pub ou_theta: f64,
    pub ou_mu: f64,
    pub ou_sigma: f64,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub gate_bias: f64,
    pub time_encoding: bool,
    pub seed: u64,
    pub total_episodes: usize,
    pub updates_per_episode: usize,
    pub replay_capacity: usize,
    pub hmemory_episodes: usize,
    pub initial_cash: f64,
    pub fee_rate: f64,
    pub slippage: f64,
    /// Episodes between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub train_start: Option<NaiveDate>,
    pub train_end: Option<NaiveDate>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_workers: 5,
            batch_size: 32,
            lr_actor: 1e-4,
            lr_critic: 1e-4,
            tau: 0.15,
            gamma: 0.9,
            rho: 0.2,
            window_len: 50,
            max_episode_len: 50,
            ou_theta: 0.13,
            ou_mu: 0.0,
            ou_sigma: 0.2,
            layers: 3,
            heads: 8,
            model_dim: 128,
            ffn_dim: 512,
            gate_bias: 2.0,
            time_encoding: true,
            seed: 0,
            total_episodes: 1000,
            updates_per_episode: 50,
            replay_capacity: 100_000,
            hmemory_episodes: 50,
            initial_cash: 100_000.0,
            fee_rate: 0.002,
            slippage: 0.5,
            checkpoint_every: 0,
            train_start: None,
            train_end: None,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident),* $(,)?) => {
        pub const CONFIG_KEYS: &[&str] = &[$(stringify!($key)),*];

        impl TrainConfig {
            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => self.$key = parse_value(key, value)?,)*
                    _ => return Err(TrainError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// Every key on its own line, in a form [`TrainConfig::parse`] reads back.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{}={}", stringify!($key), self.$key.show());)*
                out
            }
        }
    };
}

config_keys!(
    num_workers, batch_size, lr_actor, lr_critic, tau, gamma, rho, window_len, max_episode_len, ou_theta, ou_mu,
    ou_sigma, layers, heads, model_dim, ffn_dim, gate_bias, time_encoding, seed, total_episodes, updates_per_episode,
    replay_capacity, hmemory_episodes, initial_cash, fee_rate, slippage, checkpoint_every, train_start, train_end,
);

trait ConfigValue: Sized {
    fn read(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn read(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool);

impl ConfigValue for Option<NaiveDate> {
    fn read(s: &str) -> Option<Self> {
        if s.is_empty() {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    }
    fn show(&self) -> String {
        self.map(|d| d.to_string()).unwrap_or_default()
    }
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::read(value).ok_or_else(|| TrainError::BadValue {
        key: key.to_string(),
        msg: format!("cannot parse `{value}`"),
    })
}

impl TrainConfig {
    /// Reads `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrainError::Syntax {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(TrainError::BadValue {
                key: key.into(),
                msg: msg.into(),
            })
        };
        for (k, v) in [
            ("num_workers", self.num_workers),
            ("batch_size", self.batch_size),
            ("window_len", self.window_len),
            ("max_episode_len", self.max_episode_len),
            ("layers", self.layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("replay_capacity", self.replay_capacity),
        ] {
            if v == 0 {
                return bad(k, "must be positive");
            }
        }
        for (k, v) in [("tau", self.tau), ("gamma", self.gamma), ("rho", self.rho)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(k, "must lie in (0, 1]");
            }
        }
        for (k, v) in [("lr_actor", self.lr_actor), ("lr_critic", self.lr_critic), ("initial_cash", self.initial_cash)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(k, "must be positive");
            }
        }
        if self.fee_rate < 0.0 || self.slippage < 0.0 || self.ou_sigma < 0.0 || self.ou_theta < 0.0 {
            return bad("fee_rate/slippage/ou", "must be non-negative");
        }
        if self.model_dim % self.heads != 0 {
            return bad("heads", "must divide model_dim");
        }
        Ok(())
    }

    pub fn costs(&self) -> CostModel {
        CostModel {
            fee_rate: self.fee_rate,
            slippage: self.slippage,
        }
    }

    pub fn agent_config(&self, height: usize) -> AgentConfig {
        let mut a = AgentConfig::new(EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            model_dim: self.model_dim,
            ffn_dim: self.ffn_dim,
            time_len: self.window_len,
            height,
            time_encoding: self.time_encoding,
        });
        a.gate_bias = self.gate_bias;
        a.lr_actor = self.lr_actor;
        a.lr_critic = self.lr_critic;
        a.gamma = self.gamma;
        a.tau = self.tau;
        a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub worker: usize,
    pub total_reward: f64,
    /// Mean over this episode's learner iterations; `None` before warm-up.
    pub critic_loss: Option<f64>,
    pub actor_j: Option<f64>,
    pub updates: usize,
}

pub const RUN_LOG_HEADER: &str = "episode,worker,total_reward,critic_loss,actor_J,updates";

pub fn write_run_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut out = String::from(RUN_LOG_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.episode,
            r.worker,
            r.total_reward,
            opt(r.critic_loss),
            opt(r.actor_j),
            r.updates
        );
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct TrainingReport {
    pub episodes: usize,
    pub updates: usize,
    pub log: Vec<LogRow>,
    pub agent: Agent<f64>,
    /// Checkpoint stems written, in order.
    pub checkpoints: Vec<std::path::PathBuf>,
}

struct EpisodeResult {
    worker: usize,
    episode: usize,
    transitions: Vec<Transition>,
}

/// One exploratory episode from a uniformly drawn admissible start day.
fn run_episode<R: Rng>(
    data: &Arc<MarketData>,
    cfg: &TrainConfig,
    net: &ActorNet,
    params: &ParamStore<f64>,
    rng: &mut R,
    worker: usize,
    episode: usize,
) -> Result<Vec<Transition>> {
    let mut env = MarketEnv::new(data.clone(), cfg.costs(), cfg.max_episode_len);
    let start = rng.random_range(data.first_start()..data.end_start());
    let mut obs = env.reset(start, cfg.initial_cash)?;
    let mut noise = OuNoise::new(env.columns(), cfg.ou_theta, cfg.ou_mu, cfg.ou_sigma);
    let mut out = Vec::with_capacity(cfg.max_episode_len);
    loop {
        let a = Agent::act_explore_with(net, params, &obs, &mut noise, rng)?;
        let step = env.step(&a)?;
        out.push(Transition {
            state: obs,
            action: a.weights().to_vec(),
            reward: step.reward,
            next_state: step.observation.clone(),
            terminal: step.terminal,
            worker,
            episode,
        });
        obs = step.observation;
        if step.terminal {
            return Ok(out);
        }
    }
}

/// Up to `updates_per_episode` iterations of: sample, TD targets, critic step, actor step,
/// soft update. `publish` sees the actor after each iteration.
fn learner_step<R: Rng>(
    agent: &mut Agent<f64>,
    exp: &Mutex<Experience>,
    cfg: &TrainConfig,
    rng: &mut R,
    mut publish: impl FnMut(&ParamStore<f64>),
) -> Result<(Option<f64>, Option<f64>, usize)> {
    let (mut loss_sum, mut j_sum, mut n) = (0.0, 0.0, 0);
    for _ in 0..cfg.updates_per_episode {
        // sample under the lock, then update without holding it
        let snapshot = {
            let guard = exp.lock().expect("replay lock");
            if guard.replay.len() < cfg.batch_size {
                break;
            }
            guard.sample(rng, cfg.batch_size)
        };
        let Some(sample) = snapshot else { break };
        let batch = Batch::from_transitions(&sample)?;
        let targets = agent.td_targets(&batch)?;
        loss_sum += agent.critic_update(&batch, &targets)?;
        j_sum += agent.actor_update(&batch.states)?;
        agent.soft_update()?;
        publish(&agent.actor);
        n += 1;
    }
    if n == 0 {
        return Ok((None, None, 0));
    }
    Ok((Some(loss_sum / n as f64), Some(j_sum / n as f64), n))
}

/// Trains from scratch on `data`. Writes checkpoints and `run_log.csv` under `out_dir` when given.
pub fn train(cfg: &TrainConfig, data: Arc<MarketData>, out_dir: Option<&Path>) -> Result<TrainingReport> {
    cfg.validate()?;
    let need = cfg.window_len + cfg.max_episode_len;
    if data.dataset.num_days() < need {
        return Err(TrainError::ShortDataset {
            have: data.dataset.num_days(),
            need,
        });
    }
    if data.window_len != cfg.window_len {
        return Err(TrainError::BadValue {
            key: "window_len".into(),
            msg: format!("market data was built with window {}", data.window_len),
        });
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent = Agent::<f64>::new(cfg.agent_config(data.dataset.columns()), &mut init_rng)?;
    let mut learner_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1ea7);
    let exp: SharedExperience = Arc::new(Mutex::new(Experience::new(cfg.replay_capacity, cfg.hmemory_episodes, cfg.rho)));
    let mut log = Vec::with_capacity(cfg.total_episodes);
    let mut checkpoints = Vec::new();
    let mut total_updates = 0;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }

    let mut record = |agent: &Agent<f64>, row: LogRow, log: &mut Vec<LogRow>| -> Result<()> {
        let done = log.len() + 1;
        log.push(row);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let stem = dir.join("checkpoints").join(format!("episode_{done:06}"));
                agent.save(&stem)?;
                checkpoints.push(stem);
            }
        }
        Ok(())
    };

    if cfg.num_workers == 1 {
        // serialized: act, store, learn, in a fixed order
        let mut worker_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        for episode in 0..cfg.total_episodes {
            let transitions = run_episode(&data, cfg, &agent.actor_net, &agent.actor, &mut worker_rng, 0, episode)?;
            let total_reward = transitions.iter().map(|t| t.reward).sum();
            exp.lock().expect("replay lock").add_episode(transitions);
            let (critic_loss, actor_j, updates) = learner_step(&mut agent, &exp, cfg, &mut learner_rng, |_| {})?;
            total_updates += updates;
            let row = LogRow {
                episode,
                worker: 0,
                total_reward,
                critic_loss,
                actor_j,
                updates,
            };
            record(&agent, row, &mut log)?;
        }
    } else {
        let snapshot: Arc<RwLock<Arc<ParamStore<f64>>>> = Arc::new(RwLock::new(Arc::new(agent.actor.clone())));
        let next_episode = Arc::new(AtomicUsize::new(0));
        let (tx, rx) = mpsc::channel::<Result<EpisodeResult>>();
        let handles: Vec<_> = (0..cfg.num_workers)
            .map(|worker| {
                let (data, cfg, net) = (data.clone(), cfg.clone(), agent.actor_net.clone());
                let (snapshot, next_episode, tx) = (snapshot.clone(), next_episode.clone(), tx.clone());
                thread::spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + worker as u64));
                    loop {
                        let episode = next_episode.fetch_add(1, Ordering::SeqCst);
                        if episode >= cfg.total_episodes {
                            return;
                        }
                        let params = snapshot.read().expect("snapshot lock").clone();
                        let res = run_episode(&data, &cfg, &net, &params, &mut rng, worker, episode).map(|transitions| EpisodeResult {
                            worker,
                            episode,
                            transitions,
                        });
                        let failed = res.is_err();
                        if tx.send(res).is_err() || failed {
                            return;
                        }
                    }
                })
            })
            .collect();
        drop(tx);
        let mut outcome = Ok(());
        for res in rx.iter().take(cfg.total_episodes) {
            let ep = match res {
                Ok(ep) => ep,
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            };
            let total_reward = ep.transitions.iter().map(|t| t.reward).sum();
            exp.lock().expect("replay lock").add_episode(ep.transitions);
            let publish = |p: &ParamStore<f64>| *snapshot.write().expect("snapshot lock") = Arc::new(p.clone());
            let (critic_loss, actor_j, updates) = match learner_step(&mut agent, &exp, cfg, &mut learner_rng, publish) {
                Ok(v) => v,
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            };
            total_updates += updates;
            let row = LogRow {
                episode: ep.episode,
                worker: ep.worker,
                total_reward,
                critic_loss,
                actor_j,
                updates,
            };
            if let Err(e) = record(&agent, row, &mut log) {
                outcome = Err(e);
                break;
            }
        }
        // stop handing out work, then drain
        next_episode.store(cfg.total_episodes, Ordering::SeqCst);
        drop(rx);
        for h in handles {
            h.join().map_err(|_| TrainError::WorkerPanic)?;
        }
        outcome?;
    }

    if let Some(dir) = out_dir {
        let stem = dir.join("checkpoint");
        agent.save(&stem)?;
        checkpoints.push(stem);
        write_run_log(&log, &dir.join("run_log.csv"))?;
    }
    Ok(TrainingReport {
        episodes: log.len(),
        updates: total_updates,
        log,
        agent,
        checkpoints,
    })
}

/// Chooses the day's target weights given the window ending on `day`.
pub trait Policy {
    fn name(&self) -> &str;
    fn action(&mut self, data: &MarketData, obs: &ObservationWindow) -> Result<ActionVector>;
}

pub struct Ucrp;

impl Policy for Ucrp {
    fn name(&self) -> &str {
        "ucrp"
    }

    fn action(&mut self, data: &MarketData, _obs: &ObservationWindow) -> Result<ActionVector> {
        Ok(ucrp_action(data.dataset.num_assets()))
    }
}

/// Max-Sharpe over the trailing close-to-close log returns (up to 50 days).
pub struct Mpt {
    pub lookback: usize,
}

impl Default for Mpt {
    fn default() -> Self {
        Self { lookback: MPT_LOOKBACK }
    }
}

impl Policy for Mpt {
    fn name(&self) -> &str {
        "mpt"
    }

    fn action(&mut self, data: &MarketData, obs: &ObservationWindow) -> Result<ActionVector> {
        let ds = &data.dataset;
        let m = ds.num_assets();
        let n = self.lookback.min(obs.day + 1);
        if n < m + 2 {
            return Ok(ucrp_action(m));
        }
        let returns: Vec<Vec<f64>> = (1..=m)
            .map(|c| (obs.day + 1 - n..=obs.day).map(|t| ds.log_return(t, c)).collect())
            .collect();
        Ok(mpt_action(&returns))
    }
}

pub struct Greedy {
    pub net: ActorNet,
    pub params: ParamStore<f64>,
}

impl Policy for Greedy {
    fn name(&self) -> &str {
        "agent"
    }

    fn action(&mut self, _data: &MarketData, obs: &ObservationWindow) -> Result<ActionVector> {
        Ok(Agent::act_with(&self.net, &self.params, obs)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub dates: Vec<NaiveDate>,
    /// `num_days + 1` values including the initial cash.
    pub values: Vec<f64>,
    /// Action applied on each of the first `num_days` dates.
    pub actions: Vec<Vec<f64>>,
    pub metrics: MetricReport,
}

impl EvaluationReport {
    pub fn to_csv(&self) -> String {
        let width = self.actions.first().map_or(0, Vec::len);
        let mut out = String::from("date,portfolio_value");
        for i in 0..width {
            let _ = write!(out, ",w{i}");
        }
        out.push('\n');
        for (k, (d, v)) in self.dates.iter().zip(&self.values).enumerate() {
            let _ = write!(out, "{d},{v}");
            match self.actions.get(k) {
                Some(a) => a.iter().for_each(|w| {
                    let _ = write!(out, ",{w}");
                }),
                None => (0..width).for_each(|_| out.push(',')),
            }
            out.push('\n');
        }
        out
    }
}

/// Noise-free rollout rebalancing daily from `start_day` for `num_days` days.
pub fn evaluate(
    policy: &mut dyn Policy,
    data: &Arc<MarketData>,
    start_day: usize,
    num_days: usize,
    costs: CostModel,
    initial_cash: f64,
) -> Result<EvaluationReport> {
    let days = data.dataset.num_days();
    if num_days == 0 || start_day < data.first_start() || start_day + num_days >= days {
        return Err(TrainError::Span(format!(
            "start {start_day} + {num_days} days needs {} <= start and end < {days}",
            data.first_start()
        )));
    }
    let mut env = MarketEnv::new(data.clone(), costs, num_days);
    let mut obs = env.reset(start_day, initial_cash)?;
    let mut values = vec![initial_cash];
    let mut actions = Vec::with_capacity(num_days);
    for _ in 0..num_days {
        let a = policy.action(data, &obs)?;
        let step = env.step(&a)?;
        actions.push(a.weights().to_vec());
        values.push(step.value);
        obs = step.observation;
    }
    Ok(EvaluationReport {
        dates: data.dataset.dates[start_day..=start_day + num_days].to_vec(),
        metrics: MetricReport::from_values(&values),
        values,
        actions,
    })
}
