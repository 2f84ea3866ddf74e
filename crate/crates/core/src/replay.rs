//! Experience replay: a ring buffer of transitions plus a store of the best episodes
//! seen so far, mixed at sampling time.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::env::ObservationWindow;

pub const DEFAULT_CAPACITY: usize = 100_000;
pub const DEFAULT_HMEMORY_EPISODES: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: ObservationWindow,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: ObservationWindow,
    pub terminal: bool,
    pub worker: usize,
    pub episode: usize,
}

/// Fixed-capacity FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

/// Transitions of episodes whose total reward strictly beat every earlier episode.
#[derive(Clone, Debug)]
pub struct HMemory {
    max_episodes: usize,
    best: f64,
    episodes: VecDeque<Vec<Transition>>,
}

impl HMemory {
    pub fn new(max_episodes: usize) -> Self {
        Self {
            max_episodes,
            best: f64::NEG_INFINITY,
            episodes: VecDeque::new(),
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Stores the episode if its total reward is a new strict maximum.
    pub fn offer(&mut self, total_reward: f64, episode: &[Transition]) -> bool {
        if !(total_reward > self.best) || episode.is_empty() {
            return false;
        }
        self.best = total_reward;
        if self.max_episodes == 0 {
            return true;
        }
        if self.episodes.len() == self.max_episodes {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode.to_vec());
        true
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    fn get(&self, mut i: usize) -> &Transition {
        for ep in &self.episodes {
            if i < ep.len() {
                return &ep[i];
            }
            i -= ep.len();
        }
        panic!("HMemory index out of range")
    }
}

/// Replay plus HMemory. Each draw comes from HMemory with probability `rho`
/// (when it is non-empty), otherwise uniformly from the replay buffer.
#[derive(Clone, Debug)]
pub struct Experience {
    pub replay: ReplayBuffer,
    pub hmemory: HMemory,
    pub rho: f64,
}

impl Experience {
    pub fn new(capacity: usize, hmemory_episodes: usize, rho: f64) -> Self {
        Self {
            replay: ReplayBuffer::new(capacity),
            hmemory: HMemory::new(hmemory_episodes),
            rho,
        }
    }

    /// `None` when the main buffer is empty.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Option<Vec<Transition>> {
        if self.replay.is_empty() {
            return None;
        }
        let out = (0..n)
            .map(|_| {
                let from_h = !self.hmemory.is_empty() && rng.random::<f64>() < self.rho;
                if from_h {
                    self.hmemory.get(rng.random_range(0..self.hmemory.len())).clone()
                } else {
                    self.replay.get(rng.random_range(0..self.replay.len())).clone()
                }
            })
            .collect();
        Some(out)
    }

    /// Pushes a finished episode into replay and offers it to HMemory.
    pub fn add_episode(&mut self, episode: Vec<Transition>) -> bool {
        let total: f64 = episode.iter().map(|t| t.reward).sum();
        let kept = self.hmemory.offer(total, &episode);
        for t in episode {
            self.replay.push(t);
        }
        kept
    }
}

pub type SharedExperience = Arc<Mutex<Experience>>;
