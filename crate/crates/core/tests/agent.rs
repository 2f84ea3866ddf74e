mod common;

use common::{gradcheck_store, rng, FD_TOL};
use relgate::agent::{actor_objective, critic_loss, td_target, Agent, AgentConfig, Batch, OuNoise};
use relgate::data::{align_and_transform, synth_gbm, SynthParams};
use relgate::env::{MarketData, ObservationWindow};
use relgate::nn::transformer::EncoderConfig;
use relgate::replay::Transition;
use relgate::tensor::{Bound, Graph, ParamStore, Tensor};
use std::sync::Arc;

fn tiny_config(window: usize, height: usize) -> AgentConfig {
    AgentConfig::new(EncoderConfig {
        layers: 1,
        heads: 2,
        model_dim: 8,
        ffn_dim: 16,
        time_len: window,
        height,
        time_encoding: true,
    })
}

fn market(window: usize, assets: usize) -> Arc<MarketData> {
    let p = SynthParams::new(assets, 40, vec![0.001; assets], vec![0.02; assets], 5);
    MarketData::new(align_and_transform(&synth_gbm(&p).unwrap()).unwrap(), window).unwrap()
}

fn transitions(md: &MarketData, n: usize) -> Vec<Transition> {
    let h = md.dataset.columns();
    (0..n)
        .map(|i| {
            let day = md.first_start() + i;
            let mut a = vec![0.1; h];
            a[i % h] += 1.0 - 0.1 * h as f64;
            Transition {
                state: md.window(day).unwrap(),
                action: a,
                reward: 0.1 * i as f64 - 0.2,
                next_state: md.window(day + 1).unwrap(),
                terminal: i % 3 == 2,
                worker: 0,
                episode: 0,
            }
        })
        .collect()
}

#[test]
fn act_is_a_deterministic_simplex_vector() {
    let md = market(4, 2);
    let agent = Agent::<f64>::new(tiny_config(4, 3), &mut rng(1)).unwrap();
    let obs = md.window(5).unwrap();
    let a = agent.act(&obs).unwrap();
    assert_eq!(a.len(), 3);
    assert!((a.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(a.weights().iter().all(|&w| (0.0..=1.0).contains(&w)));
    assert_eq!(a, agent.act(&obs).unwrap());
}

#[test]
fn zeroed_head_gives_uniform_action() {
    let md = market(4, 2);
    let mut agent = Agent::<f64>::new(tiny_config(4, 3), &mut rng(2)).unwrap();
    for id in [agent.actor_net.head.weight, agent.actor_net.head.bias] {
        agent.actor.value_mut(id).data_mut().fill(0.0);
    }
    let a = agent.act(&md.window(6).unwrap()).unwrap();
    assert!(a.weights().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn zero_noise_exploration_equals_greedy() {
    let md = market(4, 2);
    let agent = Agent::<f64>::new(tiny_config(4, 3), &mut rng(3)).unwrap();
    let obs = md.window(7).unwrap();
    let mut noise = OuNoise::new(3, 0.13, 0.0, 0.0);
    let a = Agent::act_explore_with(&agent.actor_net, &agent.actor, &obs, &mut noise, &mut rng(4)).unwrap();
    assert_eq!(a, agent.act(&obs).unwrap());
}

#[test]
fn exploration_stays_on_simplex() {
    let md = market(4, 2);
    let agent = Agent::<f64>::new(tiny_config(4, 3), &mut rng(5)).unwrap();
    let mut noise = OuNoise::new(3, 0.13, 0.0, 2.0);
    let mut r = rng(6);
    for day in 3..30 {
        let a = Agent::act_explore_with(&agent.actor_net, &agent.actor, &md.window(day).unwrap(), &mut noise, &mut r).unwrap();
        assert!((a.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(a.weights().iter().all(|&w| w >= 0.0));
    }
}

#[test]
fn frozen_ou_process_never_moves() {
    let mut n = OuNoise::new(4, 0.0, 0.0, 0.0);
    let mut r = rng(7);
    for _ in 0..100 {
        assert!(n.sample(&mut r).iter().all(|&x| x == 0.0));
    }
}

#[test]
fn td_target_examples() {
    assert_eq!(td_target(0.3, true, 0.9, 5.0), 0.3);
    assert_eq!(td_target(0.3, false, 0.0, 5.0), 0.3);
    assert!((td_target(0.1, false, 0.9, 1.0) - 1.0).abs() < 1e-15);
}

#[test]
fn targets_start_as_exact_copies() {
    let agent = Agent::<f64>::new(tiny_config(3, 2), &mut rng(8)).unwrap();
    for (a, b) in agent.actor.iter().zip(agent.target_actor.iter()) {
        assert_eq!(a, b);
    }
    for (a, b) in agent.critic.iter().zip(agent.target_critic.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn unit_td_error_has_unit_loss() {
    let md = market(3, 1);
    let mut agent = Agent::<f64>::new(tiny_config(3, 2), &mut rng(9)).unwrap();
    for id in [agent.critic_net.out.weight, agent.critic_net.out.bias] {
        agent.critic.value_mut(id).data_mut().fill(0.0);
    }
    let batch = Batch::from_transitions(&transitions(&md, 1)).unwrap();
    let loss = agent.critic_update(&batch, &[1.0]).unwrap();
    assert!((loss - 1.0).abs() < 1e-15);
}

#[test]
fn zero_td_error_gives_zero_loss_and_no_motion() {
    let md = market(3, 1);
    let mut agent = Agent::<f64>::new(tiny_config(3, 2), &mut rng(10)).unwrap();
    let batch = Batch::from_transitions(&transitions(&md, 4)).unwrap();
    let q = agent.q_values(&agent.critic, &batch.states, &batch.actions).unwrap();
    let before = agent.critic.clone();
    let loss = agent.critic_update(&batch, &q).unwrap();
    assert_eq!(loss, 0.0);
    for ((_, a), (_, b)) in agent.critic.iter().zip(before.iter()) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}

#[test]
fn updates_touch_only_their_own_network() {
    let md = market(3, 1);
    let mut agent = Agent::<f64>::new(tiny_config(3, 2), &mut rng(11)).unwrap();
    let batch = Batch::from_transitions(&transitions(&md, 5)).unwrap();
    let critic = agent.critic.clone();
    agent.actor_update(&batch.states).unwrap();
    assert!(agent.critic.iter().zip(critic.iter()).all(|(a, b)| a == b));
    let actor = agent.actor.clone();
    let targets = agent.td_targets(&batch).unwrap();
    agent.critic_update(&batch, &targets).unwrap();
    assert!(agent.actor.iter().zip(actor.iter()).all(|(a, b)| a == b));
}

#[test]
fn action_blind_critic_gives_zero_actor_gradient() {
    let md = market(3, 1);
    let mut agent = Agent::<f64>::new(tiny_config(3, 2), &mut rng(12)).unwrap();
    let proj = agent.critic_net.action_proj;
    for id in [proj.weight, proj.bias] {
        agent.critic.value_mut(id).data_mut().fill(0.0);
    }
    let batch = Batch::from_transitions(&transitions(&md, 3)).unwrap();
    let before = agent.actor.clone();
    agent.actor_update(&batch.states).unwrap();
    for ((_, a), (_, b)) in agent.actor.iter().zip(before.iter()) {
        // Adam with a zero gradient leaves parameters unchanged
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}

#[test]
fn empty_batches_are_rejected() {
    assert!(Batch::<f64>::from_transitions(&[]).is_err());
}

#[test]
fn critic_loss_gradients_match_finite_differences() {
    let md = market(3, 1);
    let agent = Agent::<f64>::new(tiny_config(3, 2), &mut rng(13)).unwrap();
    let batch = Batch::<f64>::from_transitions(&transitions(&md, 3)).unwrap();
    let targets = [0.5, -0.3, 1.2];
    let err = gradcheck_store(&agent.critic, 1, |g, p| {
        let x = g.constant(batch.states.clone())?;
        let a = g.constant(batch.actions.clone())?;
        critic_loss(g, &agent.critic_net, p, x, a, &targets).map_err(|e| match e {
            relgate::agent::AgentError::Tensor(t) => t,
            other => panic!("{other}"),
        })
    });
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn actor_objective_gradients_match_finite_differences() {
    let md = market(3, 1);
    let agent = Agent::<f64>::new(tiny_config(3, 2), &mut rng(14)).unwrap();
    let batch = Batch::<f64>::from_transitions(&transitions(&md, 3)).unwrap();
    let err = gradcheck_store(&agent.actor, 1, |g, p| {
        let x = g.constant(batch.states.clone())?;
        actor_objective(g, &agent.actor_net, p, &agent.critic_net, Bound::frozen(&agent.critic), x).map_err(|e| match e {
            relgate::agent::AgentError::Tensor(t) => t,
            other => panic!("{other}"),
        })
    });
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn soft_update_interpolates_exactly() {
    let mut agent = Agent::<f64>::new(tiny_config(3, 2), &mut rng(15)).unwrap();
    let fresh = Agent::<f64>::new(tiny_config(3, 2), &mut rng(16)).unwrap();
    agent.actor.copy_values_from(&fresh.actor).unwrap();
    let before = agent.target_actor.clone();
    agent.soft_update().unwrap();
    for (((_, t), (_, o)), (_, b)) in agent.target_actor.iter().zip(agent.actor.iter()).zip(before.iter()) {
        for ((tv, ov), bv) in t.data().iter().zip(o.data()).zip(b.data()) {
            assert!((tv - (0.15 * ov + 0.85 * bv)).abs() <= 1e-15);
        }
    }
}

#[test]
fn checkpoint_round_trip_restores_everything() {
    let dir = tempfile::tempdir().unwrap();
    let md = market(3, 1);
    let mut agent = Agent::<f64>::new(tiny_config(3, 2), &mut rng(17)).unwrap();
    let batch = Batch::from_transitions(&transitions(&md, 4)).unwrap();
    let targets = agent.td_targets(&batch).unwrap();
    agent.critic_update(&batch, &targets).unwrap();
    agent.actor_update(&batch.states).unwrap();
    agent.soft_update().unwrap();
    let stem = dir.path().join("ckpt");
    agent.save(&stem).unwrap();
    let mut loaded = Agent::<f64>::load(&stem, 1e-4, 1e-4).unwrap();
    for (a, b) in [
        (&agent.actor, &loaded.actor),
        (&agent.critic, &loaded.critic),
        (&agent.target_actor, &loaded.target_actor),
        (&agent.target_critic, &loaded.target_critic),
    ] {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x == y));
    }
    // identical optimizer state means identical next steps
    agent.critic_update(&batch, &targets).unwrap();
    loaded.critic_update(&batch, &targets).unwrap();
    assert!(agent.critic.iter().zip(loaded.critic.iter()).all(|(x, y)| x == y));
}

#[test]
fn f32_agent_acts_on_the_simplex() {
    let md = market(3, 1);
    let agent = Agent::<f32>::new(tiny_config(3, 2), &mut rng(18)).unwrap();
    let a = agent.act(&md.window(4).unwrap()).unwrap();
    assert!((a.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let x: Tensor<f32> = ObservationWindow::batch(&[&md.window(4).unwrap()]);
    let mut g = Graph::<f32>::new();
    let v = g.constant(x).unwrap();
    let _ = agent.actor_net.forward(&mut g, Bound::frozen(&agent.actor), v).unwrap();
    let _: &ParamStore<f32> = &agent.target_actor;
}

#[test]
fn scalar_soft_update_examples() {
    let mut online = ParamStore::<f64>::new();
    online.add("w", Tensor::scalar(1.0)).unwrap();
    let mut target = ParamStore::<f64>::new();
    let id = target.add("w", Tensor::scalar(0.0)).unwrap();
    target.soft_update_from(&online, 0.0).unwrap();
    assert_eq!(target.value(id).item(), Some(0.0));
    target.soft_update_from(&online, 0.15).unwrap();
    assert_eq!(target.value(id).item(), Some(0.15));
    target.soft_update_from(&online, 1.0).unwrap();
    assert_eq!(target.value(id).item(), Some(1.0));
}
