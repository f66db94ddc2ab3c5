//! Episode returns of the learned policy, the expert and uniform random commands
//! on a shared set of episode seeds.

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EnvConfig, RewardGains};
use crate::episode::{Episode, StepRecord};
use crate::expert::{ExpertController, ExpertGains};
use crate::policy::Actor;
use crate::Result;

/// Who chooses the velocity commands.
#[derive(Clone, Copy, Debug)]
pub enum Controller<'a> {
    /// Deterministic mean action of the actor.
    Policy(&'a Actor),
    Expert(ExpertGains),
    /// Independent uniform commands in `[-max_speed, max_speed]` per axis.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Per episode, the sum over steps of the agent-mean reward.
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `returns`.
    pub std: f64,
}

impl EvalSummary {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { returns, mean, std }
    }
}

/// Seed of evaluation episode `k` for a run seeded with `seed`.
pub fn episode_seed(seed: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng.next_u64()
}

/// Plays one episode; returns its return and, when asked, the trace.
pub fn run_episode(
    controller: Controller,
    env: &EnvConfig,
    gains: &RewardGains,
    seed: u64,
    index: usize,
    trace: bool,
) -> Result<(f64, Vec<StepRecord>)> {
    let mut episode = Episode::new(env, gains, seed)?;
    let n = env.num_agents;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let mut expert = match controller {
        Controller::Expert(g) => Some(ExpertController::new(episode.state(), g)?),
        _ => None,
    };
    let mut x = match controller {
        Controller::Policy(actor) => Some(actor.initial_state(n)),
        _ => None,
    };
    let mut ret = 0.0;
    let mut records = Vec::new();
    while !episode.done() {
        let actions = match controller {
            Controller::Policy(actor) => {
                let step = actor.act(&episode.observations(), &episode.graph().support, x.as_ref().expect("policy state"), None)?;
                x = Some(step.state);
                step.actions
            }
            Controller::Expert(_) => expert.as_ref().expect("expert controller").act(episode.state())?,
            Controller::Random => {
                let u = env.max_speed;
                Array2::from_shape_fn((n, env.dim), |_| rng.random_range(-u..=u))
            }
        };
        let outcome = episode.step(&actions)?;
        if let Some(ctl) = expert.as_mut() {
            ctl.update(episode.state(), &outcome.report)?;
        }
        ret += outcome.rewards.totals.iter().sum::<f64>() / n as f64;
        if trace {
            records.push(episode.record(index, &actions, &outcome, x.as_ref()));
        }
    }
    Ok((ret, records))
}

/// Runs `episodes` episodes in parallel; traces come back in episode order.
pub fn evaluate(
    controller: Controller,
    env: &EnvConfig,
    gains: &RewardGains,
    episodes: usize,
    seed: u64,
    trace: bool,
) -> Result<(EvalSummary, Vec<StepRecord>)> {
    let runs = (0..episodes)
        .into_par_iter()
        .map(|k| run_episode(controller, env, gains, episode_seed(seed, k), k, trace))
        .collect::<Result<Vec<_>>>()?;
    let mut returns = Vec::with_capacity(episodes);
    let mut records = Vec::new();
    for (ret, recs) in runs {
        returns.push(ret);
        records.extend(recs);
    }
    Ok((EvalSummary::from_returns(returns), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn env() -> EnvConfig {
        EnvConfig { num_agents: 3, num_consumers: 2, num_resources: 1, episode_steps: 40, ..EnvConfig::default() }
    }

    #[test]
    fn summary_statistics() {
        let s = EvalSummary::from_returns(vec![1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }

    #[test]
    fn seeds_differ_per_episode_and_repeat() {
        assert_ne!(episode_seed(1, 0), episode_seed(1, 1));
        assert_eq!(episode_seed(1, 4), episode_seed(1, 4));
    }

    #[test]
    fn evaluation_is_deterministic_and_traced() {
        let gains = RewardGains::default();
        let model = ModelConfig { feature_dim: 4, state_dim: 4, encoder_hidden: 4, head_hidden: vec![8], ..ModelConfig::default() };
        let actor = Actor::new(&env(), &model, &mut ChaCha8Rng::seed_from_u64(0));
        let expert = ExpertGains { k_p: 1.0, k_rep: 0.05, eps_safe: 0.01 };
        for ctl in [Controller::Policy(&actor), Controller::Expert(expert), Controller::Random] {
            let (a, ta) = evaluate(ctl, &env(), &gains, 3, 7, true).unwrap();
            let (b, tb) = evaluate(ctl, &env(), &gains, 3, 7, true).unwrap();
            assert_eq!(a, b);
            assert_eq!(ta, tb);
            assert_eq!(ta.len(), 3 * 40);
            assert_eq!(ta[40].episode, 1);
        }
    }

    #[test]
    fn expert_beats_random() {
        let gains = RewardGains::default();
        let expert = ExpertGains { k_p: 1.0, k_rep: 0.05, eps_safe: 0.01 };
        let (e, _) = evaluate(Controller::Expert(expert), &env(), &gains, 10, 3, false).unwrap();
        let (r, _) = evaluate(Controller::Random, &env(), &gains, 10, 3, false).unwrap();
        assert!(e.mean > r.mean, "expert {} random {}", e.mean, r.mean);
    }
}
