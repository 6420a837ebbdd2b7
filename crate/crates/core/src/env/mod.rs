//! Episodic MDP environments with a fixed horizon.
//!
//! Environments are pure transition functions; all randomness comes from the
//! stream passed in by the caller, so one environment value can be shared by
//! every agent.

mod cartpole;
mod chain;

pub use cartpole::{CartPole, CartPoleParams};
pub use chain::{
    enumerate_exact_gradient, parse_chain_spec, ChainOracle, ChainOracleSpec, ENUMERATION_CAP,
};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::policy::SoftmaxPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub state_dim: usize,
    pub action_count: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub reward_bound: f64,
}

impl MdpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.reward_bound > 0.0 && self.reward_bound.is_finite()) {
            return Err(Error::config("reward_bound must be positive and finite"));
        }
        if self.state_dim == 0 || self.action_count == 0 {
            return Err(Error::config("state_dim and action_count must be positive"));
        }
        Ok(())
    }

    /// Upper bound on the discounted return of any trajectory.
    pub fn return_bound(&self) -> f64 {
        self.reward_bound * (1.0 - self.gamma.powi(self.horizon as i32)) / (1.0 - self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &MdpSpec;

    /// Draw an initial state from the start distribution.
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    fn step(&self, state: &[f64], action: usize, rng: &mut dyn RngCore) -> Result<StepOutcome>;

    /// Policy input for a raw state. Identity unless the environment keeps a
    /// separate feature map.
    fn observe(&self, state: &[f64]) -> Vec<f64> {
        state.to_vec()
    }

    /// Exact enumeration support, available only for small tabular MDPs.
    fn as_enumerable(&self) -> Option<&ChainOracle> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Observation the policy acted on.
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub behavior_log_prob: f64,
}

/// A fixed-length episode. Steps at or after `truncated_at` are absorbing
/// padding: zero reward, action 0, log-probability 0, and no dependence on the
/// policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub truncated_at: Option<usize>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Steps at which the policy actually acted.
    pub fn live_steps(&self) -> &[Step] {
        let end = self.truncated_at.unwrap_or(self.steps.len());
        &self.steps[..end]
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut discount = 1.0;
        let mut total = 0.0;
        for s in &self.steps {
            total += discount * s.reward;
            discount *= gamma;
        }
        total
    }
}

/// Who picks the actions while sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSource {
    Policy,
    /// Uniformly random actions; the recorded log-probability is that of the
    /// uniform sampler.
    Uniform,
}

pub fn sample_trajectory(
    env: &dyn Environment,
    policy: &SoftmaxPolicy,
    theta: &ParamVector,
    rng: &mut dyn RngCore,
    source: ActionSource,
) -> Result<Trajectory> {
    let spec = env.spec();
    theta.check_dim(policy.param_count())?;
    let horizon = spec.horizon;
    let mut steps = Vec::with_capacity(horizon);
    let mut state = env.reset(rng);
    let mut truncated_at = None;

    for h in 0..horizon {
        let obs = env.observe(&state);
        let (action, log_prob) = match source {
            ActionSource::Policy => {
                let log_probs = policy.action_log_probs(theta, &obs)?;
                let a = sample_categorical(&log_probs, rng);
                (a, log_probs[a])
            }
            ActionSource::Uniform => {
                let n = spec.action_count;
                (rng.random_range(0..n), -(n as f64).ln())
            }
        };
        let outcome = env.step(&state, action, rng)?;
        steps.push(Step {
            state: obs,
            action,
            reward: outcome.reward,
            behavior_log_prob: log_prob,
        });
        state = outcome.next_state;
        if outcome.terminal && h + 1 < horizon {
            truncated_at = Some(h + 1);
            let absorbing = env.observe(&state);
            for _ in (h + 1)..horizon {
                steps.push(Step {
                    state: absorbing.clone(),
                    action: 0,
                    reward: 0.0,
                    behavior_log_prob: 0.0,
                });
            }
            break;
        }
    }
    Ok(Trajectory {
        steps,
        truncated_at,
    })
}

pub fn sample_batch(
    env: &dyn Environment,
    policy: &SoftmaxPolicy,
    theta: &ParamVector,
    count: usize,
    rng: &mut dyn RngCore,
    source: ActionSource,
) -> Result<Vec<Trajectory>> {
    (0..count)
        .map(|_| sample_trajectory(env, policy, theta, rng, source))
        .collect()
}

/// Inverse-CDF draw from log-probabilities. Masked actions carry `-inf` and
/// are never selected.
fn sample_categorical(log_probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_valid = 0;
    for (a, &lp) in log_probs.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        last_valid = a;
        cum += lp.exp();
        if u < cum {
            return a;
        }
    }
    last_valid
}
