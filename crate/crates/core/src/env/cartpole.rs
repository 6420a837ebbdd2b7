//! Classic cart-pole balancing task.
//!
//! State is `(x, x_dot, theta, theta_dot)`. Integration is semi-implicit Euler:
//! velocities are updated first and the new velocities move the positions.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Environment, MdpSpec, StepOutcome};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub half_length: f64,
    pub force: f64,
    pub tau: f64,
    pub theta_threshold: f64,
    pub x_threshold: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            force: 10.0,
            tau: 0.02,
            theta_threshold: 12.0 * 2.0 * std::f64::consts::PI / 360.0,
            x_threshold: 2.4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CartPole {
    spec: MdpSpec,
    params: CartPoleParams,
}

impl CartPole {
    pub fn new(horizon: usize, gamma: f64) -> Result<Self> {
        Self::with_params(horizon, gamma, CartPoleParams::default())
    }

    pub fn with_params(horizon: usize, gamma: f64, params: CartPoleParams) -> Result<Self> {
        let spec = MdpSpec {
            state_dim: 4,
            action_count: 2,
            horizon,
            gamma,
            reward_bound: 1.0,
        };
        spec.validate()?;
        Ok(CartPole { spec, params })
    }

    pub fn params(&self) -> &CartPoleParams {
        &self.params
    }

    /// One physics update. `action` 1 pushes right, 0 pushes left.
    pub fn dynamics(&self, state: &[f64], action: usize) -> Result<[f64; 4]> {
        if state.len() != 4 {
            return Err(Error::Dimension {
                expected: 4,
                got: state.len(),
            });
        }
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("cart-pole state {state:?}")));
        }
        if action > 1 {
            return Err(Error::config(format!(
                "cart-pole action {action} out of range"
            )));
        }
        let p = &self.params;
        let (x, x_dot, theta, theta_dot) = (state[0], state[1], state[2], state[3]);
        let force = if action == 1 { p.force } else { -p.force };
        let total_mass = p.cart_mass + p.pole_mass;
        let pole_mass_length = p.pole_mass * p.half_length;
        let (sin, cos) = theta.sin_cos();

        let temp = (force + pole_mass_length * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (p.gravity * sin - cos * temp)
            / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total_mass));
        let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;

        let x_dot = x_dot + p.tau * x_acc;
        let x = x + p.tau * x_dot;
        let theta_dot = theta_dot + p.tau * theta_acc;
        let theta = theta + p.tau * theta_dot;
        Ok([x, x_dot, theta, theta_dot])
    }

    pub fn is_out_of_bounds(&self, state: &[f64]) -> bool {
        state[0].abs() > self.params.x_threshold || state[2].abs() > self.params.theta_threshold
    }
}

impl Environment for CartPole {
    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..4).map(|_| rng.random_range(-0.05..0.05)).collect()
    }

    /// Every executed step earns reward 1, including the one that leaves the
    /// admissible region. The horizon cut-off is applied by the sampler.
    fn step(&self, state: &[f64], action: usize, _rng: &mut dyn RngCore) -> Result<StepOutcome> {
        let next = self.dynamics(state, action)?;
        let terminal = self.is_out_of_bounds(&next);
        Ok(StepOutcome {
            next_state: next.to_vec(),
            reward: 1.0,
            terminal,
        })
    }
}
