//! Synchronous round fabric: seed derivation, the common coin, per-agent
//! state, and the round driver that enforces barrier-level checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{Adversary, RoundMailbox};
use crate::error::{Error, Result};
use crate::param::ParamVector;

/// Pseudo agent ids for streams not owned by a single agent.
pub const COMMON_AGENT: u64 = u64::MAX;
pub const ADVERSARY_AGENT: u64 = u64::MAX - 1;

/// Domain-separated SHA-256 of `(root, agent, purpose, round)`, truncated to 64 bits.
pub fn derive_seed(root_seed: u64, agent_id: u64, purpose: &str, round: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"fedpg.seed.v1");
    h.update(root_seed.to_le_bytes());
    h.update(agent_id.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(round.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

pub fn stream(root_seed: u64, agent_id: u64, purpose: &str, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root_seed, agent_id, purpose, round))
}

/// Shared pseudorandom source seeded from the common initialization. Every
/// honest agent holds an identical copy and therefore draws identical values.
#[derive(Debug, Clone)]
pub struct CommonCoin {
    rng: ChaCha8Rng,
}

impl CommonCoin {
    pub fn new(root_seed: u64) -> Self {
        CommonCoin {
            rng: stream(root_seed, COMMON_AGENT, "common-coin", 0),
        }
    }

    /// Be(p). Consumes exactly one draw.
    pub fn bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::config(format!(
                "Bernoulli probability {p} outside (0, 1]"
            )));
        }
        let u: f64 = self.rng.random();
        Ok(u < p)
    }

    /// Uniform over `0..t`.
    pub fn uniform_round(&mut self, t: usize) -> Result<usize> {
        if t == 0 {
            return Err(Error::config("uniform round needs T >= 1"));
        }
        Ok(self.rng.random_range(0..t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Honest-local Adam moments. Never communicated.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: ParamVector,
    pub second: ParamVector,
    pub steps: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            first: ParamVector::zeros(dim),
            second: ParamVector::zeros(dim),
            steps: 0,
        }
    }

    /// Ascent direction scaled to a unit step: m̂ / (√v̂ + ε).
    pub fn direction(&mut self, grad: &ParamVector, params: &AdamParams) -> ParamVector {
        self.steps += 1;
        let b1t = 1.0 - params.beta1.powi(self.steps as i32);
        let b2t = 1.0 - params.beta2.powi(self.steps as i32);
        let mut out = ParamVector::zeros(grad.len());
        for i in 0..grad.len() {
            let g = grad[i];
            self.first[i] = params.beta1 * self.first[i] + (1.0 - params.beta1) * g;
            self.second[i] = params.beta2 * self.second[i] + (1.0 - params.beta2) * g * g;
            let m = self.first[i] / b1t;
            let v = self.second[i] / b2t;
            out[i] = m / (v.sqrt() + params.epsilon);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    /// θ_t
    pub theta: ParamVector,
    /// θ_{t−1}
    pub prev_theta: ParamVector,
    /// θ̃_t, the parameters right after the local update of round t−1 and
    /// before agreement.
    pub pre_agreement: ParamVector,
    /// v_{t−1}, the aggregated estimate applied in round t−1.
    pub last_estimate: ParamVector,
    pub adam: Option<AdamState>,
}

impl AgentState {
    pub fn new(theta0: ParamVector, adam: bool) -> Self {
        let d = theta0.len();
        AgentState {
            prev_theta: theta0.clone(),
            pre_agreement: theta0.clone(),
            theta: theta0,
            last_estimate: ParamVector::zeros(d),
            adam: adam.then(|| AdamState::new(d)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FederationState {
    pub round: usize,
    pub agents: Vec<AgentState>,
    pub root_seed: u64,
    pub coin: CommonCoin,
    /// Test mode: every agent draws its trajectories from agent 0's stream.
    pub shared_sampling: bool,
}

impl FederationState {
    /// Every agent starts from the same θ₀.
    pub fn new(
        agent_count: usize,
        theta0: ParamVector,
        root_seed: u64,
        adam: bool,
    ) -> Result<Self> {
        if agent_count == 0 {
            return Err(Error::config("a federation needs at least one agent"));
        }
        Ok(FederationState {
            round: 0,
            agents: (0..agent_count)
                .map(|_| AgentState::new(theta0.clone(), adam))
                .collect(),
            root_seed,
            coin: CommonCoin::new(root_seed),
            shared_sampling: false,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    /// Stream owned by one agent for one purpose in the current round.
    pub fn agent_stream(&self, agent: usize, purpose: &str) -> ChaCha8Rng {
        stream(self.root_seed, agent as u64, purpose, self.round as u64)
    }

    /// Trajectory-sampling stream of `agent` in the current round.
    pub fn sampling_stream(&self, agent: usize) -> ChaCha8Rng {
        let owner = if self.shared_sampling { 0 } else { agent };
        self.agent_stream(owner, "sample")
    }

    /// Stream shared by all honest agents in the current round.
    pub fn common_stream(&self, purpose: &str) -> ChaCha8Rng {
        stream(self.root_seed, COMMON_AGENT, purpose, self.round as u64)
    }
}

/// The barrier structure of one algorithm iteration.
pub trait RoundPlan {
    type Report;

    /// Run every phase of round `state.round`. Broadcasts must go through
    /// [`broadcast`] so the adversary sits at each barrier.
    fn execute(
        &mut self,
        state: &mut FederationState,
        adversary: &Adversary,
    ) -> Result<Self::Report>;
}

/// Execute one round, reject non-finite honest parameters, and advance `t`.
pub fn run_round<P: RoundPlan>(
    state: &mut FederationState,
    plan: &mut P,
    adversary: &Adversary,
) -> Result<P::Report> {
    let round = state.round;
    let report = plan.execute(state, adversary)?;
    let byzantine = adversary.byzantine_set(round);
    for (k, agent) in state.agents.iter().enumerate() {
        if byzantine.contains(&k) {
            continue;
        }
        if !agent.theta.is_finite() {
            return Err(Error::NonFinite(format!(
                "round {round}, agent {k}: parameters diverged"
            )));
        }
    }
    state.round += 1;
    Ok(report)
}

/// All-to-all broadcast barrier. Honest rows are delivered verbatim to every
/// recipient; Byzantine rows come from the adversary and may differ per
/// recipient.
pub fn broadcast(
    adversary: &Adversary,
    payloads: &[Option<ParamVector>],
    byzantine: &[usize],
    round: usize,
    phase: crate::adversary::Phase,
    recipients: &[usize],
) -> Result<Vec<RoundMailbox>> {
    for (k, p) in payloads.iter().enumerate() {
        if !byzantine.contains(&k) {
            match p {
                Some(v) if v.is_finite() => {}
                Some(_) => {
                    return Err(Error::NonFinite(format!(
                        "round {round}, agent {k}: non-finite payload in {phase:?}"
                    )))
                }
                None => return Err(Error::config(format!("honest agent {k} has no payload"))),
            }
        }
    }
    let mailboxes = adversary.build_mailboxes(payloads, byzantine, round, phase, recipients)?;
    for mb in &mailboxes {
        for (sender, v) in &mb.entries {
            if !byzantine.contains(sender) && Some(v) != payloads[*sender].as_ref() {
                return Err(Error::config(format!(
                    "round {round}: honest row from agent {sender} altered in transit"
                )));
            }
        }
    }
    Ok(mailboxes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_deterministic_and_separated() {
        let a = derive_seed(7, 3, "sample", 11);
        assert_eq!(a, derive_seed(7, 3, "sample", 11));
        assert_ne!(a, derive_seed(7, 4, "sample", 11));
        assert_ne!(a, derive_seed(7, 3, "bucketing", 11));
        assert_ne!(a, derive_seed(7, 3, "sample", 12));
        assert_ne!(a, derive_seed(8, 3, "sample", 11));
        // Length prefix keeps ("ab", "c") and ("a", "bc")-style splits apart.
        assert_ne!(derive_seed(0, 0, "ab", 0), derive_seed(0, 0, "a", 0));
    }

    #[test]
    fn coin_with_p_one_always_fires() {
        let mut coin = CommonCoin::new(1);
        assert!((0..1000).all(|_| coin.bernoulli(1.0).unwrap()));
        assert!(coin.bernoulli(0.0).is_err());
        assert_eq!(coin.uniform_round(1).unwrap(), 0);
        assert!(coin.uniform_round(0).is_err());
    }

    #[test]
    fn coins_with_same_seed_agree() {
        let mut a = CommonCoin::new(42);
        let mut b = CommonCoin::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.bernoulli(0.3).unwrap(), b.bernoulli(0.3).unwrap());
        }
        for _ in 0..100 {
            assert_eq!(a.uniform_round(16).unwrap(), b.uniform_round(16).unwrap());
        }
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut adam = AdamState::new(3);
        let g = ParamVector::from_vec(vec![2.0, -0.5, 0.0]);
        let d = adam.direction(&g, &AdamParams::default());
        assert!((d[0] - 1.0).abs() < 1e-7);
        assert!((d[1] + 1.0).abs() < 1e-7);
        assert_eq!(d[2], 0.0);
    }
}
