//! Federated PAGE-style policy-gradient algorithms.
//!
//! * `PagePg`: single agent, probabilistic switch between a large fresh batch
//!   and a small importance-weighted recursive batch.
//! * `ByzPg` / `FedPagePg`: a trusted server (agent 0). Large-batch rounds
//!   aggregate the K worker estimates; small-batch rounds sample at the server
//!   only. `FedPagePg` is the same loop with plain averaging.
//! * `DecByzPg` / `DecPagePg`: every agent keeps its own parameters, robustly
//!   aggregates the broadcast estimates every round and then runs κ rounds of
//!   averaging agreement. `DecPagePg` averages and skips agreement.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adversary::{Adversary, AdversaryConfig, ByzantineStrategy, Phase};
use crate::agreement::{run_agreement, AgreementConfig, AgreementKind};
use crate::env::{sample_batch, ActionSource, Environment, Trajectory};
use crate::error::{Error, Result};
use crate::estimators::{batch_estimate, page_correction, BaselineConfig, EstimatorKind};
use crate::param::{self, ParamVector};
use crate::policy::SoftmaxPolicy;
use crate::robust_agg::{robust_aggregate, AggregatorConfig, AggregatorKind};
use crate::runtime::{
    broadcast, run_round, stream, AdamParams, AgentState, FederationState, RoundPlan, COMMON_AGENT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    PagePg,
    FedPagePg,
    DecPagePg,
    ByzPg,
    DecByzPg,
}

impl AlgorithmKind {
    pub fn is_decentralized(self) -> bool {
        matches!(self, AlgorithmKind::DecPagePg | AlgorithmKind::DecByzPg)
    }

    /// Mean aggregation, no agreement.
    pub fn is_naive(self) -> bool {
        matches!(self, AlgorithmKind::FedPagePg | AlgorithmKind::DecPagePg)
    }

    pub fn alpha_max(self) -> f64 {
        if self.is_decentralized() {
            0.25
        } else {
            0.5
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// θ ← θ + η v
    PlainAscent,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub algorithm: AlgorithmKind,
    pub agents: usize,
    /// N
    pub large_batch: usize,
    /// B
    pub small_batch: usize,
    /// p
    pub switch_prob: f64,
    /// η
    pub step_size: f64,
    /// T
    pub iterations: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub adam: AdamParams,
    #[serde(default)]
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

impl AlgoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::config("agents must be at least 1"));
        }
        if self.algorithm == AlgorithmKind::PagePg && self.agents != 1 {
            return Err(Error::config(
                "page_pg is a single-agent method (agents = 1)",
            ));
        }
        if !(1 <= self.small_batch && self.small_batch <= self.large_batch) {
            return Err(Error::config(format!(
                "batch sizes must satisfy 1 <= small_batch ({}) <= large_batch ({})",
                self.small_batch, self.large_batch
            )));
        }
        if !(self.switch_prob > 0.0 && self.switch_prob <= 1.0) {
            return Err(Error::config(format!(
                "switch_prob {} outside (0, 1]",
                self.switch_prob
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("step_size must be positive"));
        }
        self.baseline.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    /// c_t = 1 or t = 0.
    pub large_batch: bool,
    /// Trajectories each participating honest agent sampled this iteration.
    pub trajectories: usize,
    /// Mean undiscounted return per agent; `None` for Byzantine agents and
    /// agents that did not sample.
    pub honest_returns: Vec<Option<f64>>,
    pub mean_honest_return: f64,
    /// Largest importance weight used, if a correction term was computed.
    pub max_importance_weight: Option<f64>,
    /// Honest parameter diameter after the iteration.
    pub honest_diameter: f64,
    pub byzantine: Vec<usize>,
    /// Per-agent update estimate that was applied (v_t), before agreement.
    pub applied_estimates: Vec<ParamVector>,
}

/// Everything an iteration reads but never mutates.
pub struct Setup<'a> {
    pub env: &'a dyn Environment,
    pub policy: &'a SoftmaxPolicy,
    pub algo: &'a AlgoConfig,
    pub aggregator: &'a AggregatorConfig,
    pub agreement: &'a AgreementConfig,
}

struct LocalEstimate {
    estimate: ParamVector,
    mean_return: f64,
    max_weight: Option<f64>,
}

fn mean_return(batch: &[Trajectory]) -> f64 {
    batch
        .iter()
        .map(Trajectory::undiscounted_return)
        .sum::<f64>()
        / batch.len() as f64
}

/// v̂_{t−1} = v_{t−1} + (θ_t − θ̃_t)/η. Under plain ascent θ̃_t = θ_{t−1} + η v_{t−1},
/// so this is exactly (θ_t − θ_{t−1})/η; when agreement leaves θ̃_t unchanged it
/// is v_{t−1} bit for bit.
pub fn realized_estimate(agent: &AgentState, step_size: f64) -> ParamVector {
    let mut drift = agent.theta.sub(&agent.pre_agreement);
    drift.scale(1.0 / step_size);
    let mut out = agent.last_estimate.clone();
    out.add_assign(&drift);
    out
}

impl Setup<'_> {
    fn gamma(&self) -> f64 {
        self.env.spec().gamma
    }

    fn sample(
        &self,
        theta: &ParamVector,
        count: usize,
        state: &FederationState,
        agent: usize,
        source: ActionSource,
    ) -> Result<Vec<Trajectory>> {
        let mut rng = state.sampling_stream(agent);
        sample_batch(self.env, self.policy, theta, count, &mut rng, source)
    }

    /// (1/N) Σ g(τ_i|θ)
    fn large_estimate(
        &self,
        theta: &ParamVector,
        state: &FederationState,
        agent: usize,
        source: ActionSource,
    ) -> Result<LocalEstimate> {
        let batch = self.sample(theta, self.algo.large_batch, state, agent, source)?;
        let g = batch_estimate(
            self.policy,
            self.algo.estimator,
            &batch,
            theta,
            self.gamma(),
            &self.algo.baseline,
        )?;
        Ok(LocalEstimate {
            estimate: g.vector,
            mean_return: mean_return(&batch),
            max_weight: None,
        })
    }

    /// `previous + Δ̂^B(θ, θ_prev)` on B fresh trajectories at θ.
    fn small_estimate(
        &self,
        theta: &ParamVector,
        theta_prev: &ParamVector,
        previous: ParamVector,
        state: &FederationState,
        agent: usize,
        source: ActionSource,
    ) -> Result<LocalEstimate> {
        let batch = self.sample(theta, self.algo.small_batch, state, agent, source)?;
        let corr = page_correction(
            self.policy,
            self.algo.estimator,
            &batch,
            theta,
            theta_prev,
            self.gamma(),
            &self.algo.baseline,
        )?;
        let mut v = previous;
        v.add_assign(&corr.estimate.vector);
        Ok(LocalEstimate {
            estimate: v,
            mean_return: mean_return(&batch),
            max_weight: Some(corr.max_weight),
        })
    }

    fn aggregate(&self, inputs: &[ParamVector], state: &FederationState) -> Result<ParamVector> {
        // Common-coin stream: every agent forms the same buckets.
        let mut rng = state.common_stream("bucketing");
        robust_aggregate(inputs, self.aggregator, &mut rng)
    }
}

/// θ̃ = θ + η v (plain) or θ + η·Adam(v).
fn local_update(agent: &mut AgentState, v: &ParamVector, algo: &AlgoConfig) -> ParamVector {
    let mut next = agent.theta.clone();
    match (algo.optimizer, agent.adam.as_mut()) {
        (OptimizerKind::Adam, Some(adam)) => {
            let dir = adam.direction(v, &algo.adam);
            next.axpy(algo.step_size, &dir);
        }
        _ => next.axpy(algo.step_size, v),
    }
    next
}

fn finish_report(
    iteration: usize,
    large: bool,
    trajectories: usize,
    honest_returns: Vec<Option<f64>>,
    max_weight: Option<f64>,
    state: &FederationState,
    byzantine: Vec<usize>,
    applied: Vec<ParamVector>,
) -> IterationReport {
    let sampled: Vec<f64> = honest_returns.iter().flatten().copied().collect();
    let mean_honest_return = if sampled.is_empty() {
        f64::NAN
    } else {
        sampled.iter().sum::<f64>() / sampled.len() as f64
    };
    let honest_diameter = param::diameter(
        state
            .agents
            .iter()
            .enumerate()
            .filter(|(k, _)| !byzantine.contains(k))
            .map(|(_, a)| &a.theta),
    );
    IterationReport {
        iteration,
        large_batch: large,
        trajectories,
        honest_returns,
        mean_honest_return,
        max_importance_weight: max_weight,
        honest_diameter,
        byzantine,
        applied_estimates: applied,
    }
}

fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// One PAGE-PG iteration for a single agent.
pub fn page_pg_iteration(
    setup: &Setup<'_>,
    state: &mut FederationState,
) -> Result<IterationReport> {
    let t = state.round;
    let c = state.coin.bernoulli(setup.algo.switch_prob)?;
    let large = c || t == 0;
    let agent = &state.agents[0];
    let local = if large {
        setup.large_estimate(&agent.theta, state, 0, ActionSource::Policy)?
    } else {
        setup.small_estimate(
            &agent.theta,
            &agent.prev_theta,
            agent.last_estimate.clone(),
            state,
            0,
            ActionSource::Policy,
        )?
    };
    let m = if large {
        setup.algo.large_batch
    } else {
        setup.algo.small_batch
    };
    let agent = &mut state.agents[0];
    let next = local_update(agent, &local.estimate, setup.algo);
    agent.prev_theta = std::mem::replace(&mut agent.theta, next.clone());
    agent.pre_agreement = next;
    agent.last_estimate = local.estimate.clone();
    Ok(finish_report(
        t,
        large,
        m,
        vec![Some(local.mean_return)],
        local.max_weight,
        state,
        Vec::new(),
        vec![local.estimate],
    ))
}

/// One ByzPG iteration (Fed-PAGE-PG when the aggregator is the mean). Agent 0
/// is the trusted server and also acts as a worker.
pub fn byz_pg_iteration(
    setup: &Setup<'_>,
    state: &mut FederationState,
    adversary: &Adversary,
) -> Result<IterationReport> {
    let t = state.round;
    let k_total = state.agent_count();
    let c = state.coin.bernoulli(setup.algo.switch_prob)?;
    let large = c || t == 0;
    let byz = adversary.byzantine_set(t);
    let theta = state.agents[0].theta.clone();
    let mut returns = vec![None; k_total];

    let (v, m, max_weight) = if large {
        let mut payloads: Vec<Option<ParamVector>> = vec![None; k_total];
        for (k, slot) in payloads.iter_mut().enumerate() {
            let is_byz = byz.contains(&k);
            if is_byz && !adversary.needs_own_payload() {
                continue;
            }
            let source = if is_byz {
                adversary.action_source()
            } else {
                ActionSource::Policy
            };
            let local = setup.large_estimate(&theta, state, k, source)?;
            if !is_byz {
                returns[k] = Some(local.mean_return);
            }
            *slot = Some(local.estimate);
        }
        let mailbox = broadcast(adversary, &payloads, &byz, t, Phase::Gradient, &[0])?;
        let v = setup.aggregate(&mailbox[0].vectors(), state)?;
        (v, setup.algo.large_batch, None)
    } else {
        let server = &state.agents[0];
        let local = setup.small_estimate(
            &server.theta,
            &server.prev_theta,
            server.last_estimate.clone(),
            state,
            0,
            ActionSource::Policy,
        )?;
        returns[0] = Some(local.mean_return);
        (local.estimate, setup.algo.small_batch, local.max_weight)
    };

    let server = &mut state.agents[0];
    let next = local_update(server, &v, setup.algo);
    server.prev_theta = std::mem::replace(&mut server.theta, next.clone());
    server.pre_agreement = next;
    server.last_estimate = v.clone();
    // Broadcast θ_{t+1} to the workers.
    let (server, workers) = state.agents.split_first_mut().expect("at least one agent");
    for w in workers {
        w.prev_theta.clone_from(&server.prev_theta);
        w.theta.clone_from(&server.theta);
        w.pre_agreement.clone_from(&server.pre_agreement);
        w.last_estimate.clone_from(&server.last_estimate);
    }
    Ok(finish_report(
        t,
        large,
        m,
        returns,
        max_weight,
        state,
        byz,
        vec![v],
    ))
}

/// One DecByzPG iteration (Dec-PAGE-PG with mean aggregation and no agreement).
pub fn dec_byz_pg_iteration(
    setup: &Setup<'_>,
    state: &mut FederationState,
    adversary: &Adversary,
) -> Result<IterationReport> {
    let t = state.round;
    let k_total = state.agent_count();
    let c = state.coin.bernoulli(setup.algo.switch_prob)?;
    let large = c || t == 0;
    let byz = adversary.byzantine_set(t);
    let m = if large {
        setup.algo.large_batch
    } else {
        setup.algo.small_batch
    };

    let mut payloads: Vec<Option<ParamVector>> = vec![None; k_total];
    let mut returns = vec![None; k_total];
    let mut max_weight = None;
    for k in 0..k_total {
        let is_byz = byz.contains(&k);
        if is_byz && !adversary.needs_own_payload() {
            continue;
        }
        let source = if is_byz {
            adversary.action_source()
        } else {
            ActionSource::Policy
        };
        let agent = &state.agents[k];
        let local = if large {
            setup.large_estimate(&agent.theta, state, k, source)?
        } else {
            let realized = realized_estimate(agent, setup.algo.step_size);
            setup.small_estimate(&agent.theta, &agent.prev_theta, realized, state, k, source)?
        };
        if !is_byz {
            returns[k] = Some(local.mean_return);
            max_weight = max_opt(max_weight, local.max_weight);
        }
        payloads[k] = Some(local.estimate);
    }

    let recipients: Vec<usize> = (0..k_total).collect();
    let mailboxes = broadcast(adversary, &payloads, &byz, t, Phase::Gradient, &recipients)?;
    let mut tilde = Vec::with_capacity(k_total);
    let mut applied = Vec::with_capacity(k_total);
    for (k, mb) in mailboxes.iter().enumerate() {
        let v = setup.aggregate(&mb.vectors(), state)?;
        tilde.push(local_update(&mut state.agents[k], &v, setup.algo));
        applied.push(v);
    }
    let agreed = run_agreement(&tilde, adversary, &byz, t, setup.agreement)?;
    for (k, ((agent, next), v)) in state
        .agents
        .iter_mut()
        .zip(agreed)
        .zip(&applied)
        .enumerate()
    {
        agent.prev_theta = std::mem::replace(&mut agent.theta, next);
        agent.pre_agreement.clone_from(&tilde[k]);
        agent.last_estimate.clone_from(v);
    }
    Ok(finish_report(
        t, large, m, returns, max_weight, state, byz, applied,
    ))
}

/// Fed-PAGE-PG / Dec-PAGE-PG: the corresponding Byzantine-tolerant loop with
/// plain averaging and no agreement.
pub fn naive_iteration(
    setup: &Setup<'_>,
    state: &mut FederationState,
    adversary: &Adversary,
) -> Result<IterationReport> {
    let mean = AggregatorConfig::mean();
    let none = AgreementConfig::none();
    let naive = Setup {
        env: setup.env,
        policy: setup.policy,
        algo: setup.algo,
        aggregator: &mean,
        agreement: &none,
    };
    if setup.algo.algorithm.is_decentralized() {
        dec_byz_pg_iteration(&naive, state, adversary)
    } else {
        byz_pg_iteration(&naive, state, adversary)
    }
}

impl RoundPlan for Setup<'_> {
    type Report = IterationReport;

    fn execute(
        &mut self,
        state: &mut FederationState,
        adversary: &Adversary,
    ) -> Result<IterationReport> {
        match self.algo.algorithm {
            AlgorithmKind::PagePg => page_pg_iteration(self, state),
            AlgorithmKind::ByzPg => byz_pg_iteration(self, state, adversary),
            AlgorithmKind::DecByzPg => dec_byz_pg_iteration(self, state, adversary),
            AlgorithmKind::FedPagePg | AlgorithmKind::DecPagePg => {
                naive_iteration(self, state, adversary)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedOutput {
    /// T̂, common to all agents.
    pub round: usize,
    /// θ_{T̂}^{(k)} for every honest agent, by agent id.
    pub selected: Vec<(usize, ParamVector)>,
    /// θ_T^{(k)} for every honest agent.
    pub last: Vec<(usize, ParamVector)>,
}

/// A complete training run: configuration, adversary, federation state and
/// the retained per-iteration checkpoints.
pub struct Trainer {
    env: Arc<dyn Environment>,
    policy: SoftmaxPolicy,
    algo: AlgoConfig,
    aggregator: AggregatorConfig,
    agreement: AgreementConfig,
    adversary: Adversary,
    state: FederationState,
    checkpoints: Option<Vec<Vec<ParamVector>>>,
    trajectories_per_agent: u64,
}

impl Trainer {
    pub fn new(
        env: Arc<dyn Environment>,
        policy: SoftmaxPolicy,
        algo: AlgoConfig,
        aggregator: AggregatorConfig,
        agreement: AgreementConfig,
        adversary: AdversaryConfig,
        root_seed: u64,
    ) -> Result<Self> {
        algo.validate()?;
        aggregator.validate()?;
        agreement.validate()?;
        let spec = env.spec();
        if policy.spec().input_dim != spec.state_dim || policy.action_count() != spec.action_count {
            return Err(Error::config(format!(
                "policy shape ({} inputs, {} actions) does not match the environment ({} , {})",
                policy.spec().input_dim,
                policy.action_count(),
                spec.state_dim,
                spec.action_count
            )));
        }
        if algo.algorithm.is_naive() {
            if aggregator.kind != AggregatorKind::Mean {
                return Err(Error::config(format!(
                    "{:?} aggregates by plain averaging",
                    algo.algorithm
                )));
            }
            if agreement.kind != AgreementKind::None && agreement.rounds > 0 {
                return Err(Error::config(format!(
                    "{:?} runs no agreement",
                    algo.algorithm
                )));
            }
        }
        if !algo.algorithm.is_decentralized()
            && agreement.kind != AgreementKind::None
            && agreement.rounds > 0
        {
            return Err(Error::config("centralized algorithms do not run agreement"));
        }
        let k = algo.agents;
        let eligible: Vec<usize> = if algo.algorithm.is_decentralized() {
            (0..k).collect()
        } else {
            (1..k).collect()
        };
        let adversary = Adversary::new(
            adversary,
            k,
            eligible,
            algo.algorithm.alpha_max(),
            root_seed,
        )?;
        let theta0 = policy.init_params(&mut stream(root_seed, COMMON_AGENT, "init", 0));
        let state =
            FederationState::new(k, theta0, root_seed, algo.optimizer == OptimizerKind::Adam)?;
        Ok(Trainer {
            env,
            policy,
            algo,
            aggregator,
            agreement,
            adversary,
            state,
            checkpoints: Some(Vec::new()),
            trajectories_per_agent: 0,
        })
    }

    /// Replace the built-in attack with a custom strategy.
    pub fn set_strategy(&mut self, strategy: Arc<dyn ByzantineStrategy>) {
        self.adversary = self.adversary.clone().with_strategy(strategy);
    }

    /// Stop keeping θ_t for every iteration (saves memory on long runs).
    pub fn discard_checkpoints(&mut self) {
        self.checkpoints = None;
    }

    pub fn state(&self) -> &FederationState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut FederationState {
        &mut self.state
    }

    pub fn policy(&self) -> &SoftmaxPolicy {
        &self.policy
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn algo(&self) -> &AlgoConfig {
        &self.algo
    }

    pub fn adversary(&self) -> &Adversary {
        &self.adversary
    }

    pub fn trajectories_per_agent(&self) -> u64 {
        self.trajectories_per_agent
    }

    pub fn honest_agents(&self, round: usize) -> Vec<usize> {
        let byz = self.adversary.byzantine_set(round);
        (0..self.algo.agents).filter(|k| !byz.contains(k)).collect()
    }

    pub fn step(&mut self) -> Result<IterationReport> {
        if let Some(cp) = self.checkpoints.as_mut() {
            cp.push(self.state.agents.iter().map(|a| a.theta.clone()).collect());
        }
        let mut setup = Setup {
            env: self.env.as_ref(),
            policy: &self.policy,
            algo: &self.algo,
            aggregator: &self.aggregator,
            agreement: &self.agreement,
        };
        let report = run_round(&mut self.state, &mut setup, &self.adversary)?;
        self.trajectories_per_agent += report.trajectories as u64;
        Ok(report)
    }

    /// Run the configured number of iterations, handing each report to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&IterationReport)) -> Result<()> {
        for _ in 0..self.algo.iterations {
            let report = self.step()?;
            sink(&report);
        }
        Ok(())
    }

    /// θ_{T̂} with T̂ drawn from the common coin over the iterations run so far.
    pub fn select_output(&mut self) -> Result<SelectedOutput> {
        let checkpoints = self
            .checkpoints
            .as_ref()
            .ok_or_else(|| Error::Unsupported("checkpoints were discarded".into()))?;
        let t = checkpoints.len();
        let round = self.state.coin.uniform_round(t)?;
        let honest = self.honest_agents(self.state.round.saturating_sub(1));
        Ok(SelectedOutput {
            round,
            selected: honest
                .iter()
                .map(|&k| (k, checkpoints[round][k].clone()))
                .collect(),
            last: honest
                .iter()
                .map(|&k| (k, self.state.agents[k].theta.clone()))
                .collect(),
        })
    }
}

/// Fraction of the given parameter vectors with ‖∇J(θ)‖ ≤ ε, using exact
/// gradients. Only enumerable environments are supported.
pub fn evaluate_stationarity(
    env: &dyn Environment,
    policy: &SoftmaxPolicy,
    thetas: &[ParamVector],
    epsilon: f64,
) -> Result<f64> {
    let oracle = env
        .as_enumerable()
        .ok_or_else(|| Error::Unsupported("stationarity needs an enumerable environment".into()))?;
    if thetas.is_empty() {
        return Err(Error::config("no parameters to evaluate"));
    }
    let mut ok = 0usize;
    for theta in thetas {
        if oracle.exact_gradient(policy, theta)?.norm() <= epsilon {
            ok += 1;
        }
    }
    Ok(ok as f64 / thetas.len() as f64)
}
