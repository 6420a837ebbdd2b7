use std::sync::Arc;

use fedpg_core::adversary::{Adversary, AdversaryConfig, AttackKind};
use fedpg_core::agreement::{AgreementConfig, AgreementKind};
use fedpg_core::algorithms::{
    evaluate_stationarity, AlgoConfig, AlgorithmKind, OptimizerKind, Trainer,
};
use fedpg_core::env::{CartPole, ChainOracle, ChainOracleSpec, Environment};
use fedpg_core::error::Error;
use fedpg_core::estimators::{BaselineConfig, EstimatorKind};
use fedpg_core::param::ParamVector;
use fedpg_core::policy::{HiddenActivation, OutputActivation, PolicySpec, SoftmaxPolicy};
use fedpg_core::robust_agg::{AggregatorConfig, AggregatorKind};
use fedpg_core::runtime::{run_round, AdamParams, FederationState, RoundPlan};

fn algo(kind: AlgorithmKind, agents: usize, optimizer: OptimizerKind) -> AlgoConfig {
    AlgoConfig {
        algorithm: kind,
        agents,
        large_batch: 10,
        small_batch: 3,
        switch_prob: 0.3,
        step_size: 5e-3,
        iterations: 50,
        optimizer,
        adam: AdamParams::default(),
        estimator: EstimatorKind::Gpomdp,
        baseline: BaselineConfig::Zero,
    }
}

fn cartpole() -> (Arc<dyn Environment>, SoftmaxPolicy) {
    let env: Arc<dyn Environment> = Arc::new(CartPole::new(60, 0.99).unwrap());
    let policy = SoftmaxPolicy::new(PolicySpec::mlp(
        4,
        vec![8, 8],
        2,
        HiddenActivation::Relu,
        OutputActivation::Tanh,
    ))
    .unwrap();
    (env, policy)
}

fn chain() -> (Arc<dyn Environment>, SoftmaxPolicy) {
    let env: Arc<dyn Environment> =
        Arc::new(ChainOracle::new(ChainOracleSpec::slippery_chain(3, 2, 3, 0.9)).unwrap());
    (env, SoftmaxPolicy::linear(3, 2).unwrap())
}

fn trace(kind: AlgorithmKind, optimizer: OptimizerKind, seed: u64) -> Vec<Vec<u64>> {
    let (env, policy) = cartpole();
    let (agg, agr) = match kind {
        AlgorithmKind::DecByzPg => (
            AggregatorConfig::new(AggregatorKind::BucketedRfa, 0.0, 0.25),
            AgreementConfig::new(AgreementKind::Mda, 2, 0.1),
        ),
        AlgorithmKind::ByzPg => (
            AggregatorConfig::new(AggregatorKind::BucketedRfa, 0.0, 0.5),
            AgreementConfig::none(),
        ),
        _ => (AggregatorConfig::mean(), AgreementConfig::none()),
    };
    let mut t = Trainer::new(
        env,
        policy,
        algo(kind, 1, optimizer),
        agg,
        agr,
        AdversaryConfig::default(),
        seed,
    )
    .unwrap();
    let mut out = vec![t.state().agents[0]
        .theta
        .iter()
        .map(|x| x.to_bits())
        .collect()];
    for _ in 0..50 {
        t.step().unwrap();
        out.push(
            t.state().agents[0]
                .theta
                .iter()
                .map(|x| x.to_bits())
                .collect(),
        );
    }
    out
}

#[test]
fn single_agent_reductions_are_bit_identical() {
    for optimizer in [OptimizerKind::PlainAscent, OptimizerKind::Adam] {
        let reference = trace(AlgorithmKind::PagePg, optimizer, 31);
        assert_eq!(trace(AlgorithmKind::ByzPg, optimizer, 31), reference);
        assert_eq!(trace(AlgorithmKind::DecByzPg, optimizer, 31), reference);
        assert_eq!(trace(AlgorithmKind::FedPagePg, optimizer, 31), reference);
        assert_eq!(trace(AlgorithmKind::DecPagePg, optimizer, 31), reference);
    }
}

#[test]
fn branch_accounting_matches_expectation() {
    let (env, policy) = chain();
    let mut cfg = algo(AlgorithmKind::PagePg, 1, OptimizerKind::PlainAscent);
    cfg.large_batch = 50;
    cfg.small_batch = 4;
    cfg.switch_prob = 0.2;
    cfg.iterations = 2000;
    let mut t = Trainer::new(
        env,
        policy,
        cfg,
        AggregatorConfig::mean(),
        AgreementConfig::none(),
        AdversaryConfig::default(),
        77,
    )
    .unwrap();
    let (mut large, mut small) = (0u64, 0u64);
    t.run(|r| {
        if r.large_batch {
            large += 1;
            assert_eq!(r.trajectories, 50);
        } else {
            small += 1;
            assert_eq!(r.trajectories, 4);
        }
        if r.iteration == 0 {
            assert!(r.large_batch);
        }
    })
    .unwrap();
    assert_eq!(t.trajectories_per_agent(), 50 * large + 4 * small);
    let expected = 2000.0 * (0.2 * 50.0 + 0.8 * 4.0);
    let se = (2000.0f64 * 0.2 * 0.8).sqrt() * 46.0;
    assert!((t.trajectories_per_agent() as f64 - expected).abs() <= 3.0 * se);
}

#[test]
fn runs_are_deterministic() {
    let run = || {
        let (env, policy) = chain();
        let cfg = algo(AlgorithmKind::DecByzPg, 5, OptimizerKind::Adam);
        let adv = AdversaryConfig {
            attack: AttackKind::LargeNoise,
            byzantine_count: 1,
            ..Default::default()
        };
        let mut t = Trainer::new(
            env,
            policy,
            cfg,
            AggregatorConfig::new(AggregatorKind::BucketedRfa, 0.2, 0.25),
            AgreementConfig::new(AgreementKind::Mda, 2, 0.22),
            adv,
            5,
        )
        .unwrap();
        let mut returns = Vec::new();
        t.run(|r| returns.push(r.mean_honest_return)).unwrap();
        (
            returns,
            t.state()
                .agents
                .iter()
                .map(|a| a.theta.clone())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn centralized_workers_follow_the_server() {
    let (env, policy) = chain();
    let cfg = algo(AlgorithmKind::ByzPg, 4, OptimizerKind::PlainAscent);
    let adv = AdversaryConfig {
        attack: AttackKind::AvgZero,
        byzantine_count: 1,
        ..Default::default()
    };
    let mut t = Trainer::new(
        env,
        policy,
        cfg,
        AggregatorConfig::new(AggregatorKind::Krum, 0.25, 0.5),
        AgreementConfig::none(),
        adv,
        3,
    )
    .unwrap();
    assert!(!t.adversary().byzantine_set(0).contains(&0));
    for _ in 0..20 {
        let r = t.step().unwrap();
        let theta0 = &t.state().agents[0].theta;
        assert!(t.state().agents.iter().all(|a| &a.theta == theta0));
        if !r.large_batch {
            assert_eq!(r.honest_returns.iter().flatten().count(), 1);
        }
    }
}

#[test]
fn decentralized_agents_contract_without_attack() {
    let (env, policy) = chain();
    let cfg = algo(AlgorithmKind::DecByzPg, 5, OptimizerKind::PlainAscent);
    let mut t = Trainer::new(
        env,
        policy,
        cfg,
        AggregatorConfig::new(AggregatorKind::BucketedRfa, 0.0, 0.25),
        AgreementConfig::new(AgreementKind::Mda, 4, 0.1),
        AdversaryConfig::default(),
        8,
    )
    .unwrap();
    for _ in 0..30 {
        let r = t.step().unwrap();
        assert!(r.honest_diameter < 1e-3, "{}", r.honest_diameter);
    }
}

#[test]
fn output_selection_uses_checkpoints() {
    let (env, policy) = chain();
    let cfg = algo(AlgorithmKind::DecPagePg, 3, OptimizerKind::PlainAscent);
    let mut t = Trainer::new(
        env,
        policy,
        cfg,
        AggregatorConfig::mean(),
        AgreementConfig::none(),
        AdversaryConfig::default(),
        1,
    )
    .unwrap();
    let mut seen: Vec<Vec<ParamVector>> = Vec::new();
    for _ in 0..12 {
        seen.push(t.state().agents.iter().map(|a| a.theta.clone()).collect());
        t.step().unwrap();
    }
    let out = t.select_output().unwrap();
    assert!(out.round < 12);
    for (k, theta) in &out.selected {
        assert_eq!(theta, &seen[out.round][*k]);
    }
    for (k, theta) in &out.last {
        assert_eq!(theta, &t.state().agents[*k].theta);
    }
}

#[test]
fn stationarity_requires_an_enumerable_environment() {
    let (env, policy) = cartpole();
    let theta = ParamVector::zeros(policy.param_count());
    assert!(matches!(
        evaluate_stationarity(env.as_ref(), &policy, &[theta], 1.0),
        Err(Error::Unsupported(_))
    ));
    let (env, policy) = chain();
    let theta = ParamVector::zeros(policy.param_count());
    assert_eq!(
        evaluate_stationarity(env.as_ref(), &policy, &[theta.clone()], 1e6).unwrap(),
        1.0
    );
    assert_eq!(
        evaluate_stationarity(env.as_ref(), &policy, &[theta], 0.0).unwrap(),
        0.0
    );
}

#[test]
fn inconsistent_configurations_are_rejected() {
    let (env, policy) = chain();
    let robust = AggregatorConfig::new(AggregatorKind::Krum, 0.1, 0.5);
    let mk =
        |cfg: AlgoConfig, agg: AggregatorConfig, agr: AgreementConfig, adv: AdversaryConfig| {
            Trainer::new(env.clone(), policy.clone(), cfg, agg, agr, adv, 0)
        };
    assert!(mk(
        algo(AlgorithmKind::PagePg, 2, OptimizerKind::Adam),
        AggregatorConfig::mean(),
        AgreementConfig::none(),
        AdversaryConfig::default()
    )
    .is_err());
    assert!(mk(
        algo(AlgorithmKind::FedPagePg, 3, OptimizerKind::Adam),
        robust.clone(),
        AgreementConfig::none(),
        AdversaryConfig::default()
    )
    .is_err());
    assert!(mk(
        algo(AlgorithmKind::ByzPg, 3, OptimizerKind::Adam),
        robust.clone(),
        AgreementConfig::new(AgreementKind::Mda, 1, 0.1),
        AdversaryConfig::default()
    )
    .is_err());
    let mut bad = algo(AlgorithmKind::ByzPg, 3, OptimizerKind::Adam);
    bad.small_batch = 20;
    assert!(mk(
        bad,
        robust,
        AgreementConfig::none(),
        AdversaryConfig::default()
    )
    .is_err());
    let adv = AdversaryConfig {
        byzantine_count: 7,
        ..Default::default()
    };
    assert!(mk(
        algo(AlgorithmKind::DecByzPg, 13, OptimizerKind::Adam),
        AggregatorConfig::new(AggregatorKind::BucketedRfa, 0.2, 0.25),
        AgreementConfig::new(AgreementKind::Mda, 2, 0.22),
        adv
    )
    .is_err());
}

struct Diverge;

impl RoundPlan for Diverge {
    type Report = ();
    fn execute(&mut self, state: &mut FederationState, _: &Adversary) -> fedpg_core::Result<()> {
        state.agents[1].theta[0] = f64::NAN;
        Ok(())
    }
}

#[test]
fn non_finite_parameters_abort_the_round() {
    let mut state = FederationState::new(3, ParamVector::zeros(2), 0, false).unwrap();
    let err = run_round(&mut state, &mut Diverge, &Adversary::honest(3)).unwrap_err();
    assert!(matches!(err, Error::NonFinite(msg) if msg.contains("agent 1")));
}

#[test]
fn realized_estimate_is_the_applied_step() {
    use fedpg_core::algorithms::realized_estimate;
    use fedpg_core::runtime::AgentState;
    let eta = 0.05;
    let prev = ParamVector::from_vec(vec![0.2, -0.4, 1.0]);
    let v = ParamVector::from_vec(vec![1.0, 3.0, -2.0]);
    let mut agent = AgentState::new(prev.clone(), false);
    agent.prev_theta = prev.clone();
    agent.last_estimate = v.clone();
    agent.pre_agreement = prev.add(&v.scaled(eta));
    // Agreement moved the agent elsewhere.
    agent.theta = ParamVector::from_vec(vec![0.31, -0.2, 0.85]);
    let realized = realized_estimate(&agent, eta);
    let literal = agent.theta.sub(&prev).scaled(1.0 / eta);
    assert!(realized.dist(&literal) < 1e-12);
    // Without agreement the stored estimate comes back unchanged.
    agent.theta = agent.pre_agreement.clone();
    assert_eq!(realized_estimate(&agent, eta), v);
}

fn dec_trainer(
    kind: AlgorithmKind,
    agents: usize,
    agg: AggregatorConfig,
    agr: AgreementConfig,
    adv: AdversaryConfig,
    seed: u64,
) -> Trainer {
    let (env, policy) = chain();
    Trainer::new(
        env,
        policy,
        algo(kind, agents, OptimizerKind::PlainAscent),
        agg,
        agr,
        adv,
        seed,
    )
    .unwrap()
}

#[test]
fn switch_probability_one_always_takes_the_large_branch() {
    let (env, policy) = chain();
    let mut cfg = algo(AlgorithmKind::ByzPg, 3, OptimizerKind::PlainAscent);
    cfg.switch_prob = 1.0;
    let mut t = Trainer::new(
        env,
        policy,
        cfg,
        AggregatorConfig::new(AggregatorKind::Rfa, 0.0, 0.5),
        AgreementConfig::none(),
        AdversaryConfig::default(),
        2,
    )
    .unwrap();
    t.run(|r| {
        assert!(r.large_batch);
        assert!(r.max_importance_weight.is_none());
    })
    .unwrap();
}

#[test]
fn byz_pg_improves_the_exact_objective() {
    let mut improved = 0;
    for seed in 0..10 {
        let (env, policy) = chain();
        let mut cfg = algo(AlgorithmKind::ByzPg, 4, OptimizerKind::PlainAscent);
        cfg.step_size = 0.05;
        cfg.iterations = 200;
        let mut t = Trainer::new(
            env.clone(),
            policy.clone(),
            cfg,
            AggregatorConfig::new(AggregatorKind::BucketedKrum, 0.0, 0.5),
            AgreementConfig::none(),
            AdversaryConfig::default(),
            seed,
        )
        .unwrap();
        let oracle = env.as_enumerable().unwrap();
        let before = oracle
            .exact_objective(&policy, &t.state().agents[0].theta)
            .unwrap();
        t.run(|_| {}).unwrap();
        let after = oracle
            .exact_objective(&policy, &t.state().agents[0].theta)
            .unwrap();
        if after > before {
            improved += 1;
        }
    }
    assert!(improved >= 9, "{improved}/10");
}

#[test]
fn identical_sampling_keeps_agents_identical() {
    let mut t = dec_trainer(
        AlgorithmKind::DecByzPg,
        4,
        AggregatorConfig::new(AggregatorKind::BucketedRfa, 0.0, 0.25),
        AgreementConfig::new(AgreementKind::Mda, 2, 0.1),
        AdversaryConfig::default(),
        9,
    );
    t.state_mut().shared_sampling = true;
    for _ in 0..30 {
        t.step().unwrap();
        let first = &t.state().agents[0];
        assert!(t
            .state()
            .agents
            .iter()
            .all(|a| a.theta == first.theta && a.pre_agreement == a.theta));
    }
}

#[test]
fn stationary_small_branch_cancels() {
    let mut t = dec_trainer(
        AlgorithmKind::DecPagePg,
        3,
        AggregatorConfig::mean(),
        AgreementConfig::none(),
        AdversaryConfig::default(),
        4,
    );
    t.step().unwrap();
    // Freeze every agent: θ_t = θ_{t−1} = θ̃_t and no stored estimate.
    for a in &mut t.state_mut().agents {
        a.prev_theta = a.theta.clone();
        a.pre_agreement = a.theta.clone();
        a.last_estimate = ParamVector::zeros(a.theta.len());
    }
    loop {
        let before: Vec<ParamVector> = t.state().agents.iter().map(|a| a.theta.clone()).collect();
        let r = t.step().unwrap();
        if r.large_batch {
            break;
        }
        for v in &r.applied_estimates {
            assert!(v.iter().all(|x| *x == 0.0));
        }
        let after: Vec<ParamVector> = t.state().agents.iter().map(|a| a.theta.clone()).collect();
        assert_eq!(before, after);
    }
}

#[test]
fn plain_ascent_step_is_eta_times_estimate() {
    let (env, policy) = chain();
    let mut cfg = algo(AlgorithmKind::PagePg, 1, OptimizerKind::PlainAscent);
    cfg.step_size = 0.1;
    let mut t = Trainer::new(
        env,
        policy,
        cfg,
        AggregatorConfig::mean(),
        AgreementConfig::none(),
        AdversaryConfig::default(),
        6,
    )
    .unwrap();
    for _ in 0..40 {
        let before = t.state().agents[0].theta.clone();
        let r = t.step().unwrap();
        let step = t.state().agents[0].theta.sub(&before);
        let expected = r.applied_estimates[0].scaled(0.1);
        for (a, b) in step.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * (before.norm() + b.abs() + 1.0));
        }
    }
}

#[test]
fn naive_matches_mean_without_agreement() {
    let run = |kind| {
        let mut t = dec_trainer(
            kind,
            4,
            AggregatorConfig::mean(),
            AgreementConfig::none(),
            AdversaryConfig::default(),
            12,
        );
        t.run(|_| {}).unwrap();
        t.state()
            .agents
            .iter()
            .map(|a| a.theta.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(AlgorithmKind::DecPagePg), run(AlgorithmKind::DecByzPg));
}

#[test]
fn avg_zero_nullifies_naive_large_batch_updates() {
    let adv = AdversaryConfig {
        attack: AttackKind::AvgZero,
        byzantine_count: 2,
        ..Default::default()
    };
    let mut t = dec_trainer(
        AlgorithmKind::DecPagePg,
        9,
        AggregatorConfig::mean(),
        AgreementConfig::none(),
        adv,
        1,
    );
    for _ in 0..20 {
        let r = t.step().unwrap();
        if r.large_batch {
            for (k, v) in r.applied_estimates.iter().enumerate() {
                if !r.byzantine.contains(&k) {
                    assert!(v.norm() < 1e-12, "{}", v.norm());
                }
            }
        }
    }
}
