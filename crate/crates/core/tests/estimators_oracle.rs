use fedpg_core::env::{
    sample_batch, sample_trajectory, ActionSource, ChainOracle, ChainOracleSpec, Environment, Step,
    Trajectory,
};
use fedpg_core::estimators::{
    batch_estimate, estimator_norm_bound, importance_weight, page_correction, single_estimate,
    weighted_estimate, BaselineConfig, EstimatorKind,
};
use fedpg_core::param::ParamVector;
use fedpg_core::policy::SoftmaxPolicy;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn chain() -> (ChainOracle, SoftmaxPolicy) {
    let oracle = ChainOracle::new(ChainOracleSpec::slippery_chain(3, 2, 3, 0.9)).unwrap();
    let policy = SoftmaxPolicy::linear(3, 2).unwrap();
    (oracle, policy)
}

fn theta_from(values: &[f64]) -> ParamVector {
    ParamVector::from_vec(values.to_vec())
}

/// Independent brute force: every (s_0, a_0, ..., s_{H-1}, a_{H-1}) path with
/// its probability, discounted return and summed score.
fn brute_force(
    oracle: &ChainOracle,
    policy: &SoftmaxPolicy,
    theta: &ParamVector,
) -> (f64, ParamVector) {
    let spec = oracle.oracle_spec().clone();
    let mut objective = 0.0;
    let mut gradient = ParamVector::zeros(policy.param_count());
    let mut stack: Vec<(usize, usize, f64, f64, ParamVector)> = Vec::new();
    for (s0, &p0) in spec.initial.iter().enumerate() {
        if p0 > 0.0 {
            stack.push((0, s0, p0, 0.0, ParamVector::zeros(policy.param_count())));
        }
    }
    while let Some((h, s, prob, ret, score)) = stack.pop() {
        if h == spec.horizon {
            objective += prob * ret;
            gradient.axpy(prob * ret, &score);
            continue;
        }
        let feat = oracle.features(s).to_vec();
        let lp = policy.action_log_probs(theta, &feat).unwrap();
        for a in 0..spec.n_actions {
            let mut sc = score.clone();
            sc.add_assign(&policy.log_prob_gradient(theta, &feat, a).unwrap());
            let r = ret + spec.gamma.powi(h as i32) * spec.rewards[s][a];
            for (s2, &pt) in spec.transitions[s][a].iter().enumerate() {
                if pt > 0.0 {
                    stack.push((h + 1, s2, prob * lp[a].exp() * pt, r, sc.clone()));
                }
            }
        }
    }
    (objective, gradient)
}

#[test]
fn enumeration_matches_brute_force() {
    let (oracle, policy) = chain();
    let theta = theta_from(&[0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.05, -0.1]);
    let (j, g) = brute_force(&oracle, &policy, &theta);
    assert!((oracle.exact_objective(&policy, &theta).unwrap() - j).abs() < 1e-12);
    assert!(oracle.exact_gradient(&policy, &theta).unwrap().dist(&g) < 1e-12);
}

#[test]
fn exact_gradient_matches_finite_differences_of_objective() {
    let (oracle, policy) = chain();
    let theta = theta_from(&[0.7, -0.1, 0.2, -0.6, 0.4, 0.0, 0.3, -0.3]);
    let g = oracle.exact_gradient(&policy, &theta).unwrap();
    for i in 0..theta.len() {
        let mut p = theta.clone();
        p[i] += 1e-6;
        let mut m = theta.clone();
        m[i] -= 1e-6;
        let fd = (oracle.exact_objective(&policy, &p).unwrap()
            - oracle.exact_objective(&policy, &m).unwrap())
            / 2e-6;
        assert!((fd - g[i]).abs() < 1e-7, "component {i}: {fd} vs {}", g[i]);
    }
}

#[test]
fn state_marginals_are_distributions_and_match_sampling() {
    let (oracle, policy) = chain();
    let theta = theta_from(&[0.5, -0.5, 0.2, 0.1, -0.3, 0.4, 0.0, 0.0]);
    let marginals = oracle.state_marginals(&policy, &theta).unwrap();
    for row in &marginals {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 40_000;
    let mut counts = vec![vec![0usize; 3]; 3];
    for _ in 0..n {
        let tau =
            sample_trajectory(&oracle, &policy, &theta, &mut rng, ActionSource::Policy).unwrap();
        for (h, step) in tau.steps.iter().enumerate() {
            let s = step.state.iter().position(|x| *x == 1.0).unwrap();
            counts[h][s] += 1;
        }
    }
    for h in 0..3 {
        for s in 0..3 {
            let p = marginals[h][s];
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let phat = counts[h][s] as f64 / n as f64;
            assert!(
                (phat - p).abs() <= 4.0 * se + 1e-12,
                "h={h} s={s}: {phat} vs {p}"
            );
        }
    }
}

/// Componentwise mean and standard error of a Monte-Carlo sample stream.
struct Moments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    n: usize,
}

impl Moments {
    fn new(d: usize) -> Self {
        Moments {
            sum: vec![0.0; d],
            sum_sq: vec![0.0; d],
            n: 0,
        }
    }

    fn push(&mut self, v: &ParamVector) {
        for (i, x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sum_sq[i] += x * x;
        }
        self.n += 1;
    }

    fn assert_matches(&self, exact: &ParamVector, label: &str) {
        let n = self.n as f64;
        for i in 0..exact.len() {
            let mean = self.sum[i] / n;
            let var = (self.sum_sq[i] / n - mean * mean).max(0.0) * n / (n - 1.0);
            let se = (var / n).sqrt();
            assert!(
                (mean - exact[i]).abs() <= 3.0 * se + 1e-12,
                "{label}[{i}]: mc {mean} exact {} se {se}",
                exact[i]
            );
        }
    }
}

#[test]
fn estimators_are_unbiased_on_the_chain() {
    let (oracle, policy) = chain();
    let gamma = oracle.spec().gamma;
    let theta_a = theta_from(&[0.2, -0.3, 0.1, 0.4, -0.2, 0.3, 0.1, -0.1]);
    let theta_b = theta_from(&[0.35, -0.1, 0.0, 0.25, -0.05, 0.4, 0.0, 0.05]);
    assert!(theta_a.dist(&theta_b) <= 0.5);
    let grad_a = oracle.exact_gradient(&policy, &theta_a).unwrap();
    let grad_b = oracle.exact_gradient(&policy, &theta_b).unwrap();
    let d = policy.param_count();
    let base = BaselineConfig::Constant(0.4);
    let (mut reinf, mut gpomdp, mut weighted, mut corr) = (
        Moments::new(d),
        Moments::new(d),
        Moments::new(d),
        Moments::new(d),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50_000 {
        let tau_a =
            sample_trajectory(&oracle, &policy, &theta_a, &mut rng, ActionSource::Policy).unwrap();
        reinf.push(
            &single_estimate(
                &policy,
                EstimatorKind::Reinforce,
                &tau_a,
                &theta_a,
                gamma,
                &base,
            )
            .unwrap()
            .vector,
        );
        gpomdp.push(
            &single_estimate(
                &policy,
                EstimatorKind::Gpomdp,
                &tau_a,
                &theta_a,
                gamma,
                &base,
            )
            .unwrap()
            .vector,
        );
        // Sampled at θ_b, reweighted towards θ_a.
        let tau_b =
            sample_trajectory(&oracle, &policy, &theta_b, &mut rng, ActionSource::Policy).unwrap();
        let (w, _) = weighted_estimate(
            &policy,
            EstimatorKind::Gpomdp,
            &tau_b,
            &theta_a,
            &theta_b,
            gamma,
            &base,
        )
        .unwrap();
        weighted.push(&w);
        let c = page_correction(
            &policy,
            EstimatorKind::Gpomdp,
            std::slice::from_ref(&tau_b),
            &theta_b,
            &theta_a,
            gamma,
            &base,
        )
        .unwrap();
        corr.push(&c.estimate.vector);
    }
    reinf.assert_matches(&grad_a, "reinforce");
    gpomdp.assert_matches(&grad_a, "gpomdp");
    weighted.assert_matches(&grad_a, "weighted gpomdp");
    corr.assert_matches(&grad_b.sub(&grad_a), "page correction");
}

#[test]
fn importance_weight_has_unit_mean() {
    let (oracle, policy) = chain();
    let theta_a = theta_from(&[0.4, -0.3, 0.0, 0.1, 0.2, -0.2, 0.0, 0.1]);
    let theta_b = theta_from(&[0.1, 0.0, 0.2, 0.3, 0.0, -0.1, 0.2, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 40_000;
    let ws: Vec<f64> = (0..n)
        .map(|_| {
            let tau = sample_trajectory(&oracle, &policy, &theta_b, &mut rng, ActionSource::Policy)
                .unwrap();
            importance_weight(&policy, &tau, &theta_a, &theta_b).unwrap()
        })
        .collect();
    let mean = ws.iter().sum::<f64>() / n as f64;
    let var = ws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - 1.0).abs() <= 3.0 * (var / n as f64).sqrt());
}

#[test]
fn correction_vanishes_at_equal_parameters() {
    let (oracle, policy) = chain();
    let theta = theta_from(&[0.1, 0.2, 0.3, -0.1, -0.2, -0.3, 0.0, 0.5]);
    let batch = sample_batch(
        &oracle,
        &policy,
        &theta,
        7,
        &mut ChaCha8Rng::seed_from_u64(1),
        ActionSource::Policy,
    )
    .unwrap();
    let c = page_correction(
        &policy,
        EstimatorKind::Gpomdp,
        &batch,
        &theta,
        &theta,
        0.9,
        &BaselineConfig::Zero,
    )
    .unwrap();
    assert!(c.estimate.vector.iter().all(|x| *x == 0.0));
    assert_eq!(c.max_weight, 1.0);
}

#[test]
fn reinforce_and_gpomdp_agree_at_horizon_one() {
    let oracle = ChainOracle::new(ChainOracleSpec::slippery_chain(3, 2, 1, 0.9)).unwrap();
    let policy = SoftmaxPolicy::linear(3, 2).unwrap();
    let theta = theta_from(&[0.3, 0.1, -0.2, 0.0, 0.4, -0.4, 0.1, 0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = BaselineConfig::PerStepConstant(vec![0.2]);
    for _ in 0..20 {
        let tau =
            sample_trajectory(&oracle, &policy, &theta, &mut rng, ActionSource::Policy).unwrap();
        let r =
            single_estimate(&policy, EstimatorKind::Reinforce, &tau, &theta, 0.9, &base).unwrap();
        let g = single_estimate(&policy, EstimatorKind::Gpomdp, &tau, &theta, 0.9, &base).unwrap();
        assert!(r.vector.dist(&g.vector) < 1e-14);
    }
}

#[test]
fn batch_of_one_equals_single_estimate() {
    let (oracle, policy) = chain();
    let theta = theta_from(&[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
    let tau = sample_trajectory(
        &oracle,
        &policy,
        &theta,
        &mut ChaCha8Rng::seed_from_u64(2),
        ActionSource::Policy,
    )
    .unwrap();
    let single = single_estimate(
        &policy,
        EstimatorKind::Gpomdp,
        &tau,
        &theta,
        0.9,
        &BaselineConfig::Zero,
    )
    .unwrap();
    let batch = batch_estimate(
        &policy,
        EstimatorKind::Gpomdp,
        &[tau],
        &theta,
        0.9,
        &BaselineConfig::Zero,
    )
    .unwrap();
    assert_eq!(single.vector, batch.vector);
}

#[test]
fn padded_steps_contribute_nothing() {
    let policy = SoftmaxPolicy::linear(2, 2).unwrap();
    let theta = theta_from(&[0.3, -0.2, 0.1, 0.4, 0.0, 0.2]);
    let live = Step {
        state: vec![1.0, 0.5],
        action: 1,
        reward: 1.0,
        behavior_log_prob: 0.0,
    };
    let pad = Step {
        state: vec![9.0, 9.0],
        action: 0,
        reward: 0.0,
        behavior_log_prob: 0.0,
    };
    let short = Trajectory {
        steps: vec![live.clone()],
        truncated_at: None,
    };
    let padded = Trajectory {
        steps: vec![live, pad.clone(), pad],
        truncated_at: Some(1),
    };
    for kind in [EstimatorKind::Reinforce, EstimatorKind::Gpomdp] {
        let a =
            single_estimate(&policy, kind, &short, &theta, 0.99, &BaselineConfig::Zero).unwrap();
        let b =
            single_estimate(&policy, kind, &padded, &theta, 0.99, &BaselineConfig::Zero).unwrap();
        assert_eq!(a.vector, b.vector);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// ‖g(τ|θ)‖ ≤ H G (R + |C_b|) / (1 − γ) with G the largest score norm on the trajectory.
    #[test]
    fn estimate_norm_respects_bound(seed in any::<u64>(), c in -1.0f64..1.0, gpomdp in any::<bool>()) {
        let (oracle, policy) = chain();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = ParamVector::from_vec((0..policy.param_count()).map(|_| rng.random_range(-3.0..3.0)).collect());
        let tau = sample_trajectory(&oracle, &policy, &theta, &mut rng, ActionSource::Policy).unwrap();
        let g_max = tau.steps.iter().map(|s| policy.log_prob_gradient(&theta, &s.state, s.action).unwrap().norm()).fold(0.0, f64::max);
        let kind = if gpomdp { EstimatorKind::Gpomdp } else { EstimatorKind::Reinforce };
        let spec = oracle.spec();
        let base = BaselineConfig::Constant(c);
        let g = single_estimate(&policy, kind, &tau, &theta, spec.gamma, &base).unwrap();
        let bound = estimator_norm_bound(spec.horizon, g_max, spec.reward_bound, base.whole_trajectory(spec.horizon).abs().max(c.abs()), spec.gamma);
        prop_assert!(g.vector.norm() <= bound * (1.0 + 1e-12));
    }

    /// Weights are formed in log space, so long trajectories never produce NaN.
    #[test]
    fn importance_weights_are_finite(seed in any::<u64>()) {
        let oracle = ChainOracle::new(ChainOracleSpec::slippery_chain(3, 2, 1000, 0.999)).unwrap();
        let policy = SoftmaxPolicy::linear(3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ParamVector::from_vec((0..8).map(|_| rng.random_range(-3.0..3.0)).collect());
        let b = ParamVector::from_vec((0..8).map(|_| rng.random_range(-3.0..3.0)).collect());
        let tau = sample_trajectory(&oracle, &policy, &b, &mut rng, ActionSource::Policy).unwrap();
        let w = importance_weight(&policy, &tau, &a, &b).unwrap();
        prop_assert!(!w.is_nan() && w >= 0.0);
    }
}
