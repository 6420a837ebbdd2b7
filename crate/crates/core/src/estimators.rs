//! Score-function policy-gradient estimators and the importance-weighted
//! correction used by the recursive (small-batch) update.

use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::policy::SoftmaxPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Reinforce,
    #[default]
    Gpomdp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradKind {
    Reinforce,
    Gpomdp,
    PageCorrection,
    Aggregated,
    Realized,
}

impl From<EstimatorKind> for GradKind {
    fn from(kind: EstimatorKind) -> Self {
        match kind {
            EstimatorKind::Reinforce => GradKind::Reinforce,
            EstimatorKind::Gpomdp => GradKind::Gpomdp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub vector: ParamVector,
    pub batch_size: usize,
    pub kind: GradKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", content = "values", rename_all = "snake_case")]
pub enum BaselineConfig {
    #[default]
    Zero,
    Constant(f64),
    /// One constant per step `h`; missing trailing steps use zero.
    PerStepConstant(Vec<f64>),
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            BaselineConfig::Zero => true,
            BaselineConfig::Constant(c) => c.is_finite(),
            BaselineConfig::PerStepConstant(v) => v.iter().all(|c| c.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("baseline constants must be finite"))
        }
    }

    /// C_{b_h} for GPOMDP.
    pub fn at_step(&self, h: usize) -> f64 {
        match self {
            BaselineConfig::Zero => 0.0,
            BaselineConfig::Constant(c) => *c,
            BaselineConfig::PerStepConstant(v) => v.get(h).copied().unwrap_or(0.0),
        }
    }

    /// C_b for REINFORCE. A per-step baseline collapses to the sum of its
    /// entries over the horizon, which keeps REINFORCE and GPOMDP equal at H = 1.
    pub fn whole_trajectory(&self, horizon: usize) -> f64 {
        match self {
            BaselineConfig::Zero => 0.0,
            BaselineConfig::Constant(c) => *c,
            BaselineConfig::PerStepConstant(_) => (0..horizon).map(|h| self.at_step(h)).sum(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            BaselineConfig::Zero => 0.0,
            BaselineConfig::Constant(c) => c.abs(),
            BaselineConfig::PerStepConstant(v) => v.iter().fold(0.0f64, |m, c| m.max(c.abs())),
        }
    }
}

/// Reward-to-go weights `W_t` such that `g(τ|θ) = Σ_t ∇log π(a_t|s_t) W_t`.
///
/// REINFORCE uses the same weight `Σ_h γ^h r_h − C_b` for every step. GPOMDP's
/// `Σ_h (Σ_{t≤h} ∇log π_t)(γ^h r_h − C_{b_h})` regroups to
/// `W_t = Σ_{h≥t} (γ^h r_h − C_{b_h})`.
fn step_weights(
    kind: EstimatorKind,
    tau: &Trajectory,
    gamma: f64,
    baseline: &BaselineConfig,
) -> Vec<f64> {
    let horizon = tau.horizon();
    match kind {
        EstimatorKind::Reinforce => {
            let w = tau.discounted_return(gamma) - baseline.whole_trajectory(horizon);
            vec![w; horizon]
        }
        EstimatorKind::Gpomdp => {
            let mut terms = Vec::with_capacity(horizon);
            let mut discount = 1.0;
            for (h, step) in tau.steps.iter().enumerate() {
                terms.push(discount * step.reward - baseline.at_step(h));
                discount *= gamma;
            }
            let mut acc = 0.0;
            for w in terms.iter_mut().rev() {
                acc += *w;
                *w = acc;
            }
            terms
        }
    }
}

/// Adds `scale * g(τ|θ)` into `out`; returns Σ_t log π_θ(a_t|s_t) over the
/// live steps.
fn accumulate_estimate(
    policy: &SoftmaxPolicy,
    kind: EstimatorKind,
    tau: &Trajectory,
    theta: &ParamVector,
    gamma: f64,
    baseline: &BaselineConfig,
    scale: f64,
    out: &mut [f64],
) -> Result<f64> {
    let weights = step_weights(kind, tau, gamma, baseline);
    let mut log_prob = 0.0;
    for (step, w) in tau.live_steps().iter().zip(&weights) {
        log_prob += policy.accumulate_score(theta, &step.state, step.action, scale * w, out)?;
    }
    Ok(log_prob)
}

/// g(τ|θ) for either estimator.
pub fn single_estimate(
    policy: &SoftmaxPolicy,
    kind: EstimatorKind,
    tau: &Trajectory,
    theta: &ParamVector,
    gamma: f64,
    baseline: &BaselineConfig,
) -> Result<GradEstimate> {
    let mut out = ParamVector::zeros(policy.param_count());
    accumulate_estimate(
        policy,
        kind,
        tau,
        theta,
        gamma,
        baseline,
        1.0,
        out.as_mut_slice(),
    )?;
    Ok(GradEstimate {
        vector: out,
        batch_size: 1,
        kind: kind.into(),
    })
}

/// (Σ_h ∇log π_θ(a_h|s_h)) (Σ_h γ^h r_h − C_b)
pub fn reinforce(
    policy: &SoftmaxPolicy,
    tau: &Trajectory,
    theta: &ParamVector,
    gamma: f64,
    baseline: &BaselineConfig,
) -> Result<GradEstimate> {
    single_estimate(
        policy,
        EstimatorKind::Reinforce,
        tau,
        theta,
        gamma,
        baseline,
    )
}

/// Σ_h (Σ_{t≤h} ∇log π_θ(a_t|s_t)) (γ^h r_h − C_{b_h})
pub fn gpomdp(
    policy: &SoftmaxPolicy,
    tau: &Trajectory,
    theta: &ParamVector,
    gamma: f64,
    baseline: &BaselineConfig,
) -> Result<GradEstimate> {
    single_estimate(policy, EstimatorKind::Gpomdp, tau, theta, gamma, baseline)
}

/// Mean of g(τ_i|θ) over a batch, summed in batch order.
pub fn batch_estimate(
    policy: &SoftmaxPolicy,
    kind: EstimatorKind,
    batch: &[Trajectory],
    theta: &ParamVector,
    gamma: f64,
    baseline: &BaselineConfig,
) -> Result<GradEstimate> {
    if batch.is_empty() {
        return Err(Error::config("batch must contain at least one trajectory"));
    }
    let mut out = ParamVector::zeros(policy.param_count());
    let scale = 1.0 / batch.len() as f64;
    for tau in batch {
        accumulate_estimate(
            policy,
            kind,
            tau,
            theta,
            gamma,
            baseline,
            scale,
            out.as_mut_slice(),
        )?;
    }
    Ok(GradEstimate {
        vector: out,
        batch_size: batch.len(),
        kind: kind.into(),
    })
}

fn sum_log_probs(policy: &SoftmaxPolicy, tau: &Trajectory, theta: &ParamVector) -> Result<f64> {
    let mut total = 0.0;
    for step in tau.live_steps() {
        total += policy.action_log_probs(theta, &step.state)?[step.action];
    }
    Ok(total)
}

/// ω = p(τ|θ_target) / p(τ|θ_behavior). Transition probabilities cancel, so
/// only the policy terms are evaluated, in log space.
pub fn importance_weight(
    policy: &SoftmaxPolicy,
    tau: &Trajectory,
    theta_target: &ParamVector,
    theta_behavior: &ParamVector,
) -> Result<f64> {
    let target = sum_log_probs(policy, tau, theta_target)?;
    let behavior = sum_log_probs(policy, tau, theta_behavior)?;
    Ok((target - behavior).exp())
}

/// ω(τ|θ_b, θ_a) g(τ|θ_a): importance-weighted estimate of ∇J(θ_a) from a
/// trajectory drawn at θ_b.
pub fn weighted_estimate(
    policy: &SoftmaxPolicy,
    kind: EstimatorKind,
    tau: &Trajectory,
    theta_target: &ParamVector,
    theta_behavior: &ParamVector,
    gamma: f64,
    baseline: &BaselineConfig,
) -> Result<(ParamVector, f64)> {
    let mut g = ParamVector::zeros(policy.param_count());
    let target = accumulate_estimate(
        policy,
        kind,
        tau,
        theta_target,
        gamma,
        baseline,
        1.0,
        g.as_mut_slice(),
    )?;
    let behavior = sum_log_probs(policy, tau, theta_behavior)?;
    let w = (target - behavior).exp();
    g.scale(w);
    Ok((g, w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageCorrection {
    /// Δ̂^B(θ_t, θ_{t-1})
    pub estimate: GradEstimate,
    /// Largest importance weight seen in the batch.
    pub max_weight: f64,
}

/// Δ̂^B(θ_t, θ_{t−1}) = (1/B) Σ_j g(τ_j|θ_t) − (1/B) Σ_j ω(τ_j|θ_t, θ_{t−1}) g(τ_j|θ_{t−1}),
/// with every τ_j sampled at θ_t.
///
/// Per trajectory the two terms are computed with the same code path, so equal
/// parameters give an exactly zero correction.
pub fn page_correction(
    policy: &SoftmaxPolicy,
    kind: EstimatorKind,
    batch: &[Trajectory],
    theta_current: &ParamVector,
    theta_previous: &ParamVector,
    gamma: f64,
    baseline: &BaselineConfig,
) -> Result<PageCorrection> {
    if batch.is_empty() {
        return Err(Error::config("batch must contain at least one trajectory"));
    }
    let d = policy.param_count();
    let scale = 1.0 / batch.len() as f64;
    let mut out = ParamVector::zeros(d);
    let mut max_weight = 0.0f64;
    let mut g_cur = ParamVector::zeros(d);
    let mut g_prev = ParamVector::zeros(d);
    for tau in batch {
        g_cur.scale(0.0);
        g_prev.scale(0.0);
        let lp_cur = accumulate_estimate(
            policy,
            kind,
            tau,
            theta_current,
            gamma,
            baseline,
            1.0,
            g_cur.as_mut_slice(),
        )?;
        let lp_prev = accumulate_estimate(
            policy,
            kind,
            tau,
            theta_previous,
            gamma,
            baseline,
            1.0,
            g_prev.as_mut_slice(),
        )?;
        let w = (lp_prev - lp_cur).exp();
        max_weight = max_weight.max(w);
        for ((o, c), p) in out
            .as_mut_slice()
            .iter_mut()
            .zip(g_cur.iter())
            .zip(g_prev.iter())
        {
            *o += scale * (c - w * p);
        }
    }
    Ok(PageCorrection {
        estimate: GradEstimate {
            vector: out,
            batch_size: batch.len(),
            kind: GradKind::PageCorrection,
        },
        max_weight,
    })
}

/// C_g = H G (R + |C_b|) / (1 − γ), the a-priori bound on ‖g(τ|θ)‖.
pub fn estimator_norm_bound(
    horizon: usize,
    score_bound: f64,
    reward_bound: f64,
    baseline_abs: f64,
    gamma: f64,
) -> f64 {
    horizon as f64 * score_bound * (reward_bound + baseline_abs) / (1.0 - gamma)
}
