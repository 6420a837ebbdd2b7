//! Monte-Carlo conformance harnesses for the robust aggregators, averaging
//! agreement and the gradient estimators.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{bail, Result};
use fedpg_core::adversary::{Adversary, AdversaryConfig, AttackContext, ByzantineStrategy};
use fedpg_core::agreement::{run_agreement, AgreementConfig, AgreementKind};
use fedpg_core::env::{sample_trajectory, ActionSource, ChainOracle, ChainOracleSpec, Environment};
use fedpg_core::estimators::{
    page_correction, single_estimate, weighted_estimate, BaselineConfig, EstimatorKind,
};
use fedpg_core::param::{self, ParamVector};
use fedpg_core::policy::SoftmaxPolicy;
use fedpg_core::robust_agg::{robust_aggregate, AggregatorConfig, AggregatorKind};
use fedpg_core::runtime::{stream, COMMON_AGENT};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Aggregation,
    Agreement,
    Estimators,
}

impl FromStr for Suite {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "aggregation" => Suite::Aggregation,
            "agreement" => Suite::Agreement,
            "estimators" => Suite::Estimators,
            other => {
                bail!("unknown suite {other:?} (expected aggregation, agreement or estimators)")
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformanceReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    /// Measured constants such as Ĉ_ra and Ĉ_avg.
    pub constants: Vec<(String, f64)>,
}

impl ConformanceReport {
    fn new(suite: Suite) -> Self {
        ConformanceReport {
            suite,
            checks: Vec::new(),
            constants: Vec::new(),
        }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn constant(&self, name: &str) -> Option<f64> {
        self.constants
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite: {:?}", self.suite)?;
        for c in &self.checks {
            writeln!(
                f,
                "{} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        for (name, value) in &self.constants {
            writeln!(f, "  {name} = {value:.6}")?;
        }
        Ok(())
    }
}

fn gaussian(rng: &mut dyn RngCore, dim: usize, scale: f64) -> ParamVector {
    ParamVector::from_vec(
        (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect::<Vec<f64>>(),
    )
}

fn unit(rng: &mut dyn RngCore, dim: usize) -> ParamVector {
    loop {
        let v = gaussian(rng, dim, 1.0);
        let n = v.norm();
        if n > 1e-12 {
            return v.scaled(1.0 / n);
        }
    }
}

fn mean_pairwise_sq(vs: &[&ParamVector]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vs.len() {
        for j in (i + 1)..vs.len() {
            total += vs[i].dist_sq(vs[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

#[derive(Debug, Clone)]
pub struct AggregationOptions {
    pub agents: usize,
    pub byzantine: usize,
    pub dim: usize,
    pub trials: usize,
    /// Distances of the colluding Byzantine point from the honest mean, in
    /// units of the honest per-coordinate std.
    pub offsets: Vec<f64>,
    /// Tolerated fraction given to the aggregators; with alpha_max = 1/2 this
    /// yields buckets of two.
    pub alpha: f64,
    pub alpha_max: f64,
    pub seed: u64,
}

impl Default for AggregationOptions {
    fn default() -> Self {
        AggregationOptions {
            agents: 12,
            byzantine: 2,
            dim: 8,
            trials: 1000,
            offsets: vec![10.0, 100.0, 1000.0],
            alpha: 0.25,
            alpha_max: 0.5,
            seed: 0,
        }
    }
}

/// One trial: honest inputs around a random centre, the Byzantine inputs at a
/// common point `offset` away from the honest mean, at random positions.
struct AggregationTrial {
    inputs_at: Vec<ParamVector>,
    honest_mean: ParamVector,
    pair_sq: f64,
}

fn aggregation_trial(
    opts: &AggregationOptions,
    trial: usize,
    offset: f64,
    honest_std: f64,
) -> AggregationTrial {
    let mut rng = stream(opts.seed, trial as u64, "conformance/aggregation", 0);
    let centre = gaussian(&mut rng, opts.dim, 5.0);
    let honest: Vec<ParamVector> = (0..opts.agents - opts.byzantine)
        .map(|_| centre.add(&gaussian(&mut rng, opts.dim, honest_std)))
        .collect();
    let honest_mean = param::mean(&honest).expect("honest inputs");
    let direction = unit(&mut rng, opts.dim);
    let mut byz = honest_mean.clone();
    byz.axpy(offset, &direction);
    let mut inputs = honest.clone();
    inputs.extend(std::iter::repeat_n(byz, opts.byzantine));
    inputs.shuffle(&mut rng);
    let refs: Vec<&ParamVector> = honest.iter().collect();
    AggregationTrial {
        inputs_at: inputs,
        honest_mean,
        pair_sq: mean_pairwise_sq(&refs),
    }
}

/// Measured Ĉ_ra per offset and the root-mean-square aggregation error.
fn measure_aggregator(
    opts: &AggregationOptions,
    config: &AggregatorConfig,
    offset: f64,
) -> Result<(f64, f64)> {
    let (mut err_sq, mut pair_sq) = (0.0, 0.0);
    for trial in 0..opts.trials {
        let t = aggregation_trial(opts, trial, offset, 1.0);
        let mut bucket_rng = stream(opts.seed, trial as u64, "conformance/bucketing", 0);
        let out = robust_aggregate(&t.inputs_at, config, &mut bucket_rng)?;
        err_sq += out.dist_sq(&t.honest_mean);
        pair_sq += t.pair_sq;
    }
    let c_ra = err_sq / (opts.alpha.max(1e-12) * pair_sq);
    Ok((c_ra, (err_sq / opts.trials as f64).sqrt()))
}

/// Ĉ_ra for bucketed RFA and bucketed Krum across growing Byzantine offsets,
/// exactness with zero honest variance, and the plain mean as a negative
/// control whose error grows linearly with the offset.
pub fn aggregation_suite(opts: &AggregationOptions) -> Result<ConformanceReport> {
    if opts.offsets.len() < 2 || opts.byzantine >= opts.agents || opts.trials == 0 {
        bail!("aggregation suite needs two offsets, at least one honest input and one trial");
    }
    let mut report = ConformanceReport::new(Suite::Aggregation);
    let fraction = opts.byzantine as f64 / opts.agents as f64;
    let (d_min, d_max) = (opts.offsets[0], opts.offsets[opts.offsets.len() - 1]);
    for kind in [AggregatorKind::BucketedRfa, AggregatorKind::BucketedKrum] {
        let config = AggregatorConfig::new(kind, opts.alpha, opts.alpha_max);
        let mut measured = Vec::new();
        for &offset in &opts.offsets {
            let (c, _) = measure_aggregator(opts, &config, offset)?;
            report
                .constants
                .push((format!("C_ra[{kind:?}, offset {offset}]"), c));
            measured.push(c);
        }
        let lo = measured.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = measured.iter().cloned().fold(0.0, f64::max);
        report.check(
            format!("{kind:?} bounded"),
            hi.is_finite() && hi <= 2.0 * lo.max(1e-3),
            format!("C_ra in [{lo:.4}, {hi:.4}] for offsets {d_min}..{d_max}"),
        );
        let mut exact = 0usize;
        for trial in 0..opts.trials {
            let t = aggregation_trial(opts, trial, d_max, 0.0);
            let mut bucket_rng = stream(opts.seed, trial as u64, "conformance/bucketing", 0);
            if robust_aggregate(&t.inputs_at, &config, &mut bucket_rng)? == t.honest_mean {
                exact += 1;
            }
        }
        report.check(
            format!("{kind:?} exact with identical honest inputs"),
            exact == opts.trials,
            format!("{exact}/{} trials returned the honest value", opts.trials),
        );
    }

    let mean = AggregatorConfig::mean();
    let (c_lo, _) = measure_aggregator(opts, &mean, d_min)?;
    let (c_hi, e_hi) = measure_aggregator(opts, &mean, d_max)?;
    report
        .constants
        .push((format!("C_ra[Mean, offset {d_min}]"), c_lo));
    report
        .constants
        .push((format!("C_ra[Mean, offset {d_max}]"), c_hi));
    let slope = e_hi / d_max;
    let linear = (slope - fraction).abs() <= 0.1 * fraction;
    let growth = d_max / d_min;
    report.check(
        "negative control: Mean violates the bound",
        linear && c_hi / c_lo >= growth,
        format!(
            "rms error / offset = {slope:.4} (f/K = {fraction:.4}); C_ra grows {:.0}x over a {growth:.0}x offset",
            c_hi / c_lo
        ),
    );
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AgreementOptions {
    pub agents: usize,
    pub byzantine: usize,
    pub dim: usize,
    pub trials: usize,
    pub rounds: Vec<usize>,
    pub seed: u64,
}

impl Default for AgreementOptions {
    fn default() -> Self {
        AgreementOptions {
            agents: 7,
            byzantine: 1,
            dim: 8,
            trials: 1000,
            rounds: vec![1, 2, 4],
            seed: 0,
        }
    }
}

/// Byzantine behaviours cycled across trials.
#[derive(Debug, Clone, Copy)]
enum AgreementAttack {
    /// Each recipient gets a different point just outside the honest cloud.
    Splitter,
    /// Far away, identical for everyone.
    Outlier,
    /// All Byzantines pull along one direction by most of the diameter.
    Drag,
    /// Each recipient gets its own value reflected away from the farthest
    /// honest value, just inside that distance, so nearest-subset rules drop
    /// an honest value in its favour.
    Mirror,
}

impl ByzantineStrategy for AgreementAttack {
    fn payload(&self, ctx: &AttackContext<'_>, rng: &mut dyn RngCore) -> ParamVector {
        let honest: Vec<&ParamVector> = ctx.honest.iter().map(|(_, v)| *v).collect();
        let centre = param::mean(honest.iter().copied()).expect("honest senders");
        let diam = param::diameter(honest.iter().copied()).max(1e-12);
        let d = centre.len();
        let mut out = centre.clone();
        match self {
            AgreementAttack::Splitter => {
                let sign = if ctx.recipient.is_multiple_of(2) {
                    1.0
                } else {
                    -1.0
                };
                for x in out.as_mut_slice() {
                    *x += sign * diam * rng.random_range(0.0..0.6);
                }
            }
            AgreementAttack::Outlier => out.axpy(1e3 * diam, &ParamVector::from_vec(vec![1.0; d])),
            AgreementAttack::Mirror => {
                let Some((_, own)) = ctx.honest.iter().find(|(id, _)| *id == ctx.recipient) else {
                    return centre;
                };
                let far = honest
                    .iter()
                    .max_by(|a, b| a.dist_sq(own).total_cmp(&b.dist_sq(own)))
                    .expect("honest senders");
                out = (*own).clone();
                out.axpy(1.0 - 1e-9, &own.sub(far));
            }
            AgreementAttack::Drag => {
                let mut dir = vec![0.0; d];
                dir[ctx.round % d] = 1.0;
                out.axpy(0.9 * diam, &ParamVector::from_vec(dir));
            }
        }
        out
    }
}

/// Contraction of the honest diameter by 2^κ and the drift constant Ĉ_avg for
/// MDA and GDA against randomized adversaries.
pub fn agreement_suite(opts: &AgreementOptions) -> Result<ConformanceReport> {
    if opts.byzantine >= opts.agents || opts.trials == 0 {
        bail!("agreement suite needs at least one honest agent and one trial");
    }
    let mut report = ConformanceReport::new(Suite::Agreement);
    let alpha = opts.byzantine as f64 / opts.agents as f64;
    let attacks = [
        AgreementAttack::Splitter,
        AgreementAttack::Outlier,
        AgreementAttack::Drag,
        AgreementAttack::Mirror,
    ];
    for (kind, limit) in [(AgreementKind::Mda, 0.25), (AgreementKind::Gda, 0.2)] {
        if alpha >= limit {
            report.check(
                format!("{kind:?} applicable"),
                false,
                format!("f/K = {alpha:.3} is not below {limit}"),
            );
            continue;
        }
        let alpha_bar = alpha + (limit - alpha) / 2.0;
        let mut drift = 0.0f64;
        for &kappa in &opts.rounds {
            let config = AgreementConfig::new(kind, kappa, alpha_bar);
            let mut violations = 0usize;
            let mut worst = 0.0f64;
            for trial in 0..opts.trials {
                let mut rng = stream(
                    opts.seed,
                    trial as u64,
                    "conformance/agreement",
                    kappa as u64,
                );
                let scale = 10f64.powf(rng.random_range(-3.0..3.0));
                let values: Vec<ParamVector> = (0..opts.agents)
                    .map(|_| gaussian(&mut rng, opts.dim, scale))
                    .collect();
                let adv_config = AdversaryConfig {
                    byzantine_count: opts.byzantine,
                    ..AdversaryConfig::default()
                };
                let adversary = Adversary::new(
                    adv_config,
                    opts.agents,
                    (0..opts.agents).collect(),
                    0.25,
                    rng.next_u64(),
                )?
                .with_strategy(Arc::new(attacks[trial % attacks.len()]));
                let byz = adversary.byzantine_set(trial);
                let honest = |vs: &[ParamVector]| -> Vec<ParamVector> {
                    vs.iter()
                        .enumerate()
                        .filter(|(i, _)| !byz.contains(i))
                        .map(|(_, v)| v.clone())
                        .collect()
                };
                let before = honest(&values);
                let out = run_agreement(&values, &adversary, &byz, trial, &config)?;
                let after = honest(&out);
                let d_before = param::diameter(&before);
                let d_after = param::diameter(&after);
                if d_after > d_before / 2f64.powi(kappa as i32) + 1e-9 {
                    violations += 1;
                }
                if d_before > 0.0 {
                    worst = worst.max(d_after * 2f64.powi(kappa as i32) / d_before);
                    let shift = param::mean(&after)
                        .expect("honest")
                        .dist(&param::mean(&before).expect("honest"));
                    drift = drift.max(shift / d_before);
                }
            }
            report.check(
                format!("{kind:?} contraction, kappa = {kappa}"),
                violations == 0,
                format!(
                    "{violations}/{} violations; worst after·2^kappa/before = {worst:.4}",
                    opts.trials
                ),
            );
        }
        report.check(
            format!("{kind:?} drift finite"),
            drift.is_finite(),
            format!("C_avg = {drift:.4}"),
        );
        report.constants.push((format!("C_avg[{kind:?}]"), drift));
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct EstimatorOptions {
    pub samples: usize,
    /// Componentwise tolerance in standard errors.
    pub z_max: f64,
    pub seed: u64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            samples: 200_000,
            z_max: 3.0,
            seed: 0,
        }
    }
}

/// Componentwise running mean and standard error.
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

    /// Largest |mean − exact| / se over components.
    fn max_z(&self, exact: &ParamVector) -> f64 {
        let n = self.n as f64;
        (0..exact.len())
            .map(|i| {
                let mean = self.sum[i] / n;
                let var = (self.sum_sq[i] / n - mean * mean).max(0.0) * n / (n - 1.0);
                let se = (var / n).sqrt();
                let gap = (mean - exact[i]).abs();
                if se == 0.0 {
                    if gap <= 1e-12 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    gap / se
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Monte-Carlo means of REINFORCE, GPOMDP, importance-weighted GPOMDP and the
/// PAGE correction against exact enumeration on a 3-state, 2-action chain
/// with horizon 3 and a linear softmax policy.
pub fn estimator_suite(opts: &EstimatorOptions) -> Result<ConformanceReport> {
    if opts.samples < 2 {
        bail!("estimator suite needs at least two samples");
    }
    let mut report = ConformanceReport::new(Suite::Estimators);
    let oracle = ChainOracle::new(ChainOracleSpec::slippery_chain(3, 2, 3, 0.9))?;
    let policy = SoftmaxPolicy::linear(3, 2)?;
    let gamma = oracle.spec().gamma;
    let mut rng = stream(opts.seed, COMMON_AGENT, "conformance/estimators", 0);
    let target = policy.init_params(&mut rng);
    let mut behavior = target.clone();
    behavior.axpy(0.45, &unit(&mut rng, target.len()));
    let grad_target = oracle.exact_gradient(&policy, &target)?;
    let grad_behavior = oracle.exact_gradient(&policy, &behavior)?;
    let d = policy.param_count();
    let base = BaselineConfig::Zero;
    let mut sums: Vec<Moments> = (0..4).map(|_| Moments::new(d)).collect();
    let mut at_target = stream(opts.seed, 0, "conformance/estimators/target", 0);
    let mut at_behavior = stream(opts.seed, 1, "conformance/estimators/behavior", 0);
    for _ in 0..opts.samples {
        let tau = sample_trajectory(
            &oracle,
            &policy,
            &target,
            &mut at_target,
            ActionSource::Policy,
        )?;
        sums[0].push(
            &single_estimate(
                &policy,
                EstimatorKind::Reinforce,
                &tau,
                &target,
                gamma,
                &base,
            )?
            .vector,
        );
        sums[1].push(
            &single_estimate(&policy, EstimatorKind::Gpomdp, &tau, &target, gamma, &base)?.vector,
        );
        let tau_b = sample_trajectory(
            &oracle,
            &policy,
            &behavior,
            &mut at_behavior,
            ActionSource::Policy,
        )?;
        let (weighted, _) = weighted_estimate(
            &policy,
            EstimatorKind::Gpomdp,
            &tau_b,
            &target,
            &behavior,
            gamma,
            &base,
        )?;
        sums[2].push(&weighted);
        let correction = page_correction(
            &policy,
            EstimatorKind::Gpomdp,
            std::slice::from_ref(&tau_b),
            &behavior,
            &target,
            gamma,
            &base,
        )?;
        sums[3].push(&correction.estimate.vector);
    }
    let expected = [
        ("reinforce", grad_target.clone()),
        ("gpomdp", grad_target.clone()),
        ("importance-weighted gpomdp", grad_target.clone()),
        ("page correction", grad_behavior.sub(&grad_target)),
    ];
    for ((name, exact), m) in expected.iter().zip(&sums) {
        let z = m.max_z(exact);
        report.check(
            format!("{name} unbiased"),
            z <= opts.z_max,
            format!(
                "max |z| = {z:.3} over {d} components, {} samples",
                opts.samples
            ),
        );
        report.constants.push((format!("max_z[{name}]"), z));
    }
    report
        .constants
        .push(("parameter distance".into(), target.dist(&behavior)));
    Ok(report)
}

pub fn run_suite(suite: Suite, seed: u64, trials: Option<usize>) -> Result<ConformanceReport> {
    match suite {
        Suite::Aggregation => {
            let mut o = AggregationOptions {
                seed,
                ..Default::default()
            };
            if let Some(t) = trials {
                o.trials = t;
            }
            aggregation_suite(&o)
        }
        Suite::Agreement => {
            let mut o = AgreementOptions {
                seed,
                ..Default::default()
            };
            if let Some(t) = trials {
                o.trials = t;
            }
            agreement_suite(&o)
        }
        Suite::Estimators => {
            let mut o = EstimatorOptions {
                seed,
                ..Default::default()
            };
            if let Some(t) = trials {
                o.samples = t;
            }
            estimator_suite(&o)
        }
    }
}
