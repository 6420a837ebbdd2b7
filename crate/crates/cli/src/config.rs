//! Declarative experiment files.
//!
//! Every key is optional. Missing keys fall back to the CartPole column of the
//! reference hyperparameter table (MLP 16×16 ReLU with tanh output, Adam with
//! η = 5e-3, γ = 0.999, H = 500, N = 50, B = 4, p = 0.2). Aggregation and
//! agreement defaults depend on the algorithm and the Byzantine count.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use fedpg_core::adversary::AdversaryConfig;
use fedpg_core::agreement::{AgreementConfig, AgreementKind};
use fedpg_core::algorithms::{AlgoConfig, AlgorithmKind, OptimizerKind};
use fedpg_core::env::{parse_chain_spec, CartPole, ChainOracle, ChainOracleSpec, Environment};
use fedpg_core::estimators::{BaselineConfig, EstimatorKind};
use fedpg_core::policy::{
    Architecture, HiddenActivation, OutputActivation, PolicySpec, SoftmaxPolicy,
};
use fedpg_core::robust_agg::{AggregatorConfig, AggregatorKind};
use fedpg_core::runtime::AdamParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub env: EnvSection,
    pub policy: PolicySection,
    pub algorithm: AlgorithmSection,
    pub aggregator: AggregatorSection,
    pub agreement: AgreementSection,
    pub adversary: AdversaryConfig,
    /// Directory of the file this config was read from; relative paths
    /// inside the config resolve against it.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub runs: usize,
    /// Run r uses seed + r unless `seeds` lists them explicitly.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Emit a metrics row every this many iterations (the last one always).
    pub metric_every: usize,
    /// Defaults to `results/<name>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Stop a run once this many trajectories per agent have been sampled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_trajectories: Option<u64>,
    /// Stop a run once the smoothed mean honest return reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_return: Option<f64>,
    /// Trailing window (in iterations) of the smoothed return.
    pub smoothing_window: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "experiment".into(),
            runs: 10,
            seed: 0,
            seeds: None,
            metric_every: 1,
            output_dir: None,
            max_trajectories: None,
            stop_return: None,
            smoothing_window: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Cartpole,
    SlipperyChain,
    AliasedCorridors,
    /// Tabular MDP read from `spec_file`.
    ChainFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    pub horizon: usize,
    pub gamma: f64,
    /// slippery_chain only.
    pub states: usize,
    /// slippery_chain only.
    pub actions: usize,
    /// aliased_corridors only.
    pub groups: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec_file: Option<PathBuf>,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            kind: EnvKind::Cartpole,
            horizon: 500,
            gamma: 0.999,
            states: 3,
            actions: 2,
            groups: 12,
            spec_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub architecture: Architecture,
    /// Defaults to [16, 16] for mlp and [] for linear.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    pub hidden_activation: HiddenActivation,
    /// Defaults to tanh for mlp and identity for linear.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_activation: Option<OutputActivation>,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            architecture: Architecture::Mlp,
            hidden: None,
            hidden_activation: HiddenActivation::Relu,
            output_activation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSection {
    pub kind: AlgorithmKind,
    pub agents: usize,
    pub large_batch: usize,
    pub small_batch: usize,
    pub switch_prob: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub adam: AdamParams,
    pub estimator: EstimatorKind,
    pub baseline: BaselineConfig,
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        AlgorithmSection {
            kind: AlgorithmKind::DecByzPg,
            agents: 13,
            large_batch: 50,
            small_batch: 4,
            switch_prob: 0.2,
            step_size: 5e-3,
            iterations: 500,
            optimizer: OptimizerKind::Adam,
            adam: AdamParams::default(),
            estimator: EstimatorKind::Gpomdp,
            baseline: BaselineConfig::Zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorSection {
    /// bucketed_rfa for the robust algorithms, mean for the naive ones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<AggregatorKind>,
    /// Tolerated Byzantine fraction; defaults to byzantine_count / agents.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub weiszfeld_iters: usize,
    pub weiszfeld_smoothing: f64,
}

impl Default for AggregatorSection {
    fn default() -> Self {
        let base = AggregatorConfig::mean();
        AggregatorSection {
            kind: None,
            alpha: None,
            weiszfeld_iters: base.weiszfeld_iters,
            weiszfeld_smoothing: base.weiszfeld_smoothing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgreementSection {
    /// mda for dec_byz_pg (gda when MDA would exceed `mda_cap` subsets),
    /// none otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<AgreementKind>,
    pub rounds: usize,
    /// Defaults to halfway between α and the rule's limit (1/4 MDA, 1/5 GDA).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_bar: Option<f64>,
    pub mda_cap: u64,
}

impl Default for AgreementSection {
    fn default() -> Self {
        AgreementSection {
            kind: None,
            rounds: 2,
            alpha_bar: None,
            mda_cap: AgreementConfig::new(AgreementKind::Mda, 2, 0.0).mda_cap,
        }
    }
}

/// Everything needed to start a run, with all defaults applied.
#[derive(Clone)]
pub struct ResolvedConfig {
    pub env: Arc<dyn Environment>,
    pub policy: SoftmaxPolicy,
    pub algo: AlgoConfig,
    pub aggregator: AggregatorConfig,
    pub agreement: AgreementConfig,
    pub adversary: AdversaryConfig,
}

fn agreement_limit(kind: AgreementKind) -> f64 {
    match kind {
        AgreementKind::Mda => 0.25,
        AgreementKind::Gda => 0.2,
        AgreementKind::None => 0.0,
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).context("malformed experiment config")?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?)
            .with_context(|| format!("writing {}", path.display()))
    }

    /// Seeds of runs `0..runs`.
    pub fn run_seeds(&self) -> Result<Vec<u64>> {
        let ex = &self.experiment;
        match &ex.seeds {
            Some(seeds) if seeds.len() != ex.runs => bail!(
                "experiment.seeds: {} seeds listed but experiment.runs = {}",
                seeds.len(),
                ex.runs
            ),
            Some(seeds) => Ok(seeds.clone()),
            None => Ok((0..ex.runs as u64)
                .map(|r| ex.seed.wrapping_add(r))
                .collect()),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.experiment
            .output_dir
            .clone()
            .unwrap_or_else(|| Path::new("results").join(&self.experiment.name))
    }

    fn build_env(&self) -> Result<Arc<dyn Environment>> {
        let e = &self.env;
        Ok(match e.kind {
            EnvKind::Cartpole => Arc::new(CartPole::new(e.horizon, e.gamma).context("env")?),
            EnvKind::SlipperyChain => Arc::new(
                ChainOracle::new(ChainOracleSpec::slippery_chain(
                    e.states, e.actions, e.horizon, e.gamma,
                ))
                .context("env")?,
            ),
            EnvKind::AliasedCorridors => {
                if e.groups == 0 {
                    bail!("env.groups must be at least 1");
                }
                Arc::new(
                    ChainOracle::new(ChainOracleSpec::aliased_corridors(
                        e.groups, e.horizon, e.gamma,
                    ))
                    .context("env")?,
                )
            }
            EnvKind::ChainFile => {
                let file = e
                    .spec_file
                    .as_ref()
                    .context("env.spec_file is required for kind = \"chain_file\"")?;
                let path = match &self.base_dir {
                    Some(dir) if file.is_relative() => dir.join(file),
                    _ => file.clone(),
                };
                let text = fs::read_to_string(&path)
                    .with_context(|| format!("env.spec_file: reading {}", path.display()))?;
                let spec = parse_chain_spec(&text)
                    .with_context(|| format!("env.spec_file: {}", path.display()))?;
                Arc::new(ChainOracle::new(spec)?)
            }
        })
    }

    fn build_policy(&self, env: &dyn Environment) -> Result<SoftmaxPolicy> {
        let p = &self.policy;
        let spec = env.spec();
        let policy_spec = match p.architecture {
            Architecture::Linear => {
                if p.hidden.as_ref().is_some_and(|h| !h.is_empty()) {
                    bail!("policy.hidden: a linear policy has no hidden layers");
                }
                let mut s = PolicySpec::linear(spec.state_dim, spec.action_count);
                s.output_activation = p.output_activation.unwrap_or(OutputActivation::Identity);
                s
            }
            Architecture::Mlp => PolicySpec::mlp(
                spec.state_dim,
                p.hidden.clone().unwrap_or_else(|| vec![16, 16]),
                spec.action_count,
                p.hidden_activation,
                p.output_activation.unwrap_or(OutputActivation::Tanh),
            ),
        };
        SoftmaxPolicy::new(policy_spec).context("policy")
    }

    /// Apply defaults and check cross-field consistency.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let ex = &self.experiment;
        if ex.runs == 0 {
            bail!("experiment.runs must be at least 1");
        }
        if ex.metric_every == 0 {
            bail!("experiment.metric_every must be at least 1");
        }
        if ex.smoothing_window == 0 {
            bail!("experiment.smoothing_window must be at least 1");
        }
        self.run_seeds()?;

        let a = &self.algorithm;
        let kind = a.kind;
        let k = a.agents;
        let f = self.adversary.byzantine_count;
        let algo = AlgoConfig {
            algorithm: kind,
            agents: k,
            large_batch: a.large_batch,
            small_batch: a.small_batch,
            switch_prob: a.switch_prob,
            step_size: a.step_size,
            iterations: a.iterations,
            optimizer: a.optimizer,
            adam: a.adam,
            estimator: a.estimator,
            baseline: a.baseline.clone(),
        };
        algo.validate().context("algorithm")?;

        let alpha_max = kind.alpha_max();
        let fraction = f as f64 / k as f64;
        if f > 0 && fraction >= alpha_max {
            bail!(
                "adversary.byzantine_count: {f} of {k} agents ({fraction:.3}) must stay below alpha_max = {alpha_max} for {kind:?}"
            );
        }
        if !kind.is_decentralized() && f >= k {
            bail!("adversary.byzantine_count: the server (agent 0) is never Byzantine, so at most {} of {k}", k - 1);
        }

        let agg = &self.aggregator;
        let aggregator = if kind.is_naive() {
            if agg.kind.is_some_and(|x| x != AggregatorKind::Mean) {
                bail!("aggregator.kind: {kind:?} always averages (use mean or leave unset)");
            }
            let mut c = AggregatorConfig::mean();
            c.alpha_max = alpha_max;
            c
        } else {
            let alpha = agg.alpha.unwrap_or(fraction);
            if alpha < fraction {
                bail!("aggregator.alpha = {alpha} is below the Byzantine fraction {f}/{k}");
            }
            AggregatorConfig {
                kind: agg.kind.unwrap_or(AggregatorKind::BucketedRfa),
                alpha,
                alpha_max,
                weiszfeld_iters: agg.weiszfeld_iters,
                weiszfeld_smoothing: agg.weiszfeld_smoothing,
            }
        };
        aggregator.validate().context("aggregator")?;

        let ag = &self.agreement;
        let agreement = if kind == AlgorithmKind::DecByzPg {
            let subset = |alpha_bar: f64| {
                AgreementConfig::new(AgreementKind::Mda, 1, alpha_bar).subset_size(k)
            };
            let kind = ag.kind.unwrap_or_else(|| {
                let mda_bar = aggregator.alpha + (0.25 - aggregator.alpha) / 2.0;
                if binomial(k, subset(mda_bar)) > ag.mda_cap as u128 {
                    AgreementKind::Gda
                } else {
                    AgreementKind::Mda
                }
            });
            if kind == AgreementKind::None {
                bail!("agreement.kind: dec_byz_pg needs mda or gda");
            }
            let limit = agreement_limit(kind);
            let alpha_bar = ag
                .alpha_bar
                .unwrap_or(aggregator.alpha + (limit - aggregator.alpha) / 2.0);
            if alpha_bar < fraction {
                bail!("agreement.alpha_bar = {alpha_bar} is below the Byzantine fraction {f}/{k}");
            }
            let mut c = AgreementConfig::new(kind, ag.rounds, alpha_bar);
            c.mda_cap = ag.mda_cap;
            c
        } else {
            if ag.kind.is_some_and(|x| x != AgreementKind::None) {
                bail!("agreement.kind: {kind:?} runs no agreement (use none or leave unset)");
            }
            AgreementConfig::none()
        };
        agreement.validate().context("agreement")?;

        let env = self.build_env()?;
        let policy = self.build_policy(env.as_ref())?;
        Ok(ResolvedConfig {
            env,
            policy,
            algo,
            aggregator,
            agreement,
            adversary: self.adversary.clone(),
        })
    }

    /// A copy with every defaulted field written out, as stored next to results.
    pub fn filled(&self) -> Result<ExperimentConfig> {
        let resolved = self.resolve()?;
        let mut out = self.clone();
        out.experiment.seeds = Some(self.run_seeds()?);
        out.experiment.output_dir = Some(self.output_dir());
        if self.policy.architecture == Architecture::Mlp {
            out.policy.hidden = Some(resolved.policy.spec().hidden_sizes.clone());
        } else {
            out.policy.hidden = Some(Vec::new());
        }
        out.policy.output_activation = Some(resolved.policy.spec().output_activation);
        out.aggregator.kind = Some(resolved.aggregator.kind);
        out.aggregator.alpha = Some(resolved.aggregator.alpha);
        out.agreement.kind = Some(resolved.agreement.kind);
        out.agreement.alpha_bar = Some(resolved.agreement.alpha_bar);
        Ok(out)
    }
}

/// Read and validate an experiment file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config =
        ExperimentConfig::from_toml_str(&text).with_context(|| path.display().to_string())?;
    config.base_dir = path.parent().map(Path::to_path_buf);
    config
        .resolve()
        .with_context(|| format!("invalid config {}", path.display()))?;
    Ok(config)
}
