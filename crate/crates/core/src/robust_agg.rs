//! Robust aggregation of the K vectors an agent receives: Krum, RFA (smoothed
//! Weiszfeld geometric median) and random bucketing in front of either.

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{self, ParamVector};

/// Tolerance used when turning fractions like `(1-α)K` into counts.
const COUNT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Krum,
    Rfa,
    BucketedKrum,
    BucketedRfa,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    /// Tolerated Byzantine fraction.
    pub alpha: f64,
    /// 1/2 for a trusted server, 1/4 for the decentralized protocol.
    pub alpha_max: f64,
    #[serde(default = "default_weiszfeld_iters")]
    pub weiszfeld_iters: usize,
    #[serde(default = "default_weiszfeld_smoothing")]
    pub weiszfeld_smoothing: f64,
}

fn default_weiszfeld_iters() -> usize {
    64
}

fn default_weiszfeld_smoothing() -> f64 {
    1e-8
}

impl AggregatorConfig {
    pub fn new(kind: AggregatorKind, alpha: f64, alpha_max: f64) -> Self {
        AggregatorConfig {
            kind,
            alpha,
            alpha_max,
            weiszfeld_iters: default_weiszfeld_iters(),
            weiszfeld_smoothing: default_weiszfeld_smoothing(),
        }
    }

    pub fn mean() -> Self {
        Self::new(AggregatorKind::Mean, 0.0, 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max > 0.0 && self.alpha_max <= 0.5) {
            return Err(Error::config(format!(
                "aggregator alpha_max must lie in (0, 1/2], got {}",
                self.alpha_max
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha < self.alpha_max) {
            return Err(Error::config(format!(
                "aggregator alpha = {} must lie in [0, alpha_max = {})",
                self.alpha, self.alpha_max
            )));
        }
        if self.kind == AggregatorKind::Mean && self.alpha > 0.0 {
            return Err(Error::config(
                "the mean aggregator tolerates no Byzantine inputs (alpha must be 0)",
            ));
        }
        if self.weiszfeld_iters == 0 || !(self.weiszfeld_smoothing > 0.0) {
            return Err(Error::config(
                "Weiszfeld needs at least one iteration and a positive smoothing",
            ));
        }
        Ok(())
    }

    /// ⌊α_max/α⌋ inputs per bucket; with α = 0 every input goes into one bucket.
    pub fn bucket_size(&self, inputs: usize) -> usize {
        if self.alpha == 0.0 {
            inputs.max(1)
        } else {
            ((self.alpha_max / self.alpha + COUNT_EPS).floor() as usize).clamp(1, inputs.max(1))
        }
    }
}

/// Index chosen by Krum: the input with the smallest summed squared distance
/// to its ⌈(1−α)K⌉ nearest inputs (itself included). Ties go to the lowest index.
pub fn krum_index(inputs: &[ParamVector], alpha: f64) -> Result<usize> {
    let k = inputs.len();
    if k == 0 {
        return Err(Error::config("krum needs at least one input"));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config(format!(
            "krum alpha {alpha} must lie in [0, 1)"
        )));
    }
    let neighbours = (((1.0 - alpha) * k as f64 - COUNT_EPS).ceil() as usize).clamp(1, k);
    let mut dist = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let d = inputs[i].dist_sq(&inputs[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut best = (f64::INFINITY, 0usize);
    for (i, row) in dist.iter().enumerate() {
        let mut sorted = row.clone();
        sorted.sort_by(f64::total_cmp);
        let score: f64 = sorted[..neighbours].iter().sum();
        if score < best.0 {
            best = (score, i);
        }
    }
    Ok(best.1)
}

pub fn krum(inputs: &[ParamVector], alpha: f64) -> Result<ParamVector> {
    Ok(inputs[krum_index(inputs, alpha)?].clone())
}

/// Smoothed Weiszfeld iterations for the geometric median, started from the
/// coordinate-wise mean: x ← Σ w_i θ_i / Σ w_i with w_i = 1/max(ν, ‖x − θ_i‖).
pub fn rfa(inputs: &[ParamVector], iterations: usize, smoothing: f64) -> Result<ParamVector> {
    if inputs.is_empty() {
        return Err(Error::config("rfa needs at least one input"));
    }
    if inputs.len() == 1 {
        return Ok(inputs[0].clone());
    }
    let mut x = param::mean(inputs).expect("non-empty");
    let d = x.len();
    for _ in 0..iterations {
        let mut num = ParamVector::zeros(d);
        let mut den = 0.0;
        for v in inputs {
            let w = 1.0 / x.dist(v).max(smoothing);
            num.axpy(w, v);
            den += w;
        }
        num.scale(1.0 / den);
        x = num;
    }
    Ok(snap_to_input(inputs, x))
}

/// Weiszfeld only approaches a median sitting on an input point. Input θ_j
/// (with multiplicity m) is the exact minimiser iff ‖Σ_{θ_i ≠ θ_j} unit(θ_i − θ_j)‖ ≤ m.
fn snap_to_input(inputs: &[ParamVector], x: ParamVector) -> ParamVector {
    let nearest = inputs
        .iter()
        .min_by(|a, b| a.dist_sq(&x).total_cmp(&b.dist_sq(&x)))
        .expect("non-empty");
    let mut pull = ParamVector::zeros(x.len());
    let mut multiplicity = 0usize;
    for v in inputs {
        let d = v.dist(nearest);
        if d == 0.0 {
            multiplicity += 1;
        } else {
            pull.axpy(1.0 / d, &v.sub(nearest));
        }
    }
    if pull.norm() <= multiplicity as f64 {
        nearest.clone()
    } else {
        x
    }
}

/// Randomly permute the inputs, cut them into contiguous groups of `bucket_size`
/// (the last one possibly smaller) and return the group means.
pub fn bucketize(
    inputs: &[ParamVector],
    bucket_size: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<ParamVector>> {
    if bucket_size == 0 {
        return Err(Error::config("bucket size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(bucket_size)
        .map(|chunk| param::mean(chunk.iter().map(|&i| &inputs[i])).expect("non-empty chunk"))
        .collect())
}

/// Dispatch on the configured aggregator. `rng` drives bucketing only.
pub fn robust_aggregate(
    inputs: &[ParamVector],
    config: &AggregatorConfig,
    rng: &mut dyn RngCore,
) -> Result<ParamVector> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::config("cannot aggregate an empty input set"));
    }
    let dim = inputs[0].len();
    for v in inputs {
        v.check_dim(dim)?;
    }
    if inputs.len() == 1 {
        return Ok(inputs[0].clone());
    }
    match config.kind {
        AggregatorKind::Mean => Ok(param::mean(inputs).expect("non-empty")),
        AggregatorKind::Krum => krum(inputs, config.alpha),
        AggregatorKind::Rfa => rfa(inputs, config.weiszfeld_iters, config.weiszfeld_smoothing),
        AggregatorKind::BucketedKrum | AggregatorKind::BucketedRfa => {
            let s = config.bucket_size(inputs.len());
            let buckets = bucketize(inputs, s, rng)?;
            if config.kind == AggregatorKind::BucketedKrum {
                // At most a fraction s·α of the buckets can contain a Byzantine input.
                let bucket_alpha = (s as f64 * config.alpha).min(1.0 - 1.0 / buckets.len() as f64);
                krum(&buckets, bucket_alpha.max(0.0))
            } else {
                rfa(&buckets, config.weiszfeld_iters, config.weiszfeld_smoothing)
            }
        }
    }
}
