//! Iterated averaging agreement. In each sub-round every agent broadcasts its
//! current vector, selects a subset of what it received (minimum diameter for
//! MDA, nearest to itself for GDA) and replaces its vector with the subset mean.

use serde::{Deserialize, Serialize};

use crate::adversary::{Adversary, Phase};
use crate::error::{Error, Result};
use crate::param::{self, ParamVector};
use crate::runtime::broadcast;

const COUNT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementKind {
    Mda,
    Gda,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementConfig {
    pub kind: AgreementKind,
    /// κ
    pub rounds: usize,
    /// ᾱ = α + ε̄
    pub alpha_bar: f64,
    /// Largest number of subsets MDA may examine.
    #[serde(default = "default_mda_cap")]
    pub mda_cap: u64,
}

fn default_mda_cap() -> u64 {
    1_000_000
}

impl AgreementConfig {
    pub fn new(kind: AgreementKind, rounds: usize, alpha_bar: f64) -> Self {
        AgreementConfig {
            kind,
            rounds,
            alpha_bar,
            mda_cap: default_mda_cap(),
        }
    }

    pub fn none() -> Self {
        Self::new(AgreementKind::None, 0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let limit = match self.kind {
            AgreementKind::Mda => 0.25,
            AgreementKind::Gda => 0.2,
            AgreementKind::None => return Ok(()),
        };
        if !(self.alpha_bar >= 0.0 && self.alpha_bar < limit) {
            return Err(Error::config(format!(
                "agreement alpha_bar = {} must lie in [0, {limit}) for {:?}",
                self.alpha_bar, self.kind
            )));
        }
        Ok(())
    }

    /// ⌈(1 − ᾱ) K⌉
    pub fn subset_size(&self, agents: usize) -> usize {
        (((1.0 - self.alpha_bar) * agents as f64 - COUNT_EPS).ceil() as usize)
            .clamp(1, agents.max(1))
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exhaustive minimum-diameter subset of size `m`; ties go to the
/// lexicographically smallest index set.
pub fn mda_select(received: &[ParamVector], m: usize, cap: u64) -> Result<Vec<usize>> {
    let k = received.len();
    if m == 0 || m > k {
        return Err(Error::config(format!(
            "MDA subset size {m} must lie in 1..={k}"
        )));
    }
    let count = binomial(k, m);
    if count > cap as u128 {
        return Err(Error::config(format!(
            "MDA would examine {count} subsets (cap {cap}); use gda for this many agents"
        )));
    }
    let mut dist = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let d = received[i].dist_sq(&received[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut subset: Vec<usize> = (0..m).collect();
    let mut best = subset.clone();
    let mut best_diam = f64::INFINITY;
    loop {
        let mut diam = 0.0f64;
        'outer: for (a, &i) in subset.iter().enumerate() {
            for &j in &subset[a + 1..] {
                diam = diam.max(dist[i][j]);
                if diam >= best_diam {
                    break 'outer;
                }
            }
        }
        if diam < best_diam {
            best_diam = diam;
            best.clone_from(&subset);
        }
        // Next combination in lexicographic order.
        let mut i = m;
        while i > 0 && subset[i - 1] == k - m + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        subset[i - 1] += 1;
        for j in i..m {
            subset[j] = subset[j - 1] + 1;
        }
    }
    Ok(best)
}

/// The `m` received vectors closest to `self_value`, nearest first; ties go
/// to the lower index.
pub fn gda_select(
    received: &[ParamVector],
    self_value: &ParamVector,
    m: usize,
) -> Result<Vec<usize>> {
    if m == 0 || m > received.len() {
        return Err(Error::config(format!(
            "GDA subset size {m} must lie in 1..={}",
            received.len()
        )));
    }
    let mut order: Vec<(f64, usize)> = received
        .iter()
        .enumerate()
        .map(|(i, v)| (v.dist_sq(self_value), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(m).map(|(_, i)| i).collect())
}

/// Select from one mailbox and average the selection.
pub fn avg_agree_round(
    local: &ParamVector,
    mailbox: &[ParamVector],
    config: &AgreementConfig,
) -> Result<ParamVector> {
    let m = config.subset_size(mailbox.len());
    let selected = match config.kind {
        AgreementKind::None => return Ok(local.clone()),
        AgreementKind::Mda => mda_select(mailbox, m, config.mda_cap)?,
        AgreementKind::Gda => gda_select(mailbox, local, m)?,
    };
    Ok(param::mean(selected.iter().map(|&i| &mailbox[i])).expect("non-empty selection"))
}

/// κ sequential broadcast-select-average sub-rounds of iteration `round`.
///
/// `values[k]` is agent k's input. Byzantine entries are ignored as inputs
/// (unless the adversary echoes protocol values) and their outputs are still
/// computed from their own mailbox, since local state follows the protocol.
pub fn run_agreement(
    values: &[ParamVector],
    adversary: &Adversary,
    byzantine: &[usize],
    round: usize,
    config: &AgreementConfig,
) -> Result<Vec<ParamVector>> {
    config.validate()?;
    if config.kind == AgreementKind::None || values.len() <= 1 {
        return Ok(values.to_vec());
    }
    let k = values.len();
    let recipients: Vec<usize> = (0..k).collect();
    let mut current = values.to_vec();
    for sub in 0..config.rounds {
        let payloads: Vec<Option<ParamVector>> = current.iter().cloned().map(Some).collect();
        let mailboxes = broadcast(
            adversary,
            &payloads,
            byzantine,
            round,
            Phase::Agreement(sub),
            &recipients,
        )?;
        current = mailboxes
            .iter()
            .map(|mb| avg_agree_round(&current[mb.recipient], &mb.vectors(), config))
            .collect::<Result<_>>()?;
    }
    Ok(current)
}
