//! The omniscient adversary controlling every Byzantine agent.
//!
//! It picks the Byzantine set, sees all honest payloads of the current round,
//! and writes the Byzantine rows of every recipient's mailbox. It keeps no
//! state across rounds: every random draw comes from a stream derived from
//! `(root seed, sender, phase, round)`.

use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::ActionSource;
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::runtime::{stream, ADVERSARY_AGENT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    RandomAction,
    LargeNoise,
    AvgZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Static,
    PerRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    #[serde(default)]
    pub attack: AttackKind,
    #[serde(default)]
    pub byzantine_count: usize,
    #[serde(default)]
    pub selection: Selection,
    /// Fixed per-coordinate noise std for `large_noise`. When absent the std
    /// is `noise_scale * rms(honest payload norms) / sqrt(d)`.
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
}

fn default_noise_scale() -> f64 {
    10.0
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            attack: AttackKind::None,
            byzantine_count: 0,
            selection: Selection::Static,
            noise_std: None,
            noise_scale: default_noise_scale(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Gradient,
    /// Sub-round of averaging agreement.
    Agreement(usize),
}

impl Phase {
    fn tag(&self) -> String {
        match self {
            Phase::Gradient => "attack/gradient".to_string(),
            Phase::Agreement(r) => format!("attack/agreement/{r}"),
        }
    }
}

/// Everything the adversary may look at when writing one Byzantine row.
pub struct AttackContext<'a> {
    pub round: usize,
    pub phase: Phase,
    pub sender: usize,
    pub recipient: usize,
    pub honest: &'a [(usize, &'a ParamVector)],
    /// The value the sender would have sent had it followed the protocol,
    /// when one was computed.
    pub own: Option<&'a ParamVector>,
    pub byzantine_count: usize,
}

/// Custom Byzantine behaviour, used by tests and conformance harnesses.
pub trait ByzantineStrategy: Send + Sync {
    fn payload(&self, ctx: &AttackContext<'_>, rng: &mut dyn RngCore) -> ParamVector;
}

/// K labelled vectors delivered to one recipient, ordered by sender id.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMailbox {
    pub recipient: usize,
    pub entries: Vec<(usize, ParamVector)>,
}

impl RoundMailbox {
    pub fn vectors(&self) -> Vec<ParamVector> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }
}

#[derive(Clone)]
pub struct Adversary {
    config: AdversaryConfig,
    agent_count: usize,
    eligible: Vec<usize>,
    root_seed: u64,
    static_set: Vec<usize>,
    strategy: Option<Arc<dyn ByzantineStrategy>>,
}

impl fmt::Debug for Adversary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Adversary")
            .field("config", &self.config)
            .field("agent_count", &self.agent_count)
            .field("static_set", &self.static_set)
            .field("custom_strategy", &self.strategy.is_some())
            .finish()
    }
}

impl Adversary {
    /// `eligible` lists agents that may be corrupted (a trusted server is
    /// excluded). Requires `f / K < alpha_max`.
    pub fn new(
        config: AdversaryConfig,
        agent_count: usize,
        eligible: Vec<usize>,
        alpha_max: f64,
        root_seed: u64,
    ) -> Result<Self> {
        let f = config.byzantine_count;
        if f > 0 && (f as f64) / (agent_count as f64) >= alpha_max {
            return Err(Error::config(format!(
                "byzantine_count {f} of {agent_count} agents is not below alpha_max = {alpha_max}"
            )));
        }
        if f > eligible.len() {
            return Err(Error::config(format!(
                "byzantine_count {f} exceeds the {} corruptible agents",
                eligible.len()
            )));
        }
        if let Some(s) = config.noise_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("noise_std must be positive"));
            }
        }
        if !(config.noise_scale > 0.0 && config.noise_scale.is_finite()) {
            return Err(Error::config("noise_scale must be positive"));
        }
        let mut adversary = Adversary {
            config,
            agent_count,
            eligible,
            root_seed,
            static_set: Vec::new(),
            strategy: None,
        };
        adversary.static_set =
            adversary.draw_set(&mut stream(root_seed, ADVERSARY_AGENT, "select/static", 0));
        Ok(adversary)
    }

    /// No Byzantine agents at all.
    pub fn honest(agent_count: usize) -> Self {
        Adversary::new(
            AdversaryConfig::default(),
            agent_count,
            (0..agent_count).collect(),
            1.0,
            0,
        )
        .expect("empty adversary is always valid")
    }

    pub fn with_strategy(mut self, strategy: Arc<dyn ByzantineStrategy>) -> Self {
        self.strategy = Some(strategy);
        self
    }

    pub fn config(&self) -> &AdversaryConfig {
        &self.config
    }

    pub fn agent_count(&self) -> usize {
        self.agent_count
    }

    fn draw_set(&self, rng: &mut dyn RngCore) -> Vec<usize> {
        let f = self.config.byzantine_count;
        if f == 0 {
            return Vec::new();
        }
        let mut set: Vec<usize> = index::sample(rng, self.eligible.len(), f)
            .into_iter()
            .map(|i| self.eligible[i])
            .collect();
        set.sort_unstable();
        set
    }

    /// Byzantine agents of round `t`, sorted.
    pub fn byzantine_set(&self, round: usize) -> Vec<usize> {
        match self.config.selection {
            Selection::Static => self.static_set.clone(),
            Selection::PerRound => self.draw_set(&mut stream(
                self.root_seed,
                ADVERSARY_AGENT,
                "select/round",
                round as u64,
            )),
        }
    }

    /// Whether Byzantine senders transmit a protocol-computed value, so the
    /// caller must compute one for them.
    pub fn needs_own_payload(&self) -> bool {
        self.strategy.is_none()
            && matches!(
                self.config.attack,
                AttackKind::None | AttackKind::RandomAction
            )
    }

    /// How a Byzantine agent interacts with its environment.
    pub fn action_source(&self) -> ActionSource {
        match self.config.attack {
            AttackKind::RandomAction => ActionSource::Uniform,
            _ => ActionSource::Policy,
        }
    }

    fn noise_std(&self, honest: &[(usize, &ParamVector)], dim: usize) -> f64 {
        if let Some(s) = self.config.noise_std {
            return s;
        }
        if honest.is_empty() || dim == 0 {
            return self.config.noise_scale;
        }
        let ms = honest.iter().map(|(_, v)| v.norm_sq()).sum::<f64>() / honest.len() as f64;
        let std = self.config.noise_scale * ms.sqrt() / (dim as f64).sqrt();
        if std > 0.0 {
            std
        } else {
            self.config.noise_scale
        }
    }

    /// One Byzantine row for the built-in attacks.
    pub fn attack_payload(
        &self,
        ctx: &AttackContext<'_>,
        dim: usize,
        rng: &mut dyn RngCore,
    ) -> Result<ParamVector> {
        if let Some(s) = &self.strategy {
            return Ok(s.payload(ctx, rng));
        }
        match self.config.attack {
            AttackKind::None | AttackKind::RandomAction => ctx.own.cloned().ok_or_else(|| {
                Error::config(format!(
                    "no protocol value for Byzantine sender {}",
                    ctx.sender
                ))
            }),
            AttackKind::LargeNoise => {
                let normal = Normal::new(0.0, self.noise_std(ctx.honest, dim))
                    .map_err(|e| Error::config(format!("noise distribution: {e}")))?;
                Ok(ParamVector::from_vec(
                    (0..dim).map(|_| normal.sample(rng)).collect(),
                ))
            }
            AttackKind::AvgZero => {
                // b = −(1/f) Σ_honest g, so the average over all K rows is 0.
                let mut b = ParamVector::zeros(dim);
                for (_, v) in ctx.honest {
                    b.add_assign(v);
                }
                b.scale(-1.0 / ctx.byzantine_count.max(1) as f64);
                Ok(b)
            }
        }
    }

    /// Mailboxes for `recipients`. `payloads[k]` is agent k's protocol value;
    /// it must be present for honest agents and may be present for Byzantine
    /// ones.
    pub fn build_mailboxes(
        &self,
        payloads: &[Option<ParamVector>],
        byzantine: &[usize],
        round: usize,
        phase: Phase,
        recipients: &[usize],
    ) -> Result<Vec<RoundMailbox>> {
        let k = payloads.len();
        let honest: Vec<(usize, &ParamVector)> = payloads
            .iter()
            .enumerate()
            .filter(|(i, _)| !byzantine.contains(i))
            .map(|(i, p)| {
                p.as_ref()
                    .map(|v| (i, v))
                    .ok_or_else(|| Error::config(format!("honest agent {i} has no payload")))
            })
            .collect::<Result<_>>()?;
        let dim = honest
            .first()
            .map(|(_, v)| v.len())
            .or_else(|| payloads.iter().flatten().next().map(|v| v.len()))
            .unwrap_or(0);

        // rows[recipient_idx][byz_idx]
        let mut byz_rows: Vec<Vec<ParamVector>> =
            vec![Vec::with_capacity(byzantine.len()); recipients.len()];
        let tag = phase.tag();
        for &sender in byzantine {
            let mut rng = stream(self.root_seed, sender as u64, &tag, round as u64);
            for (ri, &recipient) in recipients.iter().enumerate() {
                let ctx = AttackContext {
                    round,
                    phase,
                    sender,
                    recipient,
                    honest: &honest,
                    own: payloads[sender].as_ref(),
                    byzantine_count: byzantine.len(),
                };
                let row = self.attack_payload(&ctx, dim, &mut rng)?;
                row.check_dim(dim)?;
                byz_rows[ri].push(row);
            }
        }

        Ok(recipients
            .iter()
            .zip(byz_rows)
            .map(|(&recipient, rows)| {
                let mut rows = rows.into_iter();
                let entries = (0..k)
                    .map(|sender| {
                        let v = if byzantine.contains(&sender) {
                            rows.next().expect("one row per Byzantine sender")
                        } else {
                            payloads[sender].clone().expect("checked above")
                        };
                        (sender, v)
                    })
                    .collect();
                RoundMailbox { recipient, entries }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(xs: &[f64]) -> Vec<Option<ParamVector>> {
        xs.iter()
            .map(|&x| Some(ParamVector::from_vec(vec![x])))
            .collect()
    }

    fn adversary(attack: AttackKind, f: usize, k: usize) -> Adversary {
        let config = AdversaryConfig {
            attack,
            byzantine_count: f,
            ..Default::default()
        };
        Adversary::new(config, k, (0..k).collect(), 0.5, 17).unwrap()
    }

    #[test]
    fn no_byzantines_means_empty_set() {
        let adv = adversary(AttackKind::AvgZero, 0, 5);
        assert!(adv.byzantine_set(0).is_empty());
        assert!(adv.byzantine_set(99).is_empty());
    }

    #[test]
    fn static_set_is_fixed() {
        let adv = adversary(AttackKind::LargeNoise, 2, 7);
        let first = adv.byzantine_set(0);
        assert_eq!(first.len(), 2);
        for t in 1..50 {
            assert_eq!(adv.byzantine_set(t), first);
        }
    }

    #[test]
    fn rejects_too_many_byzantines() {
        let config = AdversaryConfig {
            byzantine_count: 7,
            ..Default::default()
        };
        assert!(Adversary::new(config, 13, (0..13).collect(), 0.25, 0).is_err());
        let config = AdversaryConfig {
            byzantine_count: 3,
            ..Default::default()
        };
        assert!(Adversary::new(config, 13, (0..13).collect(), 0.25, 0).is_ok());
        let config = AdversaryConfig {
            byzantine_count: 2,
            ..Default::default()
        };
        assert!(Adversary::new(config, 5, vec![1], 0.5, 0).is_err());
    }

    #[test]
    fn avg_zero_forces_zero_average() {
        // Honest {1, 3}, one Byzantine sender: b = -4.
        let adv = adversary(AttackKind::AvgZero, 1, 3);
        let byz = adv.byzantine_set(0);
        let mut values = vec![1.0, 3.0];
        values.insert(byz[0], f64::NAN);
        let mut payloads = scalars(&values);
        payloads[byz[0]] = None;
        let boxes = adv
            .build_mailboxes(&payloads, &byz, 0, Phase::Gradient, &[0, 1, 2])
            .unwrap();
        for mb in boxes {
            assert_eq!(mb.entries[byz[0]].1[0], -4.0);
            let total: f64 = mb.entries.iter().map(|(_, v)| v[0]).sum();
            assert!(total.abs() < 1e-12);
        }
    }

    #[test]
    fn passthrough_sends_own_value() {
        let adv = adversary(AttackKind::None, 1, 3);
        let byz = adv.byzantine_set(0);
        let payloads = scalars(&[1.0, 2.0, 3.0]);
        let boxes = adv
            .build_mailboxes(&payloads, &byz, 0, Phase::Gradient, &[0, 1, 2])
            .unwrap();
        for mb in &boxes {
            let got: Vec<Option<ParamVector>> =
                mb.entries.iter().map(|(_, v)| Some(v.clone())).collect();
            assert_eq!(got, payloads);
        }
    }

    #[test]
    fn passthrough_without_value_is_an_error() {
        let adv = adversary(AttackKind::None, 1, 3);
        let byz = adv.byzantine_set(0);
        let mut payloads = scalars(&[1.0, 2.0, 3.0]);
        payloads[byz[0]] = None;
        assert!(adv
            .build_mailboxes(&payloads, &byz, 0, Phase::Gradient, &[0])
            .is_err());
    }

    struct RecipientEcho;
    impl ByzantineStrategy for RecipientEcho {
        fn payload(&self, ctx: &AttackContext<'_>, _rng: &mut dyn RngCore) -> ParamVector {
            ParamVector::from_vec(vec![1000.0 + ctx.recipient as f64])
        }
    }

    #[test]
    fn mailboxes_differ_only_in_byzantine_rows() {
        let adv = adversary(AttackKind::None, 2, 6).with_strategy(Arc::new(RecipientEcho));
        let byz = adv.byzantine_set(3);
        let payloads = scalars(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let boxes = adv
            .build_mailboxes(&payloads, &byz, 3, Phase::Agreement(0), &[0, 1, 2, 3, 4, 5])
            .unwrap();
        for a in &boxes {
            for b in &boxes {
                for sender in 0..6 {
                    let same = a.entries[sender].1 == b.entries[sender].1;
                    if byz.contains(&sender) {
                        assert_eq!(same, a.recipient == b.recipient);
                    } else {
                        assert!(same);
                    }
                }
            }
        }
    }
}
