use std::sync::Arc;

use fedpg_core::adversary::{Adversary, AdversaryConfig, AttackContext, ByzantineStrategy};
use fedpg_core::agreement::{avg_agree_round, run_agreement, AgreementConfig, AgreementKind};
use fedpg_core::param::{self, ParamVector};
use proptest::prelude::*;
use rand::{Rng, RngCore};

/// Sends each recipient a different point just outside the honest cloud.
struct Splitter;

impl ByzantineStrategy for Splitter {
    fn payload(&self, ctx: &AttackContext<'_>, rng: &mut dyn RngCore) -> ParamVector {
        let honest: Vec<&ParamVector> = ctx.honest.iter().map(|(_, v)| *v).collect();
        let centre = param::mean(honest.iter().copied()).unwrap();
        let diam = param::diameter(honest.iter().copied()).max(1e-12);
        let mut out = centre.clone();
        let sign = if ctx.recipient % 2 == 0 { 1.0 } else { -1.0 };
        for x in out.as_mut_slice() {
            *x += sign * diam * rng.random_range(0.0..0.6);
        }
        out
    }
}

fn adversary(k: usize, f: usize) -> Adversary {
    let cfg = AdversaryConfig {
        byzantine_count: f,
        ..Default::default()
    };
    Adversary::new(cfg, k, (0..k).collect(), 0.25, 17)
        .unwrap()
        .with_strategy(Arc::new(Splitter))
}

fn honest_diameter(values: &[ParamVector], byz: &[usize]) -> f64 {
    param::diameter(
        values
            .iter()
            .enumerate()
            .filter(|(i, _)| !byz.contains(i))
            .map(|(_, v)| v),
    )
}

#[test]
fn alpha_bar_limits() {
    assert!(AgreementConfig::new(AgreementKind::Mda, 2, 0.25)
        .validate()
        .is_err());
    assert!(AgreementConfig::new(AgreementKind::Mda, 2, 0.24)
        .validate()
        .is_ok());
    assert!(AgreementConfig::new(AgreementKind::Gda, 2, 0.2)
        .validate()
        .is_err());
    assert_eq!(
        AgreementConfig::new(AgreementKind::Mda, 2, 0.24).subset_size(13),
        10
    );
}

#[test]
fn no_agreement_is_the_identity() {
    let values: Vec<ParamVector> = (0..4)
        .map(|i| ParamVector::from_vec(vec![i as f64]))
        .collect();
    let out = run_agreement(
        &values,
        &Adversary::honest(4),
        &[],
        0,
        &AgreementConfig::none(),
    )
    .unwrap();
    assert_eq!(out, values);
}

#[test]
fn consensus_is_a_fixed_point() {
    let v = ParamVector::from_vec(vec![0.3, -1.0, 7.25]);
    for kind in [AgreementKind::Mda, AgreementKind::Gda] {
        let cfg = AgreementConfig::new(kind, 3, 0.15);
        let out = run_agreement(&vec![v.clone(); 6], &Adversary::honest(6), &[], 4, &cfg).unwrap();
        assert!(out.iter().all(|x| *x == v));
        assert_eq!(avg_agree_round(&v, &vec![v.clone(); 6], &cfg).unwrap(), v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Honest diameter halves per sub-round against a per-recipient splitting adversary.
    #[test]
    fn contraction_under_attack(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 7),
        gda in any::<bool>(),
        kappa in 1usize..4,
        round in 0usize..1000,
    ) {
        let values: Vec<ParamVector> = rows.into_iter().map(ParamVector::from_vec).collect();
        let adv = adversary(7, 1);
        let byz = adv.byzantine_set(round);
        let cfg = if gda {
            AgreementConfig::new(AgreementKind::Gda, kappa, 0.17)
        } else {
            AgreementConfig::new(AgreementKind::Mda, kappa, 0.2)
        };
        let before = honest_diameter(&values, &byz);
        let out = run_agreement(&values, &adv, &byz, round, &cfg).unwrap();
        let after = honest_diameter(&out, &byz);
        prop_assert!(after <= before / 2f64.powi(kappa as i32) + 1e-9, "{after} vs {before}");
    }

    /// Honest outputs stay within the honest inputs' bounding box widened by their diameter.
    #[test]
    fn bounded_drift(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 7), round in 0usize..1000) {
        let values: Vec<ParamVector> = rows.into_iter().map(ParamVector::from_vec).collect();
        let adv = adversary(7, 1);
        let byz = adv.byzantine_set(round);
        let cfg = AgreementConfig::new(AgreementKind::Mda, 2, 0.2);
        let honest_in: Vec<&ParamVector> = values.iter().enumerate().filter(|(i, _)| !byz.contains(i)).map(|(_, v)| v).collect();
        let mean_in = param::mean(honest_in.iter().copied()).unwrap();
        let diam = param::diameter(honest_in.iter().copied());
        let out = run_agreement(&values, &adv, &byz, round, &cfg).unwrap();
        let honest_out: Vec<&ParamVector> = out.iter().enumerate().filter(|(i, _)| !byz.contains(i)).map(|(_, v)| v).collect();
        let mean_out = param::mean(honest_out.iter().copied()).unwrap();
        prop_assert!(mean_out.dist(&mean_in) <= 2.0 * diam + 1e-9);
    }
}
