mod common;

use std::f64::consts::LN_2;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{micro_config, naive_spectrum, neg_log_sigmoid, random_scene, random_tokens};
use tars_lab::encoders::{TokenSeq, VisualScene};
use tars_lab::objective::{
    dpo_loss, freq_loss, spectral_preference, tars_loss, AlignmentLoss, LossWeights,
    PreferenceInputs, Reduction, SPECTRAL_FLOOR,
};
use tars_lab::policy::{clone_frozen, forward_values, init_params, response_logprob, ModelParams};

struct Case {
    policy: ModelParams,
    reference: ModelParams,
    scene: VisualScene,
    query: TokenSeq,
    perturbed: TokenSeq,
    chosen: TokenSeq,
    rejected: TokenSeq,
}

fn case(seed: u64) -> Case {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = random_scene(&mut rng, cfg.d_raw);
    let qn = rng.random_range(1..5);
    let query = random_tokens(&mut rng, cfg.vocab_size, qn);
    let perturbed = random_tokens(&mut rng, cfg.vocab_size, qn);
    let wn = rng.random_range(1..7);
    let chosen = random_tokens(&mut rng, cfg.vocab_size, wn);
    let rn = rng.random_range(1..7);
    let rejected = random_tokens(&mut rng, cfg.vocab_size, rn);
    Case {
        policy: init_params(&cfg, seed * 2 + 1).unwrap(),
        reference: init_params(&cfg, seed * 2 + 2).unwrap(),
        scene,
        query,
        perturbed,
        chosen,
        rejected,
    }
}

impl Case {
    fn inputs(&self) -> PreferenceInputs<'_> {
        PreferenceInputs {
            scene: &self.scene,
            query: &self.query,
            perturbed: &self.perturbed,
            chosen: &self.chosen,
            rejected: &self.rejected,
        }
    }
}

fn expected_dpo(c: &Case, alpha: f64) -> f64 {
    let lp =
        |p: &ModelParams, y: &TokenSeq| response_logprob(p, &c.scene, &c.perturbed, y).unwrap();
    let margin = (lp(&c.policy, &c.chosen) - lp(&c.reference, &c.chosen))
        - (lp(&c.policy, &c.rejected) - lp(&c.reference, &c.rejected));
    neg_log_sigmoid(alpha * margin)
}

fn expected_freq(c: &Case, beta: f64, reduction: Reduction) -> f64 {
    let len = c.chosen.len().max(c.rejected.len());
    let (_, ha) = forward_values(&c.policy, &c.scene, &c.perturbed, &c.chosen).unwrap();
    let (_, hb) = forward_values(&c.reference, &c.scene, &c.query, &c.chosen).unwrap();
    let (_, hc) = forward_values(&c.reference, &c.scene, &c.query, &c.rejected).unwrap();
    let (a, b, cc) = (
        naive_spectrum(&ha, len),
        naive_spectrum(&hb, len),
        naive_spectrum(&hc, len),
    );
    let terms: Vec<f64> = (0..len)
        .filter(|&k| a[k] >= SPECTRAL_FLOOR && b[k] >= SPECTRAL_FLOOR && cc[k] >= SPECTRAL_FLOOR)
        .map(|k| (a[k] / b[k]).ln() - (a[k] / cc[k]).ln())
        .collect();
    let s: f64 = terms.iter().sum();
    let r = match reduction {
        Reduction::Mean => s / terms.len() as f64,
        Reduction::Sum => s,
    };
    neg_log_sigmoid(beta * r)
}

#[test]
fn dpo_matches_closed_form() {
    for seed in 0..40 {
        let c = case(seed);
        let reference = clone_frozen(&c.reference);
        for alpha in [0.1, 1.0, 3.0] {
            let got = dpo_loss(
                &c.policy,
                &reference,
                &c.scene,
                &c.perturbed,
                &c.chosen,
                &c.rejected,
                alpha,
            )
            .unwrap();
            let want = expected_dpo(&c, alpha);
            assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
            assert!(got.is_finite() && got > 0.0);
        }
    }
}

#[test]
fn dpo_is_ln2_at_the_reference() {
    for seed in 0..20 {
        let c = case(seed);
        let reference = clone_frozen(&c.policy);
        let got = dpo_loss(
            &c.policy,
            &reference,
            &c.scene,
            &c.perturbed,
            &c.chosen,
            &c.rejected,
            1.0,
        )
        .unwrap();
        assert!((got - LN_2).abs() < 1e-12);
    }
}

#[test]
fn freq_matches_naive_spectra() {
    for seed in 0..40 {
        let c = case(seed);
        let reference = clone_frozen(&c.reference);
        for reduction in [Reduction::Mean, Reduction::Sum] {
            let got = freq_loss(&c.policy, &reference, &c.inputs(), 0.7, reduction).unwrap();
            let want = expected_freq(&c, 0.7, reduction);
            assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn freq_is_ln2_when_responses_coincide() {
    for seed in 0..20 {
        let mut c = case(seed);
        c.rejected = c.chosen.clone();
        let reference = clone_frozen(&c.reference);
        let got = freq_loss(&c.policy, &reference, &c.inputs(), 1.0, Reduction::Mean).unwrap();
        assert!((got - LN_2).abs() < 1e-12);
    }
}

#[test]
fn total_combines_parts() {
    for seed in 0..20 {
        let c = case(seed);
        let reference = clone_frozen(&c.reference);
        for alignment in [AlignmentLoss::Spectral, AlignmentLoss::Contrastive] {
            let w = LossWeights {
                lambda: 0.35,
                alignment,
                ..LossWeights::default()
            };
            let b = tars_loss(&c.policy, &reference, &c.inputs(), &w).unwrap();
            assert!((b.total - (b.dpo + 0.35 * b.freq)).abs() < 1e-12);
            assert!(b.freq.is_finite() && b.freq >= 0.0);
            if c.chosen.len() > 1 {
                assert!(b.freq > 0.0);
            }

            let zero = LossWeights { lambda: 0.0, ..w };
            let b0 = tars_loss(&c.policy, &reference, &c.inputs(), &zero).unwrap();
            assert_eq!(b0.total, b0.dpo);
        }
    }
}

#[test]
fn identical_policies_give_two_ln2() {
    let mut c = case(5);
    c.rejected = c.chosen.clone();
    c.perturbed = c.query.clone();
    let reference = clone_frozen(&c.policy);
    let w = LossWeights {
        lambda: 1.0,
        ..LossWeights::default()
    };
    let b = tars_loss(&c.policy, &reference, &c.inputs(), &w).unwrap();
    assert!((b.total - 2.0 * LN_2).abs() < 1e-12);
}

#[test]
fn invalid_weights_are_rejected() {
    let c = case(1);
    let reference = clone_frozen(&c.reference);
    assert!(dpo_loss(
        &c.policy,
        &reference,
        &c.scene,
        &c.query,
        &c.chosen,
        &c.rejected,
        0.0
    )
    .is_err());
    assert!(freq_loss(&c.policy, &reference, &c.inputs(), -1.0, Reduction::Mean).is_err());
}

proptest! {
    #[test]
    fn spectral_preference_doubling_rival(
        a in prop::collection::vec(0.1f64..5.0, 1..10),
        scale in 0.1f64..3.0,
        beta in 0.1f64..4.0,
    ) {
        let b: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let c: Vec<f64> = b.iter().map(|v| 2.0 * v).collect();
        let mean = spectral_preference(&a, &b, &c, beta, Reduction::Mean).unwrap();
        prop_assert!((mean - neg_log_sigmoid(beta * LN_2)).abs() < 1e-10);
        let sum = spectral_preference(&a, &b, &c, beta, Reduction::Sum).unwrap();
        prop_assert!((sum - neg_log_sigmoid(beta * LN_2 * a.len() as f64)).abs() < 1e-10);
    }

    #[test]
    fn spectral_preference_is_monotone_in_beta(
        a in prop::collection::vec(0.1f64..5.0, 3),
        b in prop::collection::vec(0.1f64..5.0, 3),
        c in prop::collection::vec(0.1f64..5.0, 3),
    ) {
        let lo = spectral_preference(&a, &b, &c, 0.5, Reduction::Mean).unwrap();
        let hi = spectral_preference(&a, &b, &c, 1.5, Reduction::Mean).unwrap();
        let r: f64 = (0..3).map(|k| (c[k] / b[k]).ln()).sum::<f64>() / 3.0;
        if r > 0.0 {
            prop_assert!(hi <= lo);
        } else if r < 0.0 {
            prop_assert!(hi >= lo);
        }
    }
}
