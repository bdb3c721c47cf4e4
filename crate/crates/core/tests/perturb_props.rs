use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tars_lab::encoders::{
    EmbeddingTable, RelevanceScorer, SceneObject, TokenSeq, VisualScene, BOS, EOS, MASK,
    NUM_SPECIAL,
};
use tars_lab::numcore::Tensor;
use tars_lab::perturb::{
    apply_perturbation, perturb, perturbation_budget, select_agnostic_tokens, token_relevance,
    uncertainty_margin, PerturbMode, MARGIN_EPS,
};

const VOCAB: usize = 16;

fn scorer_and_scene() -> impl Strategy<Value = (RelevanceScorer, VisualScene)> {
    (
        prop::collection::vec(-1.0f64..1.0, 3 * 3),
        prop::collection::vec(-1.0f64..1.0, VOCAB * 3),
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..4),
    )
        .prop_map(|(proj, table, feats)| {
            let scorer = RelevanceScorer {
                proj: Tensor::matrix(3, 3, proj).unwrap(),
                table: EmbeddingTable {
                    weights: Tensor::matrix(VOCAB, 3, table).unwrap(),
                },
            };
            let objects = feats
                .into_iter()
                .enumerate()
                .map(|(i, feature)| SceneObject {
                    object_id: i,
                    feature,
                })
                .collect();
            (scorer, VisualScene::new(1, objects).unwrap())
        })
}

fn query() -> impl Strategy<Value = TokenSeq> {
    prop::collection::vec(NUM_SPECIAL..VOCAB, 0..10).prop_map(|body| {
        let mut ids = vec![BOS];
        ids.extend(body);
        ids.push(EOS);
        TokenSeq::new(ids)
    })
}

fn sorted_margin(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return MARGIN_EPS;
    }
    let mut s = p.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s[0] - s[1]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn token_relevance_is_column_max(data in prop::collection::vec(-1.0f64..1.0, 12)) {
        let s = Tensor::matrix(3, 4, data).unwrap();
        let p = token_relevance(&s).unwrap();
        prop_assert_eq!(p.len(), 4);
        for (j, &got) in p.iter().enumerate() {
            let m = [s.at(0, j), s.at(1, j), s.at(2, j)].into_iter().fold(f64::MIN, f64::max);
            prop_assert_eq!(got, m);
        }
    }

    #[test]
    fn margin_matches_sorting(p in prop::collection::vec(-1.0f64..1.0, 0..12)) {
        prop_assert_eq!(uncertainty_margin(&p), sorted_margin(&p));
        prop_assert!(uncertainty_margin(&p) >= 0.0);
    }

    #[test]
    fn selection_is_lowest_scores(
        p in prop::collection::vec(-1.0f64..1.0, 1..12),
        special_bits in prop::collection::vec(any::<bool>(), 12),
        budget in 0usize..14,
    ) {
        let special = &special_bits[..p.len()];
        let sel = select_agnostic_tokens(&p, budget, special).unwrap();
        let mut order: Vec<usize> = (0..p.len()).filter(|&i| !special[i]).collect();
        prop_assert_eq!(sel.no_eligible, order.is_empty());
        order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap().then(a.cmp(&b)));
        order.truncate(budget);
        order.sort();
        prop_assert_eq!(sel.indices, order);
    }

    #[test]
    fn budget_is_clamped(omega in 1e-6f64..1.0, margin in 0.0f64..2.0, eligible in 0usize..20) {
        let b = perturbation_budget(omega, margin, eligible).unwrap();
        prop_assert!(b >= 1);
        prop_assert!(b <= eligible.max(1));
        let raw = (omega / margin.max(MARGIN_EPS)).floor() as usize + 1;
        prop_assert_eq!(b, raw.min(eligible).max(1));
    }

    #[test]
    fn replace_never_keeps_original(q in query(), seed in any::<u64>()) {
        let positions: Vec<usize> = (0..q.len()).filter(|&i| !q.special_mask()[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = apply_perturbation(&q, &positions, PerturbMode::Replace, VOCAB, &mut rng).unwrap();
        for i in 0..q.len() {
            if positions.contains(&i) {
                prop_assert_ne!(out.ids()[i], q.ids()[i]);
                prop_assert!(out.ids()[i] >= NUM_SPECIAL && out.ids()[i] < VOCAB);
            } else {
                prop_assert_eq!(out.ids()[i], q.ids()[i]);
            }
        }
    }

    #[test]
    fn perturb_touches_only_the_agnostic_set((scorer, scene) in scorer_and_scene(), q in query(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, plan) = perturb(&scorer, &scene, &q, 1e-2, PerturbMode::Mask, VOCAB, &mut rng).unwrap();
        prop_assert_eq!(out.len(), q.len());
        prop_assert_eq!(plan.eligible, q.len() - 2);
        if plan.eligible > 0 {
            prop_assert_eq!(plan.agnostic_set.len(), plan.budget);
        } else {
            prop_assert!(plan.agnostic_set.is_empty());
        }
        for i in 0..q.len() {
            if plan.agnostic_set.contains(&i) {
                prop_assert_eq!(out.ids()[i], MASK);
                prop_assert!(!q.special_mask()[i]);
            } else {
                prop_assert_eq!(out.ids()[i], q.ids()[i]);
            }
        }
    }

    #[test]
    fn agnostic_set_grows_with_omega((scorer, scene) in scorer_and_scene(), q in query()) {
        let mut last = 0;
        for omega in [1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (_, plan) = perturb(&scorer, &scene, &q, omega, PerturbMode::Mask, VOCAB, &mut rng).unwrap();
            prop_assert!(plan.agnostic_set.len() >= last);
            last = plan.agnostic_set.len();
        }
    }
}

#[test]
fn all_special_query_is_untouched() {
    let scorer = RelevanceScorer {
        proj: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        table: EmbeddingTable {
            weights: Tensor::matrix(VOCAB, 2, vec![0.5; VOCAB * 2]).unwrap(),
        },
    };
    let scene = VisualScene::new(
        0,
        vec![SceneObject {
            object_id: 0,
            feature: vec![1.0, 0.0],
        }],
    )
    .unwrap();
    let q = TokenSeq::new(vec![BOS, EOS]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, plan) = perturb(
        &scorer,
        &scene,
        &q,
        0.1,
        PerturbMode::Replace,
        VOCAB,
        &mut rng,
    )
    .unwrap();
    assert_eq!(out, q);
    assert!(plan.agnostic_set.is_empty());
}

#[test]
fn non_positive_omega_is_rejected() {
    assert!(perturbation_budget(0.0, 0.1, 3).is_err());
    assert!(perturbation_budget(-1.0, 0.1, 3).is_err());
    assert!(perturbation_budget(f64::NAN, 0.1, 3).is_err());
}

#[test]
fn special_positions_cannot_be_perturbed() {
    let q = TokenSeq::new(vec![BOS, 5, EOS]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(apply_perturbation(&q, &[0], PerturbMode::Mask, VOCAB, &mut rng).is_err());
    assert!(apply_perturbation(&q, &[3], PerturbMode::Mask, VOCAB, &mut rng).is_err());
}
