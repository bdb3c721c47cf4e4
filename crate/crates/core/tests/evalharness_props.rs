use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tars_lab::encoders::{TokenSeq, BOS, EOS};
use tars_lab::evalharness::bench::{description_metrics, eval_scenes};
use tars_lab::evalharness::{
    ablation_sweep, build_questions, median, pope_probe, run_benchmark, AblationAxis,
    ConstantResponder, Experiment, MetricsAccumulator, NegativeSampler, OracleResponder,
    RandomResponder, ResponseRecord, RunOutcome,
};
use tars_lab::policy::ModelConfig;
use tars_lab::synthdata::{build_world, WorldConfig, WorldSpec};
use tars_lab::trainer::TrainConfig;

fn world() -> WorldSpec {
    build_world(&WorldConfig::default(), 11).unwrap()
}

fn random_record(rng: &mut ChaCha8Rng, w: &WorldSpec) -> ResponseRecord {
    let n = w.config.n_objects;
    let k = rng.random_range(1..=w.config.max_objects_per_scene);
    let ids: Vec<usize> = (0..n).collect();
    let truth: BTreeSet<usize> = ids.choose_multiple(rng, k).copied().collect();
    let mut response = Vec::new();
    for _ in 0..rng.random_range(0..6) {
        if rng.random_bool(0.7) {
            response.push(w.name_token(rng.random_range(0..n)));
        } else {
            response.push(*w.vocab.fillers.choose(rng).unwrap());
        }
    }
    response.push(EOS);
    let mut query = vec![BOS];
    for p in &w.bias_pairs {
        if rng.random_bool(0.5) {
            query.push(p.trigger);
        }
    }
    ResponseRecord {
        query: TokenSeq::new(query),
        response: TokenSeq::new(response),
        truth,
    }
}

/// Per-response counting straight from the token ids.
fn brute_force(batch: &[ResponseRecord], w: &WorldSpec) -> (f64, f64, f64, f64) {
    let (mut bad, mut all, mut cover, mut hal, mut spurious) = (0, 0, 0.0, 0, 0);
    for r in batch {
        let mut named = BTreeSet::new();
        for &t in r.response.ids() {
            for o in &w.objects {
                if o.name_token == t {
                    named.insert(o.object_id);
                }
            }
        }
        let wrong = named.iter().filter(|o| !r.truth.contains(o)).count();
        bad += wrong;
        all += named.len();
        cover += named.iter().filter(|o| r.truth.contains(o)).count() as f64 / r.truth.len() as f64;
        hal += (wrong > 0) as usize;
        let biased = w.bias_pairs.iter().any(|p| {
            r.query.ids().contains(&p.trigger)
                && !r.truth.contains(&p.object_id)
                && named.contains(&p.object_id)
        });
        spurious += biased as usize;
    }
    let n = batch.len() as f64;
    let chair = if all == 0 {
        0.0
    } else {
        bad as f64 / all as f64
    };
    (chair, cover / n, hal as f64 / n, spurious as f64 / n)
}

#[test]
fn metrics_match_brute_force() {
    let w = world();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let size = rng.random_range(1..12);
        let batch: Vec<ResponseRecord> = (0..size).map(|_| random_record(&mut rng, &w)).collect();
        let want = brute_force(&batch, &w);
        let got = description_metrics(&batch, &w).unwrap();
        let mut acc = MetricsAccumulator::default();
        for r in &batch {
            acc.push(r, &w).unwrap();
        }
        let streamed = acc.finish().unwrap();
        for (a, b) in [
            (got.0, want.0),
            (got.1, want.1),
            (got.2, want.2),
            (got.3, want.3),
        ] {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(got, streamed);
        for v in [got.0, got.1, got.2, got.3] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn empty_batches_are_rejected() {
    let w = world();
    assert!(description_metrics(&[], &w).is_err());
    assert!(MetricsAccumulator::default().finish().is_err());
}

#[test]
fn oracle_scores_perfectly() {
    let w = world();
    let oracle = OracleResponder { world: &w };
    let m = run_benchmark(&oracle, &w, 300, 2, "h").unwrap();
    assert_eq!(
        (m.chair, m.cover, m.hal_rate, m.spurious_rate),
        (0.0, 1.0, 0.0, 0.0)
    );
    assert_eq!((m.pope_acc, m.pope_prec), (1.0, 1.0));
    assert_eq!(m.n_eval, 300);
}

#[test]
fn trivial_responders_sit_at_chance() {
    let w = world();
    let yes = run_benchmark(&ConstantResponder(true), &w, 500, 0, "h").unwrap();
    assert_eq!(yes.pope_acc, 0.5);
    assert_eq!(yes.pope_prec, 0.5);
    let no = run_benchmark(&ConstantResponder(false), &w, 500, 0, "h").unwrap();
    assert_eq!(no.pope_acc, 0.5);
    assert_eq!(no.pope_prec, 0.0);
    let coin = run_benchmark(&RandomResponder { seed: 4 }, &w, 1000, 0, "h").unwrap();
    assert!((coin.pope_acc - 0.5).abs() < 0.03, "{}", coin.pope_acc);
}

#[test]
fn benchmark_is_deterministic() {
    let w = world();
    let r = RandomResponder { seed: 1 };
    assert_eq!(
        run_benchmark(&r, &w, 200, 3, "h").unwrap(),
        run_benchmark(&r, &w, 200, 3, "h").unwrap()
    );
    assert!(run_benchmark(&r, &w, 0, 3, "h").is_err());
}

#[test]
fn eval_scenes_do_not_collide_with_training_ids() {
    let w = world();
    let scenes = eval_scenes(&w, 50, 0).unwrap();
    for (scene, truth, query) in &scenes {
        assert!(scene.scene_id >= 1_000_000);
        let ids: BTreeSet<usize> = scene.object_ids().into_iter().collect();
        assert_eq!(ids, truth.iter().copied().collect());
        assert_eq!(query.ids()[0], BOS);
    }
}

#[test]
fn pope_questions_are_balanced() {
    let w = world();
    let scenes: Vec<_> = eval_scenes(&w, 90, 0)
        .unwrap()
        .into_iter()
        .map(|(s, _, _)| s)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let qs = build_questions(&w, &scenes, &mut rng).unwrap();
    assert_eq!(qs.len(), 180);
    let mut per_sampler = [0usize; 3];
    for q in &qs {
        let present = scenes[q.scene_index].object_ids().contains(&q.object_id);
        assert_eq!(present, q.present);
        assert_eq!(
            q.query.ids(),
            &[BOS, w.vocab.ask, w.name_token(q.object_id)]
        );
        match q.sampler {
            None => assert!(q.present),
            Some(s) => {
                assert!(!q.present);
                per_sampler[s as usize] += 1;
                if s == NegativeSampler::Adversarial {
                    let biased: Vec<usize> = w.bias_pairs.iter().map(|p| p.object_id).collect();
                    let absent_biased = biased
                        .iter()
                        .any(|b| !scenes[q.scene_index].object_ids().contains(b));
                    assert!(!absent_biased || biased.contains(&q.object_id));
                }
            }
        }
    }
    assert_eq!(per_sampler, [30, 30, 30]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (acc, prec) = pope_probe(&OracleResponder { world: &w }, &scenes, &w, &mut rng).unwrap();
    assert_eq!((acc, prec), (1.0, 1.0));
}

#[test]
fn median_handles_both_parities() {
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
}

fn tiny_sweep_setup() -> (TrainConfig, Experiment) {
    let wc = WorldConfig::default();
    let base = TrainConfig {
        epochs: 1,
        model: ModelConfig {
            vocab_size: wc.vocab_size,
            d_model: 8,
            d_hidden: 8,
            max_len: 24,
            d_raw: wc.feature_dim,
        },
        ..TrainConfig::default()
    };
    let exp = Experiment {
        world: wc,
        n_train: 12,
        n_eval: 6,
    };
    (base, exp)
}

#[test]
fn sweep_produces_one_row_per_value() {
    let (base, exp) = tiny_sweep_setup();
    let values = [0.0, 0.2, -1.0];
    let table = ablation_sweep(AblationAxis::Lambda, &values, &base, &[0, 1, 2], &exp).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert_eq!(
        table.runs.iter().map(Vec::len).collect::<Vec<_>>(),
        vec![3, 3, 3]
    );
    for (row, v) in table.rows.iter().zip(values) {
        assert_eq!(row.axis_value, v);
        assert_eq!(row.seed_count + row.failed, 3);
    }
    let bad = &table.rows[2];
    assert_eq!((bad.seed_count, bad.failed), (0, 3));
    assert!(bad.chair.is_none());
    assert!(table.runs[2]
        .iter()
        .all(|r| matches!(r, RunOutcome::Failed { .. })));
    assert!(table.rows[0].chair.is_some());
    assert!(table.render().contains("FAILED"));
    assert_eq!(table.to_jsonl().unwrap().lines().count(), 3);
}

#[test]
fn sweep_needs_three_values_and_seeds() {
    let (base, exp) = tiny_sweep_setup();
    assert!(ablation_sweep(AblationAxis::Omega, &[1e-3, 1e-2], &base, &[0, 1, 2], &exp).is_err());
    assert!(ablation_sweep(
        AblationAxis::Omega,
        &[1e-4, 1e-3, 1e-2],
        &base,
        &[0, 1],
        &exp
    )
    .is_err());
}
