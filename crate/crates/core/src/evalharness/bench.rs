use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{corpus_chair, coverage, hal_rate, spurious_rate, ResponseRecord};
use super::pope::pope_probe;
use super::Responder;
use crate::encoders::VisualScene;
use crate::error::{Error, Result};
use crate::rng;
use crate::synthdata::{description_query, sample_scene, WorldSpec};

/// Evaluation scenes live in their own seed and id namespace so they never
/// collide with training examples.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

/// One evaluation row. `spurious_rate` is a planted-bias proxy, not a
/// cognition score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub chair: f64,
    pub cover: f64,
    pub hal_rate: f64,
    pub spurious_rate: f64,
    pub pope_acc: f64,
    pub pope_prec: f64,
    pub n_eval: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("chair", self.chair),
            ("cover", self.cover),
            ("hal_rate", self.hal_rate),
            ("spurious_rate", self.spurious_rate),
            ("pope_acc", self.pope_acc),
            ("pope_prec", self.pope_prec),
        ];
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.n_eval == 0 {
            return Err(Error::contract("n_eval must be at least 1"));
        }
        Ok(())
    }
}

/// Running totals for the description metrics, fed one response at a time.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    n: usize,
    hallucinated_mentions: usize,
    mentions: usize,
    cover_sum: f64,
    hallucinating: usize,
    spurious: usize,
}

impl MetricsAccumulator {
    pub fn push(&mut self, record: &ResponseRecord, world: &WorldSpec) -> Result<()> {
        let mentions = record.mentions(world);
        self.n += 1;
        self.mentions += mentions.len();
        self.hallucinated_mentions += mentions.difference(&record.truth).count();
        self.cover_sum += coverage(&mentions, &record.truth)?;
        if !mentions.is_subset(&record.truth) {
            self.hallucinating += 1;
        }
        if spurious_rate(std::slice::from_ref(record), world)? > 0.0 {
            self.spurious += 1;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// (chair, cover, hal_rate, spurious_rate)
    pub fn finish(&self) -> Result<(f64, f64, f64, f64)> {
        if self.n == 0 {
            return Err(Error::contract("no responses were accumulated"));
        }
        let n = self.n as f64;
        Ok((
            self.hallucinated_mentions as f64 / self.mentions.max(1) as f64,
            self.cover_sum / n,
            self.hallucinating as f64 / n,
            self.spurious as f64 / n,
        ))
    }
}

/// Same four numbers as the accumulator, computed over the whole batch.
pub fn description_metrics(
    batch: &[ResponseRecord],
    world: &WorldSpec,
) -> Result<(f64, f64, f64, f64)> {
    let pairs: Vec<(BTreeSet<usize>, BTreeSet<usize>)> = batch
        .iter()
        .map(|r| (r.mentions(world), r.truth.clone()))
        .collect();
    let hal = hal_rate(&pairs)?;
    let mut cover_sum = 0.0;
    for (m, t) in &pairs {
        cover_sum += coverage(m, t)?;
    }
    Ok((
        corpus_chair(&pairs),
        cover_sum / pairs.len() as f64,
        hal,
        spurious_rate(batch, world)?,
    ))
}

/// Held-out scenes with their description queries.
pub fn eval_scenes(
    world: &WorldSpec,
    n_eval: usize,
    seed: u64,
) -> Result<Vec<(VisualScene, Vec<usize>, crate::encoders::TokenSeq)>> {
    let eval_seed = seed.wrapping_add(EVAL_SEED_OFFSET);
    (0..n_eval as u64)
        .map(|i| {
            let mut r = rng::stream(eval_seed, "eval", &[i]);
            let (scene, truth) = sample_scene(world, EVAL_SEED_OFFSET + i, &mut r)?;
            let query = description_query(world, &truth, &mut r);
            Ok((scene, truth, query))
        })
        .collect()
}

/// Decodes a description for every held-out scene.
pub fn collect_responses(
    responder: &dyn Responder,
    world: &WorldSpec,
    n_eval: usize,
    seed: u64,
) -> Result<(Vec<VisualScene>, Vec<ResponseRecord>)> {
    let items = eval_scenes(world, n_eval, seed)?;
    let records = items
        .par_iter()
        .map(|(scene, truth, query)| {
            Ok(ResponseRecord {
                query: query.clone(),
                response: responder.describe(scene, query)?,
                truth: truth.iter().copied().collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((items.into_iter().map(|(s, _, _)| s).collect(), records))
}

/// Full evaluation: description metrics over `n_eval` fresh scenes plus a
/// two-question-per-scene existence probe on the same scenes.
pub fn run_benchmark(
    responder: &dyn Responder,
    world: &WorldSpec,
    n_eval: usize,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsRecord> {
    if n_eval == 0 {
        return Err(Error::contract("n_eval must be at least 1"));
    }
    let (scenes, records) = collect_responses(responder, world, n_eval, seed)?;
    let mut acc = MetricsAccumulator::default();
    for r in &records {
        acc.push(r, world)?;
    }
    let (chair, cover, hal, spurious) = acc.finish()?;
    let mut probe_rng = rng::stream(seed.wrapping_add(EVAL_SEED_OFFSET), "pope", &[]);
    let (pope_acc, pope_prec) = pope_probe(responder, &scenes, world, &mut probe_rng)?;
    let record = MetricsRecord {
        chair,
        cover,
        hal_rate: hal,
        spurious_rate: spurious,
        pope_acc,
        pope_prec,
        n_eval,
        config_hash: config_hash.to_string(),
        seed,
    };
    record.validate()?;
    Ok(record)
}
