//! Balanced yes/no existence probe.
//!
//! Each scene contributes one question about a present object and one about
//! an absent object. Absent objects rotate through three samplers by scene
//! index: uniform, most frequent across the probed scenes, and
//! bias-adversarial (an absent biased object when one exists).

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Responder;
use crate::encoders::{TokenSeq, VisualScene, BOS};
use crate::error::{Error, Result};
use crate::synthdata::WorldSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSampler {
    Random,
    Popular,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub scene_index: usize,
    pub object_id: usize,
    pub present: bool,
    pub sampler: Option<NegativeSampler>,
    pub query: TokenSeq,
}

pub fn existence_query(world: &WorldSpec, object_id: usize) -> TokenSeq {
    TokenSeq::new(vec![BOS, world.vocab.ask, world.name_token(object_id)])
}

/// Builds two questions per scene, positives and negatives interleaved.
pub fn build_questions<R: Rng + ?Sized>(
    world: &WorldSpec,
    scenes: &[VisualScene],
    rng: &mut R,
) -> Result<Vec<PopeQuestion>> {
    let n_objects = world.config.n_objects;
    let mut freq = vec![0usize; n_objects];
    for s in scenes {
        for id in s.object_ids() {
            freq[id] += 1;
        }
    }
    let mut by_popularity: Vec<usize> = (0..n_objects).collect();
    by_popularity.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));

    let mut out = Vec::with_capacity(scenes.len() * 2);
    for (i, scene) in scenes.iter().enumerate() {
        let present = scene.object_ids();
        let absent: Vec<usize> = (0..n_objects).filter(|o| !present.contains(o)).collect();
        if absent.is_empty() {
            return Err(Error::contract(format!(
                "scene {} has no absent object to probe",
                scene.scene_id
            )));
        }
        let positive = *present.choose(rng).expect("scenes are non-empty");
        let popular = || {
            *by_popularity
                .iter()
                .find(|o| absent.contains(o))
                .expect("absent is non-empty")
        };
        let sampler = match i % 3 {
            0 => NegativeSampler::Random,
            1 => NegativeSampler::Popular,
            _ => NegativeSampler::Adversarial,
        };
        let negative = match sampler {
            NegativeSampler::Random => *absent.choose(rng).expect("non-empty"),
            NegativeSampler::Popular => popular(),
            NegativeSampler::Adversarial => {
                let biased: Vec<usize> = world
                    .bias_pairs
                    .iter()
                    .map(|p| p.object_id)
                    .filter(|o| absent.contains(o))
                    .collect();
                biased.choose(rng).copied().unwrap_or_else(popular)
            }
        };
        out.push(PopeQuestion {
            scene_index: i,
            object_id: positive,
            present: true,
            sampler: None,
            query: existence_query(world, positive),
        });
        out.push(PopeQuestion {
            scene_index: i,
            object_id: negative,
            present: false,
            sampler: Some(sampler),
            query: existence_query(world, negative),
        });
    }
    Ok(out)
}

/// Accuracy and precision of "yes" answers. Precision is 0 when the
/// responder never says yes.
pub fn pope_probe<R: Rng + ?Sized>(
    responder: &dyn Responder,
    scenes: &[VisualScene],
    world: &WorldSpec,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let questions = build_questions(world, scenes, rng)?;
    if questions.is_empty() {
        return Err(Error::contract("probe needs at least one scene"));
    }
    let (mut correct, mut tp, mut fp) = (0usize, 0usize, 0usize);
    for q in &questions {
        let yes = responder.answer(&scenes[q.scene_index], &q.query)?;
        if yes == q.present {
            correct += 1;
        }
        match (yes, q.present) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            _ => {}
        }
    }
    let acc = correct as f64 / questions.len() as f64;
    let prec = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    Ok((acc, prec))
}
