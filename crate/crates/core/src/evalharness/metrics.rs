//! Set-based hallucination metrics over exact name-token mentions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoders::TokenSeq;
use crate::error::{Error, Result};
use crate::synthdata::WorldSpec;

/// One decoded description together with what the scene really contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub query: TokenSeq,
    pub response: TokenSeq,
    pub truth: BTreeSet<usize>,
}

impl ResponseRecord {
    pub fn mentions(&self, world: &WorldSpec) -> BTreeSet<usize> {
        world.mentions(&self.response).into_iter().collect()
    }
}

/// Fraction of mentioned objects that are not in the scene; 0 when nothing
/// is mentioned.
pub fn chair_score(mentions: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> f64 {
    let hallucinated = mentions.difference(truth).count();
    hallucinated as f64 / mentions.len().max(1) as f64
}

/// Fraction of scene objects that are mentioned.
pub fn coverage(mentions: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::contract("coverage needs a non-empty truth set"));
    }
    Ok(mentions.intersection(truth).count() as f64 / truth.len() as f64)
}

/// Fraction of responses with at least one hallucinated mention.
pub fn hal_rate(batch: &[(BTreeSet<usize>, BTreeSet<usize>)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("hal_rate needs at least one response"));
    }
    let bad = batch.iter().filter(|(m, t)| !m.is_subset(t)).count();
    Ok(bad as f64 / batch.len() as f64)
}

/// Fraction of responses that name a biased object which is absent from the
/// scene while its trigger appears in the query. Stands in for cognition
/// annotations, which a synthetic world does not have.
pub fn spurious_rate(batch: &[ResponseRecord], world: &WorldSpec) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("spurious_rate needs at least one response"));
    }
    let hits = batch
        .iter()
        .filter(|r| {
            let mentions = r.mentions(world);
            world.bias_pairs.iter().any(|p| {
                r.query.ids().contains(&p.trigger)
                    && !r.truth.contains(&p.object_id)
                    && mentions.contains(&p.object_id)
            })
        })
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Corpus-level object CHAIR: hallucinated mentions over all mentions.
pub fn corpus_chair(batch: &[(BTreeSet<usize>, BTreeSet<usize>)]) -> f64 {
    let (bad, all) = batch.iter().fold((0usize, 0usize), |(b, a), (m, t)| {
        (b + m.difference(t).count(), a + m.len())
    });
    bad as f64 / all.max(1) as f64
}
