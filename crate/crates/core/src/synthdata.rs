//! Synthetic multimodal world with planted query-side spurious correlations.
//!
//! Each bias pair ties a trigger token to an object. When that object is
//! absent from a scene, the query carries the trigger with probability `rho`,
//! and the dispreferred response hallucinates the object with probability
//! `rho`. Responses are flat enumerations of object-name tokens in object-id
//! order followed by EOS, so mention parsing is exact.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{
    EmbeddingTable, RelevanceScorer, SceneObject, TokenSeq, VisualScene, BOS, EOS, NUM_SPECIAL,
};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_objects: usize,
    pub n_bias_pairs: usize,
    /// Trigger/biased-object co-occurrence rate.
    pub rho: f64,
    pub feature_dim: usize,
    pub vocab_size: usize,
    /// Std-dev of per-object feature noise before renormalization.
    pub feature_noise: f64,
    pub max_objects_per_scene: usize,
    /// Filler tokens per query template.
    pub template_len: usize,
    pub n_templates: usize,
    /// Weight of the direction shared by every prototype.
    pub shared_visual: f64,
    /// Spread of filler scorer embeddings around the shared direction.
    pub filler_spread: f64,
    pub max_prototype_cosine: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_objects: 8,
            n_bias_pairs: 2,
            rho: 0.8,
            feature_dim: 16,
            vocab_size: 64 + NUM_SPECIAL,
            feature_noise: 0.05,
            max_objects_per_scene: 4,
            template_len: 4,
            n_templates: 6,
            shared_visual: 0.5,
            filler_spread: 0.02,
            max_prototype_cosine: 0.8,
        }
    }
}

/// Token-id layout of the content vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub yes: usize,
    pub no: usize,
    /// Leading token of existence questions.
    pub ask: usize,
    /// Name token per object id.
    pub names: Vec<usize>,
    pub triggers: Vec<usize>,
    pub fillers: Vec<usize>,
}

impl Vocabulary {
    fn layout(cfg: &WorldConfig) -> Result<Self> {
        let mut next = NUM_SPECIAL;
        let mut take = |n: usize| {
            let r: Vec<usize> = (next..next + n).collect();
            next += n;
            r
        };
        let yes = take(1)[0];
        let no = take(1)[0];
        let ask = take(1)[0];
        let names = take(cfg.n_objects);
        let triggers = take(cfg.n_bias_pairs);
        if next + cfg.template_len > cfg.vocab_size {
            return Err(Error::Generation(format!(
                "vocabulary of {} cannot hold {} names, {} triggers and {} fillers",
                cfg.vocab_size, cfg.n_objects, cfg.n_bias_pairs, cfg.template_len
            )));
        }
        let fillers = (next..cfg.vocab_size).collect();
        Ok(Vocabulary {
            size: cfg.vocab_size,
            yes,
            no,
            ask,
            names,
            triggers,
            fillers,
        })
    }

    /// Object id named by `token`, if any.
    pub fn object_of(&self, token: usize) -> Option<usize> {
        let first = *self.names.first()?;
        (token >= first && token < first + self.names.len()).then(|| token - first)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogObject {
    pub object_id: usize,
    pub name_token: usize,
    pub prototype: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasPair {
    pub trigger: usize,
    pub object_id: usize,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub objects: Vec<CatalogObject>,
    pub bias_pairs: Vec<BiasPair>,
    /// Filler-token patterns used as query skeletons.
    pub templates: Vec<Vec<usize>>,
    /// Unit direction shared by all prototypes (the "this is an image" axis).
    pub shared_direction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub example_id: u64,
    pub scene: VisualScene,
    pub query: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    /// Sorted object ids present in the scene.
    pub truth_objects: Vec<usize>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

const MAX_WORLD_RETRIES: usize = 100;

/// Builds the catalog, vocabulary layout, bias pairs and query templates.
pub fn build_world(cfg: &WorldConfig, seed: u64) -> Result<WorldSpec> {
    if cfg.n_objects < 4 {
        return Err(Error::Generation("need at least 4 objects".into()));
    }
    if cfg.n_bias_pairs == 0 || cfg.n_bias_pairs > cfg.n_objects {
        return Err(Error::Generation(
            "need between 1 and n_objects bias pairs".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.rho) {
        return Err(Error::Generation(format!(
            "rho must lie in [0, 1], got {}",
            cfg.rho
        )));
    }
    if cfg.max_objects_per_scene == 0 || cfg.max_objects_per_scene >= cfg.n_objects {
        return Err(Error::Generation(
            "scenes must hold between 1 and n_objects - 1 objects".into(),
        ));
    }
    let vocab = Vocabulary::layout(cfg)?;
    let mut r = rng::stream(seed, "world", &[]);
    let dim = cfg.feature_dim;

    for _ in 0..MAX_WORLD_RETRIES {
        let shared = unit(gaussian(&mut r, dim, 1.0));
        let prototypes: Vec<Vec<f64>> = (0..cfg.n_objects)
            .map(|_| {
                let own = unit(gaussian(&mut r, dim, 1.0));
                unit(
                    own.iter()
                        .zip(&shared)
                        .map(|(o, s)| o + cfg.shared_visual * s)
                        .collect(),
                )
            })
            .collect();
        let separated = (0..cfg.n_objects).all(|i| {
            (i + 1..cfg.n_objects)
                .all(|j| cosine(&prototypes[i], &prototypes[j]) < cfg.max_prototype_cosine)
        });
        if !separated {
            continue;
        }

        let objects = prototypes
            .into_iter()
            .enumerate()
            .map(|(i, prototype)| CatalogObject {
                object_id: i,
                name_token: vocab.names[i],
                prototype,
            })
            .collect();
        let mut biased: Vec<usize> = (0..cfg.n_objects).collect();
        biased.shuffle(&mut r);
        let bias_pairs = vocab
            .triggers
            .iter()
            .zip(biased)
            .map(|(&trigger, object_id)| BiasPair {
                trigger,
                object_id,
                rho: cfg.rho,
            })
            .collect();
        let templates = (0..cfg.n_templates)
            .map(|_| {
                (0..cfg.template_len)
                    .map(|_| *vocab.fillers.choose(&mut r).expect("fillers"))
                    .collect()
            })
            .collect();
        return Ok(WorldSpec {
            config: cfg.clone(),
            seed,
            vocab,
            objects,
            bias_pairs,
            templates,
            shared_direction: shared,
        });
    }
    Err(Error::Generation(format!(
        "no prototype set with pairwise cosine < {} after {MAX_WORLD_RETRIES} tries",
        cfg.max_prototype_cosine
    )))
}

impl WorldSpec {
    pub fn object(&self, id: usize) -> &CatalogObject {
        &self.objects[id]
    }

    /// The frozen relevance scorer for this world.
    ///
    /// Name tokens embed at their object's prototype, fillers near the shared
    /// visual direction, triggers against it, and special tokens at zero.
    pub fn scorer(&self) -> Result<RelevanceScorer> {
        let cfg = &self.config;
        let dim = cfg.feature_dim;
        let mut r = rng::stream(self.seed, "scorer", &[]);
        let mut table = Tensor::zeros(&[cfg.vocab_size, dim]);
        for tok in NUM_SPECIAL..cfg.vocab_size {
            let row: Vec<f64> = if let Some(obj) = self.vocab.object_of(tok) {
                self.objects[obj].prototype.clone()
            } else if self.vocab.fillers.contains(&tok) {
                let noise = gaussian(&mut r, dim, cfg.filler_spread);
                unit(
                    self.shared_direction
                        .iter()
                        .zip(noise)
                        .map(|(s, n)| s + n)
                        .collect(),
                )
            } else if self.vocab.triggers.contains(&tok) {
                let own = unit(gaussian(&mut r, dim, 1.0));
                unit(
                    own.iter()
                        .zip(&self.shared_direction)
                        .map(|(o, s)| o - s)
                        .collect(),
                )
            } else {
                unit(gaussian(&mut r, dim, 1.0))
            };
            table.row_mut(tok).copy_from_slice(&row);
        }
        Ok(RelevanceScorer {
            proj: Tensor::identity(dim),
            table: EmbeddingTable { weights: table },
        })
    }

    pub fn name_token(&self, object_id: usize) -> usize {
        self.vocab.names[object_id]
    }

    /// Object ids mentioned in a response, in order, duplicates kept.
    pub fn mentions(&self, response: &TokenSeq) -> Vec<usize> {
        response
            .ids()
            .iter()
            .filter_map(|&t| self.vocab.object_of(t))
            .collect()
    }

    /// Canonical grounded description: sorted names followed by EOS.
    pub fn describe(&self, truth: &[usize]) -> TokenSeq {
        let mut sorted = truth.to_vec();
        sorted.sort_unstable();
        let mut ids: Vec<usize> = sorted.iter().map(|&o| self.name_token(o)).collect();
        ids.push(EOS);
        TokenSeq::new(ids)
    }
}

/// Draws 1..=max objects without replacement; each feature is its prototype
/// plus Gaussian noise, renormalized.
pub fn sample_scene<R: Rng + ?Sized>(
    world: &WorldSpec,
    scene_id: u64,
    rng: &mut R,
) -> Result<(VisualScene, Vec<usize>)> {
    let cfg = &world.config;
    let k = rng.random_range(1..=cfg.max_objects_per_scene);
    let mut ids: Vec<usize> = (0..cfg.n_objects).collect();
    ids.shuffle(rng);
    ids.truncate(k);
    let objects = ids
        .iter()
        .map(|&id| {
            let noise = gaussian(rng, cfg.feature_dim, cfg.feature_noise);
            let feature = unit(
                world.objects[id]
                    .prototype
                    .iter()
                    .zip(noise)
                    .map(|(p, n)| p + n)
                    .collect(),
            );
            SceneObject {
                object_id: id,
                feature,
            }
        })
        .collect();
    ids.sort_unstable();
    Ok((VisualScene::new(scene_id, objects)?, ids))
}

/// A description query for a scene with the given truth set: BOS, a filler
/// template, and each bias trigger inserted at a random position with
/// probability `rho` when its object is absent.
pub fn description_query<R: Rng + ?Sized>(
    world: &WorldSpec,
    truth: &[usize],
    rng: &mut R,
) -> TokenSeq {
    let mut body = world.templates.choose(rng).expect("templates").clone();
    for pair in &world.bias_pairs {
        if !truth.contains(&pair.object_id) && rng.random_bool(pair.rho) {
            let at = rng.random_range(0..=body.len());
            body.insert(at, pair.trigger);
        }
    }
    let mut ids = vec![BOS];
    ids.extend(body);
    TokenSeq::new(ids)
}

/// Builds the preference tuple for a sampled scene.
pub fn make_preference_pair<R: Rng + ?Sized>(
    example_id: u64,
    scene: VisualScene,
    truth: &[usize],
    world: &WorldSpec,
    rng: &mut R,
) -> Result<PreferenceExample> {
    let absent: Vec<usize> = (0..world.config.n_objects)
        .filter(|o| !truth.contains(o))
        .collect();
    if absent.is_empty() {
        return Err(Error::Generation(format!(
            "scene {} contains every catalog object; resample",
            scene.scene_id
        )));
    }
    let query = description_query(world, truth, rng);
    let triggered: Vec<usize> = world
        .bias_pairs
        .iter()
        .filter(|p| query.ids().contains(&p.trigger) && !truth.contains(&p.object_id))
        .map(|p| p.object_id)
        .collect();
    let hallucinated = match triggered.choose(rng) {
        Some(&biased) if rng.random_bool(world.config.rho) => biased,
        _ => *absent.choose(rng).expect("non-empty"),
    };
    let chosen = world.describe(truth);
    let mut with_extra = truth.to_vec();
    with_extra.push(hallucinated);
    let rejected = world.describe(&with_extra);
    Ok(PreferenceExample {
        example_id,
        scene,
        query,
        chosen,
        rejected,
        truth_objects: truth.to_vec(),
    })
}

/// Checks the groundedness invariants of a preference tuple.
pub fn validate_example(world: &WorldSpec, ex: &PreferenceExample) -> Result<()> {
    let truth: BTreeSet<usize> = ex.truth_objects.iter().copied().collect();
    let scene_ids: BTreeSet<usize> = ex.scene.object_ids().into_iter().collect();
    if truth != scene_ids {
        return Err(Error::contract(format!(
            "example {}: truth set differs from scene",
            ex.example_id
        )));
    }
    if world
        .mentions(&ex.chosen)
        .iter()
        .any(|o| !truth.contains(o))
    {
        return Err(Error::contract(format!(
            "example {}: chosen names an absent object",
            ex.example_id
        )));
    }
    if !world
        .mentions(&ex.rejected)
        .iter()
        .any(|o| !truth.contains(o))
    {
        return Err(Error::contract(format!(
            "example {}: rejected has no hallucination",
            ex.example_id
        )));
    }
    Ok(())
}

/// Generates `n` tuples; example `i` uses its own stream keyed by `(seed, i)`.
pub fn generate_examples(world: &WorldSpec, n: usize, seed: u64) -> Result<Vec<PreferenceExample>> {
    if n == 0 {
        return Err(Error::contract("dataset size must be at least 1"));
    }
    (0..n as u64)
        .map(|i| {
            let mut r = rng::stream(seed, "data", &[i]);
            let (scene, truth) = sample_scene(world, i, &mut r)?;
            make_preference_pair(i, scene, &truth, world, &mut r)
        })
        .collect()
}

/// One line of the dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scene_id: u64,
    pub object_ids: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub query_ids: Vec<usize>,
    pub chosen_ids: Vec<usize>,
    pub rejected_ids: Vec<usize>,
    pub truth_ids: Vec<usize>,
}

impl From<&PreferenceExample> for DatasetRecord {
    fn from(ex: &PreferenceExample) -> Self {
        DatasetRecord {
            scene_id: ex.scene.scene_id,
            object_ids: ex.scene.object_ids(),
            features: ex.scene.objects.iter().map(|o| o.feature.clone()).collect(),
            query_ids: ex.query.ids().to_vec(),
            chosen_ids: ex.chosen.ids().to_vec(),
            rejected_ids: ex.rejected.ids().to_vec(),
            truth_ids: ex.truth_objects.clone(),
        }
    }
}

impl DatasetRecord {
    pub fn into_example(self) -> Result<PreferenceExample> {
        if self.object_ids.len() != self.features.len() {
            return Err(Error::Parse(format!(
                "scene {}: ids and features differ in length",
                self.scene_id
            )));
        }
        let objects = self
            .object_ids
            .into_iter()
            .zip(self.features)
            .map(|(object_id, feature)| SceneObject { object_id, feature })
            .collect();
        Ok(PreferenceExample {
            example_id: self.scene_id,
            scene: VisualScene::new(self.scene_id, objects)?,
            query: TokenSeq::new(self.query_ids),
            chosen: TokenSeq::new(self.chosen_ids),
            rejected: TokenSeq::new(self.rejected_ids),
            truth_objects: self.truth_ids,
        })
    }
}

/// Serializes the dataset as JSON lines.
pub fn encode_dataset(examples: &[PreferenceExample]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(
            &serde_json::to_string(&DatasetRecord::from(ex))
                .map_err(|e| Error::Parse(e.to_string()))?,
        );
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[PreferenceExample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(encode_dataset(examples)?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<PreferenceExample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec.into_example()?);
    }
    Ok(out)
}

pub fn write_world(path: &Path, world: &WorldSpec) -> Result<()> {
    let json = serde_json::to_string_pretty(world).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_world(path: &Path) -> Result<WorldSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
