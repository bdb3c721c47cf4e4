//! The alternating training loop: perturb the query (max step), then take a
//! clipped SGD step on the combined preference objective (min step).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::TokenSeq;
use crate::error::{Error, Result};
use crate::numcore::{clip_global_norm, sgd_step, Graph};
use crate::objective::{
    build_objective, AlignmentLoss, LossBreakdown, LossWeights, PreferenceInputs, Reduction,
};
use crate::perturb::{perturb, PerturbMode, PerturbationPlan};
use crate::policy::{
    clone_frozen, init_params, response_logprob_var, write_checkpoint, CheckpointHeader,
    ModelConfig, ModelParams, PolicyVars, ReferencePolicy,
};
use crate::rng;
use crate::synthdata::{PreferenceExample, WorldSpec};

/// Perturbation strategy for the max step; `None` trains plain DPO.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    None,
    Mask,
    Replace,
}

impl TrainMode {
    pub fn perturbation(self) -> Option<PerturbMode> {
        match self {
            TrainMode::None => None,
            TrainMode::Mask => Some(PerturbMode::Mask),
            TrainMode::Replace => Some(PerturbMode::Replace),
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TrainMode::None),
            "mask" => Ok(TrainMode::Mask),
            "replace" => Ok(TrainMode::Replace),
            other => Err(Error::Parse(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
    pub lambda: f64,
    pub mode: TrainMode,
    pub lr: f64,
    pub epochs: usize,
    pub grad_clip: f64,
    /// Supervised passes over the caption corpus before preference training.
    /// Zero keeps the freshly initialized weights as the reference.
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub seed: u64,
    pub alignment: AlignmentLoss,
    pub reduction: Reduction,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            omega: 1e-3,
            lambda: 0.2,
            mode: TrainMode::Mask,
            lr: 5e-3,
            epochs: 3,
            grad_clip: 20.0,
            warmup_epochs: 1,
            warmup_lr: 0.05,
            seed: 0,
            alignment: AlignmentLoss::Spectral,
            reduction: Reduction::Mean,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The plain DPO baseline: no perturbation and no consistency term.
    pub fn dpo_baseline(seed: u64) -> Self {
        TrainConfig {
            mode: TrainMode::None,
            lambda: 0.0,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::contract("lambda must be non-negative"));
        }
        if self.mode != TrainMode::None && !(self.omega > 0.0) {
            return Err(Error::contract("omega must be positive when perturbing"));
        }
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if !(self.warmup_lr >= 0.0) {
            return Err(Error::contract("warmup_lr must be non-negative"));
        }
        if !(self.lr >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::contract(
                "lr must be non-negative and grad_clip positive",
            ));
        }
        self.weights().validate()?;
        self.model.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
            reduction: self.reduction,
            alignment: self.alignment,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub example_id: u64,
    pub dpo: f64,
    pub freq: f64,
    pub total: f64,
    pub n_perturbed: usize,
    pub delta_p: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub applied_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_dpo: f64,
    pub mean_freq: f64,
    pub mean_total: f64,
    pub reference_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub path: PathBuf,
    pub metrics: EpochSummary,
    pub config_hash: String,
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub reference: ReferencePolicy,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    /// Per-epoch parameter snapshots, for checkpointing.
    pub snapshots: Vec<ModelParams>,
}

/// Perturbs a query for the max step; `None` mode returns it untouched.
pub fn max_step(
    config: &TrainConfig,
    world: &WorldSpec,
    scorer: &crate::encoders::RelevanceScorer,
    ex: &PreferenceExample,
    stream_key: (&str, &[u64]),
) -> Result<(TokenSeq, Option<PerturbationPlan>)> {
    match config.mode.perturbation() {
        None => Ok((ex.query.clone(), None)),
        Some(mode) => {
            let mut r = rng::stream(config.seed, stream_key.0, stream_key.1);
            let (q, plan) = perturb(
                scorer,
                &ex.scene,
                &ex.query,
                config.omega,
                mode,
                world.config.vocab_size,
                &mut r,
            )?;
            Ok((q, Some(plan)))
        }
    }
}

/// The caption a warm-start annotator writes for an example: the biased
/// description when a trigger is in the query, the grounded one otherwise.
/// A policy imitating these captions carries the planted shortcut into
/// preference training.
pub fn warmup_target<'a>(ex: &'a PreferenceExample, world: &WorldSpec) -> &'a TokenSeq {
    let triggered = world
        .bias_pairs
        .iter()
        .any(|p| ex.query.ids().contains(&p.trigger));
    if triggered {
        &ex.rejected
    } else {
        &ex.chosen
    }
}

/// Fresh initialization followed by `warmup_epochs` of maximum-likelihood
/// steps on [`warmup_target`] captions.
pub fn warm_start(
    config: &TrainConfig,
    dataset: &[PreferenceExample],
    world: &WorldSpec,
) -> Result<ModelParams> {
    config.validate()?;
    let mut params = init_params(&config.model, config.seed)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.warmup_epochs {
        order.shuffle(&mut rng::stream(config.seed, "warmup", &[epoch as u64]));
        for &idx in &order {
            let ex = &dataset[idx];
            let mut g = Graph::new();
            let vars = PolicyVars::trainable(&mut g, &params)?;
            let (logp, _) = response_logprob_var(
                &mut g,
                &vars,
                &params.config,
                &ex.scene,
                &ex.query,
                warmup_target(ex, world),
            )?;
            if !g.scalar(logp).is_finite() {
                return Err(Error::NonFinite {
                    step: idx,
                    example_id: ex.example_id as usize,
                });
            }
            let loss = g.scale(logp, -1.0);
            let mut grads = g.backward(loss)?;
            drop(g);
            clip_global_norm(&mut grads, config.grad_clip);
            sgd_step(&mut params.tensors, &grads, config.warmup_lr)?;
        }
    }
    Ok(params)
}

/// Runs the full procedure: warm start, then preference training with the
/// warm-started weights as the frozen reference.
pub fn train(
    config: &TrainConfig,
    dataset: &[PreferenceExample],
    world: &WorldSpec,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    let params = warm_start(config, dataset, world)?;
    train_from(config, dataset, world, params)
}

/// Runs the procedure from given initial weights, which also become the
/// reference policy.
pub fn train_from(
    config: &TrainConfig,
    dataset: &[PreferenceExample],
    world: &WorldSpec,
    mut params: ModelParams,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    let scorer = world.scorer()?;
    let reference = clone_frozen(&params);
    let reference_hash = reference.params().tensors.content_hash();
    let weights = config.weights();

    let mut steps = Vec::with_capacity(dataset.len() * config.epochs);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut snapshots = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, "shuffle", &[epoch as u64]));
        let (mut sum_dpo, mut sum_freq, mut sum_total) = (0.0, 0.0, 0.0);
        for &idx in &order {
            let ex = &dataset[idx];
            let step = steps.len();
            let (perturbed, plan) = max_step(
                config,
                world,
                &scorer,
                ex,
                ("perturb", &[epoch as u64, ex.example_id]),
            )?;

            let mut g = Graph::new();
            let vars = PolicyVars::trainable(&mut g, &params)?;
            let inputs = PreferenceInputs {
                scene: &ex.scene,
                query: &ex.query,
                perturbed: &perturbed,
                chosen: &ex.chosen,
                rejected: &ex.rejected,
            };
            let nodes = build_objective(&mut g, &vars, &params, &reference, &inputs, &weights)?;
            let (dpo, freq, total) = (
                g.scalar(nodes.dpo),
                g.scalar(nodes.freq),
                g.scalar(nodes.total),
            );
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    example_id: ex.example_id as usize,
                });
            }
            let mut grads = g.backward(nodes.total)?;
            drop(g);
            let grad_norm = clip_global_norm(&mut grads, config.grad_clip);
            let applied_norm = grads.global_norm();
            sgd_step(&mut params.tensors, &grads, config.lr)?;

            sum_dpo += dpo;
            sum_freq += freq;
            sum_total += total;
            steps.push(StepRecord {
                step,
                epoch,
                example_id: ex.example_id,
                dpo,
                freq,
                total,
                n_perturbed: plan.as_ref().map_or(0, |p| p.agnostic_set.len()),
                delta_p: plan.as_ref().map(|p| p.margin),
                grad_norm,
                applied_norm,
            });
        }
        let current = reference.params().tensors.content_hash();
        if current != reference_hash {
            return Err(Error::contract("reference policy changed during training"));
        }
        let n = dataset.len() as f64;
        epochs.push(EpochSummary {
            epoch,
            mean_dpo: sum_dpo / n,
            mean_freq: sum_freq / n,
            mean_total: sum_total / n,
            reference_hash: current,
        });
        snapshots.push(params.clone());
    }

    Ok(TrainOutcome {
        params,
        reference,
        steps,
        epochs,
        snapshots,
    })
}

/// Mean losses over `dataset` without touching the parameters. Perturbations
/// come from the `eval_seed` stream so repeated calls agree.
pub fn evaluate_loss(
    params: &ModelParams,
    reference: &ReferencePolicy,
    dataset: &[PreferenceExample],
    config: &TrainConfig,
    world: &WorldSpec,
    eval_seed: u64,
) -> Result<LossBreakdown> {
    if dataset.is_empty() {
        return Err(Error::contract("evaluation dataset is empty"));
    }
    let scorer = world.scorer()?;
    let weights = config.weights();
    let probe = TrainConfig {
        seed: eval_seed,
        ..config.clone()
    };
    let (mut dpo, mut freq, mut total) = (0.0, 0.0, 0.0);
    for ex in dataset {
        let (perturbed, _) = max_step(
            &probe,
            world,
            &scorer,
            ex,
            ("eval-perturb", &[ex.example_id]),
        )?;
        let inputs = PreferenceInputs {
            scene: &ex.scene,
            query: &ex.query,
            perturbed: &perturbed,
            chosen: &ex.chosen,
            rejected: &ex.rejected,
        };
        let b = crate::objective::tars_loss(params, reference, &inputs, &weights)?;
        dpo += b.dpo;
        freq += b.freq;
        total += b.total;
    }
    let n = dataset.len() as f64;
    Ok(LossBreakdown {
        dpo: dpo / n,
        freq: freq / n,
        total: total / n,
        alpha: weights.alpha,
        beta: weights.beta,
        lambda: weights.lambda,
    })
}

/// Header line of a metrics log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogHeader {
    pub kind: String,
    pub config_hash: String,
    pub config: TrainConfig,
}

/// Metrics log as JSON lines: the config header, then one line per step.
pub fn encode_metrics_log(config: &TrainConfig, steps: &[StepRecord]) -> Result<String> {
    let header = LogHeader {
        kind: "config".into(),
        config_hash: config.hash(),
        config: config.clone(),
    };
    let mut out = serde_json::to_string(&header).map_err(|e| Error::Parse(e.to_string()))?;
    out.push('\n');
    for s in steps {
        out.push_str(&serde_json::to_string(s).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `metrics.jsonl` and one checkpoint per epoch into `dir`.
pub fn write_run_artifacts(
    dir: &Path,
    config: &TrainConfig,
    outcome: &TrainOutcome,
) -> Result<Vec<CheckpointRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join("metrics.jsonl");
    fs::write(&log_path, encode_metrics_log(config, &outcome.steps)?)
        .map_err(|e| Error::io(&log_path, e))?;
    let config_json = serde_json::to_value(config).map_err(|e| Error::Parse(e.to_string()))?;
    let mut records = Vec::new();
    for (summary, snapshot) in outcome.epochs.iter().zip(&outcome.snapshots) {
        let path = dir.join(format!("checkpoint-epoch{}.bin", summary.epoch + 1));
        let header = CheckpointHeader {
            model: config.model,
            seed: config.seed,
            epoch: summary.epoch + 1,
            config_hash: config.hash(),
            config: config_json.clone(),
        };
        write_checkpoint(&path, &header, snapshot)?;
        records.push(CheckpointRecord {
            epoch: summary.epoch + 1,
            path,
            metrics: summary.clone(),
            config_hash: config.hash(),
        });
    }
    let index = dir.join("checkpoints.json");
    let json = serde_json::to_string_pretty(&records).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&index, json + "\n").map_err(|e| Error::io(&index, e))?;
    Ok(records)
}

/// Outcome of the finite-difference self-check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub models: usize,
    pub max_relative_error: f64,
    /// Worst error per model, in order.
    pub per_model: Vec<f64>,
}

/// Compares backward-mode gradients of the full objective against central
/// differences on `models` random micro-models. Every model gets its own
/// reference, scene, query, response pair, perturbation and loss weights.
pub fn gradient_check(models: usize, seed: u64) -> Result<GradientCheck> {
    use crate::encoders::{
        EmbeddingTable, RelevanceScorer, SceneObject, VisualScene, BOS, NUM_SPECIAL,
    };
    use crate::numcore::{fd_gradient, max_relative_error, Tensor, FD_STEP};
    use rand::Rng;

    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 4,
        d_hidden: 5,
        max_len: 24,
        d_raw: 3,
    };
    let mut per_model = Vec::with_capacity(models);
    for m in 0..models as u64 {
        let mut r = rng::stream(seed, "gradcheck", &[m]);
        let params = init_params(&cfg, rng::derive_key(seed, "gradcheck-policy", &[m]))?;
        let reference = clone_frozen(&init_params(
            &cfg,
            rng::derive_key(seed, "gradcheck-ref", &[m]),
        )?);
        let mut uniform =
            |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-1.0..1.0)).collect() };
        let n_obj = 1 + (m as usize % 3);
        let objects = (0..n_obj)
            .map(|i| SceneObject {
                object_id: i,
                feature: uniform(cfg.d_raw),
            })
            .collect();
        let scene = VisualScene::new(m, objects)?;
        let scorer = RelevanceScorer {
            proj: Tensor::matrix(cfg.d_raw, 4, uniform(cfg.d_raw * 4))?,
            table: EmbeddingTable {
                weights: Tensor::matrix(cfg.vocab_size, 4, uniform(cfg.vocab_size * 4))?,
            },
        };
        let mut tokens = |n: usize| -> Vec<usize> {
            (0..n)
                .map(|_| r.random_range(NUM_SPECIAL..cfg.vocab_size))
                .collect()
        };
        let mut q = vec![BOS];
        q.extend(tokens(2 + m as usize % 4));
        let query = TokenSeq::new(q);
        let chosen = TokenSeq::new(tokens(1 + m as usize % 4));
        let rejected = TokenSeq::new(tokens(1 + (m as usize + 2) % 5));
        let mode = if m % 2 == 0 {
            PerturbMode::Mask
        } else {
            PerturbMode::Replace
        };
        let (perturbed, _) = perturb(&scorer, &scene, &query, 0.05, mode, cfg.vocab_size, &mut r)?;
        let weights = LossWeights {
            alpha: r.random_range(0.5..2.0),
            beta: r.random_range(0.5..2.0),
            lambda: r.random_range(0.0..1.0),
            reduction: if m % 3 == 0 {
                Reduction::Sum
            } else {
                Reduction::Mean
            },
            alignment: if m % 4 == 1 {
                AlignmentLoss::Contrastive
            } else {
                AlignmentLoss::Spectral
            },
        };
        let inputs = PreferenceInputs {
            scene: &scene,
            query: &query,
            perturbed: &perturbed,
            chosen: &chosen,
            rejected: &rejected,
        };

        let mut g = Graph::new();
        let vars = PolicyVars::trainable(&mut g, &params)?;
        let nodes = build_objective(&mut g, &vars, &params, &reference, &inputs, &weights)?;
        let analytic = g.backward(nodes.total)?;
        let numeric = fd_gradient(
            |p| {
                let probe = ModelParams {
                    config: cfg,
                    tensors: p.clone(),
                };
                Ok(crate::objective::tars_loss(&probe, &reference, &inputs, &weights)?.total)
            },
            &params.tensors,
            FD_STEP,
        )?;
        per_model.push(max_relative_error(&analytic, &numeric, 1e-6));
    }
    Ok(GradientCheck {
        models,
        max_relative_error: per_model.iter().copied().fold(0.0, f64::max),
        per_model,
    })
}
