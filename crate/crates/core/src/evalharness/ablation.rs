//! One-factor sweeps over ω or λ, plus the single-run experiment they share.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bench::{run_benchmark, MetricsRecord};
use super::PolicyResponder;
use crate::error::{Error, Result};
use crate::synthdata::{build_world, generate_examples, WorldConfig};
use crate::trainer::{train, TrainConfig};

/// Data and evaluation sizes for one training run. The world, the dataset
/// and the held-out scenes are all derived from the run's seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub world: WorldConfig,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            world: WorldConfig::default(),
            n_train: 4800,
            n_eval: 500,
        }
    }
}

/// Builds data, trains and evaluates one configuration.
pub fn run_experiment(exp: &Experiment, config: &TrainConfig) -> Result<MetricsRecord> {
    let world = build_world(&exp.world, config.seed)?;
    let data = generate_examples(&world, exp.n_train, config.seed)?;
    let outcome = train(config, &data, &world)?;
    let responder = PolicyResponder::new(&outcome.params, &world);
    run_benchmark(&responder, &world, exp.n_eval, config.seed, &config.hash())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Omega,
    Lambda,
}

impl AblationAxis {
    pub fn apply(self, base: &TrainConfig, value: f64) -> TrainConfig {
        let mut c = base.clone();
        match self {
            AblationAxis::Omega => c.omega = value,
            AblationAxis::Lambda => c.lambda = value,
        }
        c
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Omega => "omega",
            AblationAxis::Lambda => "lambda",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omega" => Ok(AblationAxis::Omega),
            "lambda" => Ok(AblationAxis::Lambda),
            other => Err(Error::Parse(format!("unknown ablation axis `{other}`"))),
        }
    }
}

/// A single (value, seed) run: metrics, or the error that aborted it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunOutcome {
    Ok(MetricsRecord),
    Failed { seed: u64, error: String },
}

/// Per-value medians over the runs that finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub axis_value: f64,
    pub seed_count: usize,
    pub failed: usize,
    pub chair: Option<f64>,
    pub cover: Option<f64>,
    pub hal_rate: Option<f64>,
    pub spurious_rate: Option<f64>,
    pub pope_acc: Option<f64>,
    pub pope_prec: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Raw outcomes, grouped by value in the same order as `rows`.
    pub runs: Vec<Vec<RunOutcome>>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn summarize(axis: AblationAxis, value: f64, runs: &[RunOutcome]) -> AblationRow {
    let ok: Vec<&MetricsRecord> = runs
        .iter()
        .filter_map(|r| match r {
            RunOutcome::Ok(m) => Some(m),
            RunOutcome::Failed { .. } => None,
        })
        .collect();
    let med = |f: fn(&MetricsRecord) -> f64| median(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
    AblationRow {
        axis,
        axis_value: value,
        seed_count: ok.len(),
        failed: runs.len() - ok.len(),
        chair: med(|m| m.chair),
        cover: med(|m| m.cover),
        hal_rate: med(|m| m.hal_rate),
        spurious_rate: med(|m| m.spurious_rate),
        pope_acc: med(|m| m.pope_acc),
        pope_prec: med(|m| m.pope_prec),
    }
}

/// Trains one model per (value, seed) in parallel. A failed run is recorded
/// in place and the rest of the table is still produced.
pub fn ablation_sweep(
    axis: AblationAxis,
    values: &[f64],
    base: &TrainConfig,
    seeds: &[u64],
    exp: &Experiment,
) -> Result<AblationTable> {
    if values.len() < 3 || seeds.len() < 3 {
        return Err(Error::contract(
            "a sweep needs at least 3 values and 3 seeds",
        ));
    }
    let jobs: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let mut config = axis.apply(base, values[v]);
            config.seed = seed;
            match run_experiment(exp, &config) {
                Ok(m) => RunOutcome::Ok(m),
                Err(e) => RunOutcome::Failed {
                    seed,
                    error: e.to_string(),
                },
            }
        })
        .collect();
    let runs: Vec<Vec<RunOutcome>> = results.chunks(seeds.len()).map(|c| c.to_vec()).collect();
    let rows = values
        .iter()
        .zip(&runs)
        .map(|(&v, r)| summarize(axis, v, r))
        .collect();
    Ok(AblationTable { rows, runs })
}

impl AblationTable {
    /// One JSON object per row.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).map_err(|e| Error::Parse(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Aligned text columns; failed cells print as `FAILED`.
    pub fn render(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "FAILED".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let axis = self.rows.first().map_or("value", |r| r.axis.name());
        let _ = writeln!(
            out,
            "{axis:>10} {:>6} {:>7} {:>8} {:>8} {:>9} {:>10} {:>9} {:>9}",
            "seeds", "failed", "chair", "cover", "hal_rate", "spurious*", "pope_acc", "pope_prec"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>10} {:>6} {:>7} {:>8} {:>8} {:>9} {:>10} {:>9} {:>9}",
                format!("{}", r.axis_value),
                r.seed_count,
                r.failed,
                cell(r.chair),
                cell(r.cover),
                cell(r.hal_rate),
                cell(r.spurious_rate),
                cell(r.pope_acc),
                cell(r.pope_prec),
            );
        }
        out.push_str("* spurious: planted-bias proxy\n");
        out
    }
}
