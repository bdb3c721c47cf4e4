//! Hallucination metrics, the existence probe, benchmark runs and ablation
//! sweeps.

pub mod ablation;
pub mod bench;
pub mod metrics;
pub mod pope;
mod responder;

pub use ablation::{
    ablation_sweep, median, run_experiment, AblationAxis, AblationRow, AblationTable, Experiment,
    RunOutcome,
};
pub use bench::{run_benchmark, MetricsAccumulator, MetricsRecord, EVAL_SEED_OFFSET};
pub use metrics::{chair_score, corpus_chair, coverage, hal_rate, spurious_rate, ResponseRecord};
pub use pope::{build_questions, existence_query, pope_probe, NegativeSampler, PopeQuestion};
pub use responder::{
    ConstantResponder, OracleResponder, PolicyResponder, RandomResponder, Responder,
};
