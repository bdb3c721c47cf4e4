//! Command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then a TOML file
//! (`--config`), then individual flags. The file has one table per section
//! (`[world]`, `[model]`, `[train]`, `[data]`) whose keys match the flag names
//! with dashes turned into underscores.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{
    ablation_sweep, run_benchmark, AblationAxis, Experiment, PolicyResponder,
};
use crate::objective::{AlignmentLoss, Reduction};
use crate::perturb::{perturb, PerturbMode, PerturbationPlan};
use crate::policy::{read_checkpoint, ModelConfig};
use crate::rng;
use crate::synthdata::{
    build_world, generate_examples, read_dataset, read_world, write_dataset, write_world,
    WorldConfig,
};
use crate::trainer::{gradient_check, train, write_run_artifacts, TrainConfig, TrainMode};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "TARS_LAB_OUT";
const DEFAULT_OUT: &str = "runs";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "tars-lab",
    version,
    about = "Token-adaptive preference optimization on a synthetic multimodal world"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Build a world and a preference dataset.
    GenData(GenDataArgs),
    /// Train a policy on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out scenes.
    Eval(EvalArgs),
    /// Sweep omega or lambda over several seeds.
    Ablate(AblateArgs),
    /// Show which query tokens the perturbation step would touch.
    PerturbPreview(PreviewArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML file with [world], [model], [train] and [data] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parent directory for run outputs (default: $TARS_LAB_OUT, then ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct WorldFlags {
    #[arg(long)]
    pub n_objects: Option<usize>,
    #[arg(long)]
    pub n_bias_pairs: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub feature_noise: Option<f64>,
    #[arg(long)]
    pub max_objects_per_scene: Option<usize>,
    #[arg(long)]
    pub template_len: Option<usize>,
    #[arg(long)]
    pub n_templates: Option<usize>,
    #[arg(long)]
    pub shared_visual: Option<f64>,
    #[arg(long)]
    pub filler_spread: Option<f64>,
    #[arg(long)]
    pub max_prototype_cosine: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_hidden: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// none, mask or replace
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub warmup_lr: Option<f64>,
    /// spectral or contrastive
    #[arg(long)]
    pub alignment: Option<AlignmentLoss>,
    /// mean or sum
    #[arg(long)]
    pub reduction: Option<Reduction>,
}

#[derive(Debug, Default, Args)]
pub struct DataFlags {
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub world: WorldFlags,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint file written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory written by `gen-data`; supplies the world.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub n_eval: Option<usize>,
    /// Evaluation seed (default: the checkpoint's training seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// omega or lambda
    #[arg(long)]
    pub axis: AblationAxis,
    /// Comma-separated grid (default: 1e-4,1e-3,1e-2 for omega; 0.01,0.2,1.0 for lambda).
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    /// Comma-separated seeds (default: 0,1,2,3,4).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub world: WorldFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory written by `gen-data`; without it a fresh world and dataset
    /// are built from the seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub world: WorldFlags,
    /// Number of examples to preview.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long)]
    pub omega: Option<f64>,
    /// mask or replace
    #[arg(long)]
    pub mode: Option<PerturbMode>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random micro-models.
    #[arg(long, default_value_t = 20)]
    pub models: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 4800,
            n_eval: 500,
        }
    }
}

/// Everything a subcommand might need, after all three layers are applied.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolvedConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ResolvedConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            None => ResolvedConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
            }
        };
        cfg.sync();
        Ok(cfg)
    }

    /// Ties the model's vocabulary and input width to the world, and copies
    /// the model section into the training config.
    fn sync(&mut self) {
        self.model.vocab_size = self.world.vocab_size;
        self.model.d_raw = self.world.feature_dim;
        self.train.model = self.model;
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            world: self.world.clone(),
            n_train: self.data.n_train,
            n_eval: self.data.n_eval,
        }
    }
}

macro_rules! overlay {
    ($target:expr, $flags:expr, [$($field:ident),* $(,)?]) => {
        $( if let Some(v) = $flags.$field.clone() { $target.$field = v; } )*
    };
}

impl WorldFlags {
    fn apply(&self, w: &mut WorldConfig) {
        overlay!(
            w,
            self,
            [
                n_objects,
                n_bias_pairs,
                rho,
                feature_dim,
                vocab_size,
                feature_noise,
                max_objects_per_scene,
                template_len,
                n_templates,
                shared_visual,
                filler_spread,
                max_prototype_cosine,
            ]
        );
    }
}

impl ModelFlags {
    fn apply(&self, m: &mut ModelConfig) {
        overlay!(m, self, [d_model, d_hidden, max_len]);
    }
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        overlay!(
            t,
            self,
            [
                alpha,
                beta,
                omega,
                lambda,
                mode,
                lr,
                epochs,
                grad_clip,
                warmup_epochs,
                warmup_lr,
                alignment,
                reduction,
            ]
        );
    }
}

impl DataFlags {
    fn apply(&self, d: &mut DataConfig) {
        overlay!(d, self, [n_train, n_eval]);
    }
}

/// First file written into every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub config: ResolvedConfig,
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub tool_version: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn out_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Creates `<root>/<subcommand>-<UTC timestamp>`, adding a counter if a
/// directory of that name already exists.
fn create_run_dir(root: &Path, subcommand: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let base = format!("{subcommand}-{stamp}");
    for n in 0.. {
        let name = if n == 0 {
            base.clone()
        } else {
            format!("{base}-{n}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("the counter is unbounded")
}

fn start_run(
    subcommand: &str,
    common: &CommonArgs,
    config: &ResolvedConfig,
    seed: u64,
) -> Result<PathBuf> {
    let dir = create_run_dir(&out_root(common.out.as_deref()), subcommand)?;
    let hash = {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(config).map_err(|e| Error::Parse(e.to_string()))?;
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    };
    let manifest = RunManifest {
        subcommand: subcommand.to_string(),
        config_path: common.config.clone(),
        config: config.clone(),
        config_hash: hash,
        output_dir: dir.clone(),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(dir)
}

/// Parses `argv` and runs the subcommand. Returns the process exit code:
/// 0 on success, 1 on a usage error, 2 on a runtime failure.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::PerturbPreview(a) => preview_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let mut cfg = ResolvedConfig::load(a.common.config.as_deref())?;
    a.world.apply(&mut cfg.world);
    a.data.apply(&mut cfg.data);
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.sync();
    let seed = cfg.train.seed;
    let dir = start_run("gen-data", &a.common, &cfg, seed)?;
    let world = build_world(&cfg.world, seed)?;
    let examples = generate_examples(&world, cfg.data.n_train, seed)?;
    write_world(&dir.join("world.json"), &world)?;
    write_dataset(&dir.join("dataset.jsonl"), &examples)?;
    println!("{}", dir.display());
    Ok(0)
}

fn load_data(
    dir: &Path,
) -> Result<(
    crate::synthdata::WorldSpec,
    Vec<crate::synthdata::PreferenceExample>,
)> {
    let world = read_world(&dir.join("world.json"))?;
    let examples = read_dataset(&dir.join("dataset.jsonl"))?;
    Ok((world, examples))
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let (world, examples) = load_data(&a.data)?;
    let mut cfg = ResolvedConfig::load(a.common.config.as_deref())?;
    cfg.world = world.config.clone();
    a.model.apply(&mut cfg.model);
    cfg.sync();
    a.train.apply(&mut cfg.train);
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.data.n_train = examples.len();
    cfg.train.validate()?;
    let dir = start_run("train", &a.common, &cfg, cfg.train.seed)?;
    let outcome = train(&cfg.train, &examples, &world)?;
    let records = write_run_artifacts(&dir, &cfg.train, &outcome)?;
    for r in &records {
        println!(
            "epoch {}  dpo {:.6}  freq {:.6}  total {:.6}  {}",
            r.epoch,
            r.metrics.mean_dpo,
            r.metrics.mean_freq,
            r.metrics.mean_total,
            r.path.display()
        );
    }
    println!("{}", dir.display());
    Ok(0)
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let (header, params) = read_checkpoint(&a.checkpoint)?;
    let world = read_world(&a.data.join("world.json"))?;
    let mut cfg = ResolvedConfig::load(a.common.config.as_deref())?;
    cfg.world = world.config.clone();
    cfg.model = header.model;
    if let Ok(train) = serde_json::from_value::<TrainConfig>(header.config.clone()) {
        cfg.train = train;
    }
    if let Some(n) = a.n_eval {
        cfg.data.n_eval = n;
    }
    let seed = a.seed.unwrap_or(header.seed);
    let dir = start_run("eval", &a.common, &cfg, seed)?;
    let responder = PolicyResponder::new(&params, &world);
    let record = run_benchmark(
        &responder,
        &world,
        cfg.data.n_eval,
        seed,
        &header.config_hash,
    )?;
    write_json(&dir.join("metrics.json"), &record)?;
    println!(
        "{}",
        serde_json::to_string(&record).map_err(|e| Error::Parse(e.to_string()))?
    );
    println!("(spurious_rate is a planted-bias proxy)");
    println!("{}", dir.display());
    Ok(0)
}

fn ablate_cmd(a: AblateArgs) -> Result<i32> {
    let mut cfg = ResolvedConfig::load(a.common.config.as_deref())?;
    a.world.apply(&mut cfg.world);
    a.model.apply(&mut cfg.model);
    a.data.apply(&mut cfg.data);
    cfg.sync();
    a.train.apply(&mut cfg.train);
    cfg.train.validate()?;
    let values = if a.values.is_empty() {
        match a.axis {
            AblationAxis::Omega => vec![1e-4, 1e-3, 1e-2],
            AblationAxis::Lambda => vec![0.01, 0.2, 1.0],
        }
    } else {
        a.values.clone()
    };
    let seeds = if a.seeds.is_empty() {
        vec![0, 1, 2, 3, 4]
    } else {
        a.seeds.clone()
    };
    let dir = start_run("ablate", &a.common, &cfg, seeds[0])?;
    let table = ablation_sweep(a.axis, &values, &cfg.train, &seeds, &cfg.experiment())?;
    let jsonl = table.to_jsonl()?;
    let path = dir.join("table.jsonl");
    fs::write(&path, &jsonl).map_err(|e| Error::io(&path, e))?;
    let text = table.render();
    let path = dir.join("table.txt");
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("runs.json"), &table.runs)?;
    print!("{text}");
    println!("{}", dir.display());
    let failed: usize = table.rows.iter().map(|r| r.failed).sum();
    if failed > 0 {
        eprintln!("{failed} run(s) failed; see runs.json");
        return Ok(2);
    }
    Ok(0)
}

#[derive(Serialize)]
struct PreviewLine<'a> {
    example_id: u64,
    query: &'a [usize],
    perturbed: &'a [usize],
    plan: &'a PerturbationPlan,
}

fn preview_cmd(a: PreviewArgs) -> Result<i32> {
    let mut cfg = ResolvedConfig::load(a.common.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(w) = a.omega {
        cfg.train.omega = w;
    }
    let (world, examples) = match &a.data {
        Some(dir) => {
            let (world, mut ex) = load_data(dir)?;
            ex.truncate(a.n);
            (world, ex)
        }
        None => {
            a.world.apply(&mut cfg.world);
            let world = build_world(&cfg.world, cfg.train.seed)?;
            let ex = generate_examples(&world, a.n.max(1), cfg.train.seed)?;
            (world, ex)
        }
    };
    cfg.world = world.config.clone();
    cfg.sync();
    let mode = a
        .mode
        .or(cfg.train.mode.perturbation())
        .unwrap_or(PerturbMode::Mask);
    let dir = start_run("perturb-preview", &a.common, &cfg, cfg.train.seed)?;
    let scorer = world.scorer()?;
    let mut out = String::new();
    for ex in &examples {
        let mut r = rng::stream(cfg.train.seed, "preview", &[ex.example_id]);
        let (q, plan) = perturb(
            &scorer,
            &ex.scene,
            &ex.query,
            cfg.train.omega,
            mode,
            world.config.vocab_size,
            &mut r,
        )?;
        let line = PreviewLine {
            example_id: ex.example_id,
            query: ex.query.ids(),
            perturbed: q.ids(),
            plan: &plan,
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    let path = dir.join("preview.jsonl");
    fs::write(&path, &out).map_err(|e| Error::io(&path, e))?;
    print!("{out}");
    println!("{}", dir.display());
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<i32> {
    if a.models == 0 {
        return Err(Error::contract("--models must be at least 1"));
    }
    let report = gradient_check(a.models, a.seed)?;
    for (i, e) in report.per_model.iter().enumerate() {
        println!("model {i:>3}  max relative error {e:.3e}");
    }
    let ok = report.max_relative_error < GRADCHECK_TOLERANCE;
    println!(
        "max relative error {:.3e} over {} models (tolerance {GRADCHECK_TOLERANCE:.0e}): {}",
        report.max_relative_error,
        report.models,
        if ok { "ok" } else { "FAILED" }
    );
    Ok(if ok { 0 } else { 2 })
}
