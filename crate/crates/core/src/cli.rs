//! Batch command-line front end: `synth`, `train`, `eval`, `infer`, `hardset`.
//!
//! Settings resolve in order: built-in defaults, `--config` JSON, flags, then
//! trailing `key=value` overrides addressed by dotted path
//! (`train.lr_phase1=1e-3`). Every run writes the resolved settings to
//! `<out>/config.resolved.json`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::colormap::colorize;
use crate::data::image_io::{read_ppm, write_ppm, write_tensor};
use crate::data::synth::{generate_scene, SceneSpec};
use crate::data::{load_sequence, save_dataset};
use crate::error::{Error, Result};
use crate::evaluation::{challenge_union, evaluate_run, hardest_k, read_per_image_errors, EvalOptions};
use crate::network::{AttentionMode, Model, ModelConfig};
use crate::tensor::no_grad;
use crate::trainer::{train, TrainConfig, Trainer};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

/// Exit status for invalid configuration or usage.
pub const EXIT_CONFIG: i32 = 1;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    Full,
}

/// Every tunable of every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub preset: Preset,
    pub attention: AttentionMode,
    pub fusion: bool,
    pub scales: usize,
    /// Triplets generated by `synth`.
    pub n: usize,
    /// Hard cases kept per method by `hardset`.
    pub k: usize,
    /// Per-image statistic ranked by `hardset`.
    pub metric: String,
    /// Split read by `train`.
    pub train_split: String,
    /// Split scored by `eval`.
    pub eval_split: String,
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 96,
            height: 32,
            preset: Preset::Toy,
            attention: AttentionMode::Channel,
            fusion: true,
            scales: 4,
            n: 200,
            k: 10,
            metric: "abs_rel".into(),
            train_split: "train".into(),
            eval_split: "test".into(),
            scene: SceneSpec::default(),
            train: TrainConfig::toy(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let mut m = match self.preset {
            Preset::Toy => ModelConfig::toy(self.width, self.height),
            Preset::Full => ModelConfig::full(self.width, self.height),
        };
        m.decoder.attention = self.attention;
        m.decoder.fusion = self.fusion;
        m.decoder.scales = self.scales;
        m.seed = self.seed;
        m
    }

    /// The training configuration with the shared seed and scale count applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t.loss.scales = self.scales;
        t
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec { seed: self.seed, ..self.scene }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.scene_spec()
            .validate(self.width, self.height)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.n == 0 || self.k == 0 {
            return Err(Error::Config("n and k must be positive".into()));
        }
        if crate::evaluation::DepthMetrics::NAMES.iter().all(|&m| m != self.metric) {
            return Err(Error::Config(format!("unknown metric {:?}", self.metric)));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "depthforge", version, about = "Self-supervised monocular depth: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file with settings (see `config.resolved.json` of any run).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, value_name = "WxH")]
    pub size: Option<String>,
    #[arg(long)]
    pub scales: Option<usize>,
    #[arg(long, value_parser = ["none", "channel", "spatial", "channel_spatial"])]
    pub attention: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    pub fusion: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Trailing `key=value` overrides, e.g. `train.epochs=3`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with ground-truth depth and pose.
    Synth {
        /// Number of triplets.
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train depth and pose networks on a dataset.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint against ground-truth depth.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Predict depth for PPM images.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PPM", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Build the hard-case union from per-image error tables.
    Hardset {
        #[arg(long, value_name = "CSV", required = true, num_args = 1..)]
        errors: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Infer { common, .. }
            | Command::Hardset { common, .. } => common,
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("size must look like 96x32, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

/// Sets `root.<dotted key>` to `raw`, parsed as JSON when possible and as a
/// string otherwise. The key must already exist in `root`.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown setting {key:?}")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Merges `patch` into `base`, rejecting keys `base` does not have.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| Error::Config(format!("unknown setting {sub:?}")))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies defaults, the config file, flags and overrides, in that order.
pub fn resolve(common: &Common, n: Option<usize>) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    if let Some(p) = &common.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        merge(&mut v, file, "").map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    }
    let mut flags = Vec::new();
    if let Some(s) = common.seed {
        flags.push(format!("seed={s}"));
    }
    if let Some(s) = &common.size {
        let (w, h) = parse_size(s)?;
        flags.push(format!("width={w}"));
        flags.push(format!("height={h}"));
    }
    if let Some(s) = common.scales {
        flags.push(format!("scales={s}"));
    }
    if let Some(a) = &common.attention {
        flags.push(format!("attention=\"{a}\""));
    }
    if let Some(f) = &common.fusion {
        flags.push(format!("fusion={}", f == "on"));
    }
    if let Some(k) = common.k {
        flags.push(format!("k={k}"));
    }
    if let Some(n) = n {
        flags.push(format!("n={n}"));
    }
    for a in flags.iter().chain(&common.overrides) {
        apply_override(&mut v, a)?;
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate().map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    })?;
    Ok(cfg)
}

fn create_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let p = dir.join(RESOLVED_CONFIG);
    std::fs::write(&p, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::file(&p, e))
}

/// Splits `n` triplets into contiguous train / val / test ranges.
pub fn split_ranges(n: usize) -> [(&'static str, std::ops::Range<usize>); 3] {
    let test = (n / 10).max(1).min(n);
    let val = (n / 10).min(n - test);
    let train = n - test - val;
    [("train", 0..train), ("val", train..train + val), ("test", train + val..n)]
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let triplets = generate_scene(&cfg.scene_spec(), cfg.width, cfg.height, cfg.n)?;
    save_dataset(out, &triplets, &split_ranges(cfg.n))?;
    log::info!("wrote {} triplets to {}", cfg.n, out.display());
    Ok(())
}

fn run_train(cfg: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> Result<()> {
    let split = load_sequence(data, &cfg.train_split)?;
    if split.triplets.is_empty() {
        return Err(Error::invalid(format!("split {} of {} has no usable triplets", cfg.train_split, data.display())));
    }
    let mut trainer = match resume {
        Some(p) => Trainer::resume(p, Some(cfg.train_config()))?,
        None => Trainer::new(Model::new(&cfg.model_config())?, cfg.train_config())?,
    };
    let report = train(&mut trainer, &split.triplets, Some(out))?;
    if let Some(last) = report.log.last() {
        log::info!("finished at step {} with loss {:.5}", last.step, last.total);
    }
    Ok(())
}

fn run_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let (model, _, _) = Model::<f32>::load(checkpoint)?;
    let split = load_sequence(data, &cfg.eval_split)?;
    let report = evaluate_run(&model, &split.triplets, &split.indices, &cfg.eval)?;
    report.write_csv(&out.join("metrics.csv"))?;
    report.write_per_image_csv(&out.join("per_image.csv"))?;
    log::info!(
        "abs_rel {:.4} rmse {:.4} d1 {:.4} over {} images",
        report.mean.abs_rel,
        report.mean.rmse,
        report.mean.delta1,
        report.per_image.len()
    );
    Ok(())
}

fn run_infer(checkpoint: &Path, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let (model, _, _) = Model::<f32>::load(checkpoint)?;
    for input in inputs {
        let img = read_ppm(input)?;
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let batch = img.reshape(&[1, 3, h, w])?;
        let depth = crate::evaluation::predict_depth(&model, &batch)?;
        let disp = no_grad(|| model.depth.forward(&batch))?.swap_remove(0);
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        write_tensor(&out.join(format!("{stem}_disp.dft")), "disparity", &disp.reshape(&[h, w])?)?;
        write_tensor(&out.join(format!("{stem}_depth.dft")), "depth", &depth.reshape(&[h, w])?)?;
        write_ppm(&out.join(format!("{stem}_disp.ppm")), &colorize(&disp.to_vec(), w, h)?)?;
    }
    Ok(())
}

fn run_hardset(cfg: &RunConfig, errors: &[PathBuf], out: &Path) -> Result<()> {
    let lists = errors
        .iter()
        .map(|p| hardest_k(&read_per_image_errors(p, &cfg.metric)?, cfg.k).map_err(|e| Error::file(p, e)))
        .collect::<Result<Vec<_>>>()?;
    let report = challenge_union(&lists);
    let p = out.join("hardset.json");
    std::fs::write(&p, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::file(&p, e))?;
    log::info!("{} hard cases, {} common to all methods", report.union.len(), report.common.len());
    Ok(())
}

/// Executes one parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let n = match &cli.command {
        Command::Synth { n, .. } => *n,
        _ => None,
    };
    let cfg = resolve(common, n)?;
    let out = &common.out;
    create_out(out, &cfg)?;
    match &cli.command {
        Command::Synth { .. } => synth(&cfg, out),
        Command::Train { data, resume, .. } => run_train(&cfg, data, resume.as_deref(), out),
        Command::Eval { checkpoint, data, .. } => run_eval(&cfg, checkpoint, data, out),
        Command::Infer { checkpoint, input, .. } => run_infer(checkpoint, input, out),
        Command::Hardset { errors, .. } => run_hardset(&cfg, errors, out),
    }
}

/// Parses `argv` (including the program name), runs it, and returns the
/// process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

/// Caps the GEMM thread pool at `DEPTHFORGE_THREADS` when set; otherwise
/// every physical core is used. Must run before the first tensor operation.
/// Results do not depend on the thread count: only independent output tiles
/// are split across threads.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(v) = std::env::var("DEPTHFORGE_THREADS") else {
        return Ok(None);
    };
    let n = v
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DEPTHFORGE_THREADS must be a positive integer, got {v:?}")))?;
    std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    Ok(Some(n))
}
