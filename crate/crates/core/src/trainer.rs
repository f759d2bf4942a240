//! Joint optimisation of the depth and pose networks: Adam with a two-phase
//! step schedule over seeded, shuffled triplet batches.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Triplet};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::losses::{total_loss, LossConfig, LossRecord};
use crate::network::Model;
use crate::tensor::{NamedTensor, Tensor};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.dft";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Epochs run at `lr_phase1` before switching to `lr_phase2`.
    pub phase1_epochs: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    /// Stop after this many optimisation steps, if set.
    pub max_steps: Option<usize>,
    /// Mirror whole batches left-right with probability 1/2.
    pub flip_augment: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr_phase1: 1e-4,
            lr_phase2: 1e-5,
            phase1_epochs: 14,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            max_steps: None,
            flip_augment: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.phase1_epochs > self.epochs {
            return Err(Error::Config(format!(
                "phase1_epochs ({}) exceeds epochs ({})",
                self.phase1_epochs, self.epochs
            )));
        }
        let rates = [self.lr_phase1, self.lr_phase2, self.adam_eps];
        if rates.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return Err(Error::Config("learning rates and adam_eps must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        self.loss.validate()
    }
}

/// Learning rate for `epoch` (zero-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside a {}-epoch schedule", cfg.epochs)));
    }
    Ok(if epoch < cfg.phase1_epochs { cfg.lr_phase1 } else { cfg.lr_phase2 })
}

/// Adam moments, one buffer per parameter in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a (String, Tensor<f32>)>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|(_, p)| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        Self { t: 0, m, v }
    }

    fn entries(&self, names: &[&str]) -> Result<Vec<NamedTensor>> {
        let mut out = Vec::with_capacity(2 * names.len());
        for ((name, m), v) in names.iter().zip(&self.m).zip(&self.v) {
            out.push(NamedTensor::new(format!("adam.m.{name}"), vec![m.len()], m.clone())?);
            out.push(NamedTensor::new(format!("adam.v.{name}"), vec![v.len()], v.clone())?);
        }
        Ok(out)
    }

    fn from_entries(t: u64, names: &[(&str, usize)], entries: &[NamedTensor]) -> Result<Self> {
        let find = |key: String, len: usize| -> Result<Vec<f32>> {
            let e = entries
                .iter()
                .find(|e| e.name == key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks optimiser entry {key}")))?;
            if e.data.len() != len {
                return Err(Error::Format(format!("optimiser entry {key} has {} values, expected {len}", e.data.len())));
            }
            Ok(e.data.clone())
        };
        let mut s = Self { t, m: Vec::new(), v: Vec::new() };
        for &(name, len) in names {
            s.m.push(find(format!("adam.m.{name}"), len)?);
            s.v.push(find(format!("adam.v.{name}"), len)?);
        }
        Ok(s)
    }
}

/// One bias-corrected Adam update. All gradients are checked before any
/// parameter changes, so a non-finite gradient leaves the model untouched.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a (String, Tensor<f32>)>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    let params: Vec<&(String, Tensor<f32>)> = params.into_iter().collect();
    if params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "optimiser tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    let mut grads = Vec::with_capacity(params.len());
    for (name, p) in &params {
        let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{i}] is {}", g[i])));
        }
        grads.push(g);
    }
    state.t += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (((_, p), g), (m, v)) in params.iter().zip(&grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        p.update_data(|w| {
            for i in 0..w.len() {
                let gi = f64::from(g[i]);
                let mi = b1 * f64::from(m[i]) + (1.0 - b1) * gi;
                let vi = b2 * f64::from(v[i]) + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                w[i] = (f64::from(w[i]) - step) as f32;
            }
        });
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub automask_fraction: Vec<f64>,
    pub lr: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Progress {
    /// Epochs fully completed.
    epoch: usize,
    step: usize,
    adam_t: u64,
    train: TrainConfig,
}

/// Mirrors `[N, C, H, W]` images left-right.
fn flip_horizontal(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let w = x.dims4()?.3;
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for row in d.chunks_exact(w) {
        out.extend(row.iter().rev());
    }
    Tensor::from_vec(x.shape(), out)
}

fn shared_intrinsics(batch: &[&Triplet]) -> Result<CameraIntrinsics> {
    let k = batch[0].intrinsics;
    if batch.iter().any(|t| t.intrinsics != k) {
        return Err(Error::invalid("a batch mixes camera intrinsics"));
    }
    Ok(k)
}

/// Training state for one run: model, optimiser and position in the
/// schedule.
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub adam: AdamState,
    /// Epochs fully completed.
    pub epoch: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config.decoder.scales != config.loss.scales {
            return Err(Error::Config(format!(
                "decoder emits {} scales, loss expects {}",
                model.config.decoder.scales, config.loss.scales
            )));
        }
        let adam = AdamState::new(model.parameters());
        Ok(Self {
            model,
            config,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    /// Restores model, optimiser and schedule position from a checkpoint
    /// written by [`Trainer::save`]. `config` replaces the stored training
    /// configuration when given.
    pub fn resume(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let (model, extra, entries) = Model::<f32>::load(path)?;
        let progress: Progress = serde_json::from_value(extra)
            .map_err(|e| Error::file(path, format!("not a training checkpoint: {e}")))?;
        let mut t = Self::new(model, config.unwrap_or(progress.train))?;
        let names: Vec<(&str, usize)> = t.model.parameters().map(|(n, p)| (n.as_str(), p.numel())).collect();
        t.adam = AdamState::from_entries(progress.adam_t, &names, &entries).map_err(|e| Error::file(path, e))?;
        t.epoch = progress.epoch;
        t.step = progress.step;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let progress = Progress {
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam.t,
            train: self.config.clone(),
        };
        let names: Vec<&str> = self.model.parameters().map(|(n, _)| n.as_str()).collect();
        self.model
            .save(path, serde_json::to_value(progress)?, &self.adam.entries(&names)?)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Batch order for `epoch`; a pure function of the seed and epoch.
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Evaluates the objective on a batch without touching gradients.
    pub fn evaluate(&self, batch: &[&Triplet]) -> Result<LossRecord> {
        crate::tensor::no_grad(|| Ok(self.objective(batch, false)?.record()))
    }

    fn objective(&self, batch: &[&Triplet], flip: bool) -> Result<crate::losses::LossBreakdown<f32>> {
        let mut k = shared_intrinsics(batch)?;
        let Batch { mut target, mut sources } = Batch::from_triplets(batch)?;
        if flip {
            target = flip_horizontal(&target)?;
            for s in &mut sources {
                *s = flip_horizontal(s)?;
            }
            k.cx = (k.width - 1) as f64 - k.cx;
        }
        let disparities = self.model.depth.forward(&target)?;
        let poses = self.model.pose.neighbour_motions(&sources[0], &target, &sources[1])?;
        total_loss(
            &target,
            &sources,
            &disparities,
            &poses,
            &k,
            self.model.config.decoder.depth_range,
            &self.config.loss,
        )
    }

    /// Forward, backward and one Adam update on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &[&Triplet], lr: f64, flip: bool) -> Result<LossRecord> {
        self.model.zero_grad();
        let loss = self.objective(batch, flip)?;
        let record = loss.record();
        if !record.total.is_finite() {
            return Err(Error::NonFinite(format!("loss is {} at step {}", record.total, self.step)));
        }
        loss.total.backward()?;
        adam_step(
            self.model.parameters(),
            &mut self.adam,
            lr,
            self.config.betas,
            self.config.adam_eps,
        )?;
        self.step += 1;
        Ok(record)
    }

    /// Runs the next epoch, calling `log` after every step.
    pub fn run_epoch(&mut self, data: &[Triplet], mut log: impl FnMut(&StepLog) -> Result<()>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.config)?;
        let order = self.epoch_order(epoch, data.len());
        let mut coin = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_f11b);
        coin.set_stream(epoch as u64);
        for chunk in order.chunks(self.config.batch_size) {
            if self.config.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let flip = self.config.flip_augment && coin.gen_bool(0.5);
            let batch: Vec<&Triplet> = chunk.iter().map(|&i| &data[i]).collect();
            let r = self.train_step(&batch, lr, flip)?;
            log(&StepLog {
                epoch,
                step: self.step,
                total: r.total,
                photometric: r.photometric,
                smoothness: r.smoothness,
                automask_fraction: r.automask_fraction,
                lr,
            })?;
        }
        self.epoch += 1;
        Ok(())
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains until the schedule (or `max_steps`) is exhausted.
///
/// With a run directory, every step is appended to `train_log.jsonl` and the
/// full state is checkpointed after each epoch, both per epoch and as
/// `latest.dft`. A failing step leaves the last checkpoint in place.
pub fn train(trainer: &mut Trainer, data: &[Triplet], run_dir: Option<&Path>) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut writer = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            let p = dir.join(LOG_FILE);
            let f = OpenOptions::new()
                .create(true)
                .append(trainer.step > 0)
                .write(true)
                .truncate(trainer.step == 0)
                .open(&p)
                .map_err(|e| Error::file(&p, e))?;
            Some((p, BufWriter::new(f)))
        }
        None => None,
    };
    let mut report = TrainReport {
        log: Vec::new(),
        checkpoint: None,
    };
    while !trainer.finished() {
        let epoch = trainer.epoch;
        trainer.run_epoch(data, |s| {
            if let Some((p, w)) = writer.as_mut() {
                serde_json::to_writer(&mut *w, s).map_err(|e| Error::file(p.as_path(), e))?;
                w.write_all(b"\n").map_err(|e| Error::file(p.as_path(), e))?;
            }
            report.log.push(s.clone());
            Ok(())
        })?;
        if let Some((p, w)) = writer.as_mut() {
            w.flush().map_err(|e| Error::file(p.as_path(), e))?;
        }
        let first = report.log.iter().position(|s| s.epoch == epoch);
        if let Some(i) = first {
            let tail = &report.log[i..];
            log::info!(
                "epoch {epoch}: mean loss {:.5} over {} steps",
                tail.iter().map(|s| s.total).sum::<f64>() / tail.len() as f64,
                tail.len()
            );
        }
        if let Some(dir) = run_dir {
            let per_epoch = dir.join(format!("checkpoint_epoch{epoch:03}.dft"));
            trainer.save(&per_epoch)?;
            let latest = dir.join(LATEST_CHECKPOINT);
            std::fs::copy(&per_epoch, &latest).map_err(|e| Error::file(&latest, e))?;
            report.checkpoint = Some(latest);
        }
    }
    Ok(report)
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::file(path, e)))
        .collect()
}
