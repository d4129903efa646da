//! Training loop: ℓ1 loss, Adam, step-decayed learning rate, per-epoch
//! validation and checkpointing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor, TensorBundle};
use crate::backbone::{Model, StrategyConfig};
use crate::data::{DataSample, Dataset};
use crate::error::{io_err, Error, Result};
use crate::metrics::evaluate_model;
use crate::nn::{derive_seed, seeded_rng, Params};
use crate::parallel::par_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: StrategyConfig,
    pub adam: AdamConfig,
    /// Stop after this many optimizer steps (whole run), if set.
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    /// Desk defaults: 20 epochs, batch 4.
    pub fn desk(strategy: StrategyConfig, seed: u64) -> Self {
        Self {
            initial_lr: 1.5e-4,
            lr_decay: 0.9,
            decay_every: 5,
            epochs: 20,
            batch_size: 4,
            seed,
            strategy,
            adam: AdamConfig::default(),
            max_steps: None,
        }
    }

    /// 50 epochs, batch 8.
    pub fn full(strategy: StrategyConfig, seed: u64) -> Self {
        Self { epochs: 50, batch_size: 8, ..Self::desk(strategy, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_lr > 0.0
            && self.initial_lr.is_finite()
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.decay_every > 0
            && self.batch_size > 0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid hyperparameters: lr {}, decay {}, every {}, batch {}",
                self.initial_lr, self.lr_decay, self.decay_every, self.batch_size
            )));
        }
        self.strategy.validate()
    }

    /// `initial_lr · decay^⌊epoch / decay_every⌋` for zero-based `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(with = "crate::metrics::lossless_f64")]
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based index of the finished epoch.
    pub epoch: usize,
    pub lr: f64,
    #[serde(with = "crate::metrics::lossless_f64")]
    pub train_loss: f64,
    #[serde(with = "crate::metrics::lossless_f64")]
    pub val_psnr: f64,
    #[serde(with = "crate::metrics::lossless_f64")]
    pub val_ssim: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub seconds: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{},{}", s.step, s.epoch, s.lr, s.loss);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Epoch with the highest validation PSNR; earliest wins ties.
    pub fn argmax_val_psnr(&self) -> Option<usize> {
        let mut best: Option<&EpochRecord> = None;
        for e in &self.epochs {
            if best.map_or(true, |b| e.val_psnr > b.val_psnr) {
                best = Some(e);
            }
        }
        best.map(|e| e.epoch)
    }
}

/// Metadata written next to each checkpoint container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub strategy: String,
    pub n_cascades: usize,
    pub channels: usize,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub config: StrategyConfig,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: Params,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn config(&self) -> &StrategyConfig {
        &self.manifest.config
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.manifest.config.clone())
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new();
        self.params.to_bundle("param.", &mut b);
        for (i, name) in self.params.names().iter().enumerate() {
            b.insert_f32(format!("adam.m.{name}"), self.adam.m[i].clone());
            b.insert_f32(format!("adam.v.{name}"), self.adam.v[i].clone());
        }
        b.insert_f64("adam.step", Tensor::scalar(self.adam.step as f64));
        b
    }

    /// Writes `{stem}.ttmt` and `{stem}.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.to_bundle().save(&dir.join(format!("{stem}.ttmt")))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(&self.manifest)?).map_err(io_err(&json))
    }

    /// Loads from a `.ttmt` path or a stem; the manifest sits alongside.
    pub fn load(path: &Path) -> Result<Self> {
        let tensors = path.with_extension("ttmt");
        let json = path.with_extension("json");
        let text = fs::read_to_string(&json).map_err(io_err(&json))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let model = Model::new(manifest.config.clone())?;
        let template: Params = model.init(0);
        let bundle = TensorBundle::load(&tensors)?;
        let params = Params::from_bundle(&template, "param.", &bundle)?;
        let mut adam = AdamState::new(params.tensors());
        for (i, name) in params.names().iter().enumerate() {
            adam.m[i] = bundle.f32(&format!("adam.m.{name}"))?.clone();
            adam.v[i] = bundle.f32(&format!("adam.v.{name}"))?.clone();
            adam.m[i].check_shape(params.tensors()[i].shape(), name)?;
            adam.v[i].check_shape(params.tensors()[i].shape(), name)?;
        }
        adam.step = match bundle.get("adam.step") {
            Some(crate::autodiff::Entry::F64(t)) if t.numel() == 1 => t.data()[0] as u64,
            _ => return Err(Error::Format(format!("{}: missing adam.step", tensors.display()))),
        };
        Ok(Self { manifest, params, adam })
    }
}

pub fn checkpoint_stem(epoch: usize) -> String {
    format!("epoch_{epoch:03}")
}

/// Mean ℓ1 loss and its parameter gradients for one sample.
pub fn sample_loss_and_grads(model: &Model, params: &Params, sample: &DataSample) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let vars = model.bind_sample(&mut g, sample)?;
    let out = model.forward(&mut g, &p, &vars)?;
    let target = g.constant(sample.y.tensor().clone());
    let loss = g.l1_loss(out.y, target)?;
    let value = g.value(loss).data()[0] as f64;
    let mut grads = g.backward(loss)?;
    let gs = p
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, gs))
}

/// Batch-mean loss and gradients; per-sample results are reduced in batch order.
pub fn batch_loss_and_grads(
    model: &Model,
    params: &Params,
    batch: &[&DataSample],
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let parts: Vec<(f64, Vec<Tensor<f32>>)> =
        par_map(batch, |s| sample_loss_and_grads(model, params, s)).into_iter().collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f32;
    let mut loss = 0.0;
    let mut total: Vec<Tensor<f32>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (l, gs) in parts {
        loss += l;
        for (acc, g) in total.iter_mut().zip(&gs) {
            acc.add_assign(g);
        }
    }
    for t in &mut total {
        *t = t.scale(inv);
    }
    Ok((loss / batch.len() as f64, total))
}

/// Per-epoch permutation of `0..n` from `hash(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(derive_seed(seed, &[0xE90C, epoch as u64])));
    order
}

/// Mean validation PSNR and SSIM.
pub fn validate(checkpoint: &Checkpoint, val: &[DataSample]) -> Result<(f64, f64)> {
    let model = checkpoint.model()?;
    validate_params(&model, &checkpoint.params, val)
}

pub fn validate_params(model: &Model, params: &Params, val: &[DataSample]) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let r = evaluate_model(model, params, val, "validation")?;
    Ok((r.psnr.mean, r.ssim.mean))
}

/// Where and how often to persist progress.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

/// Trains from initialization.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: &TrainOutput) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let model = Model::new(cfg.strategy.clone())?;
    let params: Params = model.init(cfg.seed);
    let start = Checkpoint {
        manifest: manifest_for(cfg, 0, 0, Vec::new()),
        adam: AdamState::new(params.tensors()),
        params,
    };
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("train_config.json");
        fs::write(&path, serde_json::to_string_pretty(cfg)?).map_err(io_err(&path))?;
        start.save(dir, &checkpoint_stem(0))?;
    }
    run(cfg, &model, data, start, TrainLog::default(), out)
}

/// Continues from a checkpoint saved by an earlier run with the same config.
pub fn resume(
    cfg: &TrainConfig,
    data: &Dataset,
    from: Checkpoint,
    prior: TrainLog,
    out: &TrainOutput,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if from.manifest.config != cfg.strategy || from.manifest.seed != cfg.seed {
        return Err(Error::InvalidArgument("checkpoint does not belong to this training configuration".into()));
    }
    let model = Model::new(cfg.strategy.clone())?;
    let done = from.manifest.epoch;
    let mut log = prior;
    log.steps.retain(|s| s.epoch < done);
    log.epochs.retain(|e| e.epoch < done);
    log.best_epoch = log.argmax_val_psnr();
    run(cfg, &model, data, from, log, out)
}

fn manifest_for(cfg: &TrainConfig, epoch: usize, step: usize, history: Vec<EpochRecord>) -> CheckpointManifest {
    CheckpointManifest {
        strategy: cfg.strategy.strategy.name().into(),
        n_cascades: cfg.strategy.cascade.n_cascades,
        channels: cfg.strategy.cascade.hidden,
        seed: cfg.seed,
        epoch,
        step,
        config: cfg.strategy.clone(),
        history,
    }
}

fn run(
    cfg: &TrainConfig,
    model: &Model,
    data: &Dataset,
    mut ckpt: Checkpoint,
    mut log: TrainLog,
    out: &TrainOutput,
) -> Result<(Checkpoint, TrainLog)> {
    if cfg.epochs > ckpt.manifest.epoch && data.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let clock = Instant::now();
    let mut step = ckpt.manifest.step;
    let mut best = log.best_epoch.and_then(|b| log.epochs.iter().find(|e| e.epoch == b)).map(|e| e.val_psnr);
    for epoch in ckpt.manifest.epoch..cfg.epochs {
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break;
        }
        let t0 = Instant::now();
        let lr = cfg.lr(epoch);
        let order = epoch_order(cfg.seed, epoch, data.train.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&DataSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (loss, grads) = batch_loss_and_grads(model, &ckpt.params, &batch)?;
            if !loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    lr,
                    batch: batch.iter().map(|s| s.name()).collect(),
                });
            }
            adam_step(ckpt.params.tensors_mut(), &grads, &mut ckpt.adam, lr, &cfg.adam)?;
            log.steps.push(StepRecord { step, epoch, lr, loss });
            log::debug!("epoch {epoch} step {step} lr {lr:e} loss {loss:.6}");
            step += 1;
            epoch_loss += loss;
            batches += 1;
        }
        let (val_psnr, val_ssim) =
            if data.val.is_empty() { (f64::NAN, f64::NAN) } else { validate_params(model, &ckpt.params, &data.val)? };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_psnr,
            val_ssim,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.5} val {:.3} dB / {:.4} ({:.1}s)",
            cfg.strategy.strategy,
            record.train_loss,
            val_psnr,
            val_ssim,
            record.seconds
        );
        log.epochs.push(record);
        ckpt.manifest = manifest_for(cfg, epoch + 1, step, log.epochs.clone());
        let improved = best.map_or(true, |b| val_psnr > b);
        if improved {
            best = Some(val_psnr);
            log.best_epoch = Some(epoch);
        }
        if let Some(dir) = &out.dir {
            ckpt.save(dir, &checkpoint_stem(epoch + 1))?;
            if improved {
                ckpt.save(dir, "best")?;
            }
        }
    }
    log.seconds += clock.elapsed().as_secs_f64();
    if let Some(dir) = &out.dir {
        let csv = dir.join("train_log.csv");
        fs::write(&csv, log.to_csv()).map_err(io_err(&csv))?;
        let json = dir.join("train_log.json");
        fs::write(&json, log.to_json()?).map_err(io_err(&json))?;
        ckpt.save(dir, "final")?;
    }
    Ok((ckpt, log))
}

pub fn load_log(path: &Path) -> Result<TrainLog> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
