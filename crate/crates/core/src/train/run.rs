//! Optimizer, learning-rate schedule and the supervised training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::RenderedSample;
use crate::lm::{Model, Vocab};
use crate::rng::{domain, stream};

use super::batch::{encode_all, EncodedSample, MaskedBatch};
use super::loss::{batch_loss, composite_loss, LossParts};
use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to `min_lr_ratio * lr`.
    Cosine,
    /// Linear warmup, then constant.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub min_lr_ratio: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Fraction of samples held out to track generalisation loss.
    pub holdout_fraction: f64,
    pub max_holdout: usize,
    /// Stop after the first epoch whose mean training loss is below this.
    pub early_stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_steps: 1,
            batch_size: 16,
            epochs: 8,
            schedule: Schedule::Cosine,
            min_lr_ratio: 0.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            holdout_fraction: 0.02,
            max_holdout: 512,
            early_stop_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps > 0");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("min_lr_ratio must be in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate for 1-based optimizer step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
                let floor = self.lr * self.min_lr_ratio;
                floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Adam with optional decoupled weight decay and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Adam {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Applies one update in place; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [f32], grads: &mut [f32], lr: f64, cfg: &TrainConfig) -> f64 {
        let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = (cfg.grad_clip / norm) as f32;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        let eps = cfg.eps as f32;
        let wd = (cfg.weight_decay as f32) * lr;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps) + wd * params[i];
        }
        norm
    }
}

/// One row of the per-step metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub epoch: usize,
    /// Per-token mean NLL of the batch.
    pub loss: f64,
    pub lr: f64,
    pub loss_optimal: Option<f64>,
    pub loss_backtrack: Option<f64>,
    pub tokens: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetric {
    /// 0 is the untrained model.
    pub epoch: usize,
    /// Token-weighted mean training loss over the epoch (None for epoch 0).
    pub train_loss: Option<f64>,
    pub holdout_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// How per-position losses are reduced; the optimal and backtrack terms
    /// in the step log are the same reduction restricted to each sample kind.
    pub averaging: String,
    pub n_train: usize,
    pub n_holdout: usize,
    pub total_steps: usize,
    pub steps: Vec<StepMetric>,
    pub epochs: Vec<EpochMetric>,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.train_loss)
    }
}

/// Token-weighted mean loss over `samples`, evaluated in chunks.
pub fn dataset_loss(model: &Model<f32>, samples: &[EncodedSample], chunk: usize) -> Result<LossParts, TrainError> {
    let mut parts = LossParts::default();
    for c in samples.chunks(chunk.max(1)) {
        let batch = MaskedBatch::from_samples(c);
        let (_, p) = batch_loss(model, &batch)?;
        parts.add(&p);
    }
    Ok(parts)
}

/// Splits off the holdout slice with a seeded permutation.
fn split_holdout(encoded: Vec<EncodedSample>, cfg: &TrainConfig) -> (Vec<EncodedSample>, Vec<EncodedSample>) {
    let n = encoded.len();
    let want = ((n as f64) * cfg.holdout_fraction).round() as usize;
    let n_hold = want.min(cfg.max_holdout).min(n.saturating_sub(1));
    if n_hold == 0 {
        return (encoded, Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(cfg.seed, &[domain::SHUFFLE, u64::MAX]));
    let mut is_hold = vec![false; n];
    for &i in &order[..n_hold] {
        is_hold[i] = true;
    }
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for (i, s) in encoded.into_iter().enumerate() {
        if is_hold[i] {
            hold.push(s);
        } else {
            train.push(s);
        }
    }
    (train, hold)
}

/// Supervised training over rendered samples.
///
/// Samples are shuffled every epoch with a seeded permutation, so the whole
/// run is a deterministic function of the initial weights, the samples and
/// `cfg`. `on_step` is called after every optimizer step.
pub fn train(
    model: &mut Model<f32>,
    vocab: &Vocab,
    samples: &[RenderedSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetric),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let encoded = encode_all(vocab, samples)?;
    if let Some(s) = encoded.iter().find(|s| s.tokens.len() - 1 > model.config.context_len) {
        return Err(TrainError::Lm(crate::lm::LmError::ContextOverflow {
            len: s.tokens.len() - 1,
            max: model.config.context_len,
        }));
    }
    let (train_set, holdout) = split_holdout(encoded, cfg);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut report = TrainReport {
        averaging: "per-token mean over unmasked completion positions of the batch".into(),
        n_train: train_set.len(),
        n_holdout: holdout.len(),
        total_steps,
        steps: Vec::with_capacity(total_steps),
        epochs: Vec::new(),
    };
    let holdout_loss = |m: &Model<f32>| -> Result<Option<f64>, TrainError> {
        if holdout.is_empty() {
            return Ok(None);
        }
        Ok(Some(dataset_loss(m, &holdout, cfg.batch_size)?.mean()))
    };
    report.epochs.push(EpochMetric { epoch: 0, train_loss: None, holdout_loss: holdout_loss(model)? });

    let mut opt = Adam::new(model.n_params());
    let mut step = 0;
    let use_dropout = model.config.dropout > 0.0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[domain::SHUFFLE, epoch as u64]));
        let mut epoch_parts = LossParts::default();
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = MaskedBatch::from_samples(idx.iter().map(|&i| &train_set[i]));
            let mut drop_rng = stream(cfg.seed, &[domain::DROPOUT, step as u64]);
            let out = composite_loss(model, &batch, use_dropout.then_some(&mut drop_rng))?;
            if !out.loss.is_finite() {
                return Err(TrainError::Diverged(step));
            }
            let mut grads = out.grads;
            let lr = cfg.lr_at(step, total_steps);
            let grad_norm = opt.step(&mut model.params, &mut grads, lr, cfg);
            epoch_parts.add(&out.parts);
            let metric = StepMetric {
                step,
                epoch,
                loss: out.loss,
                lr,
                loss_optimal: out.parts.optimal_mean(),
                loss_backtrack: out.parts.backtrack_mean(),
                tokens: out.parts.tokens(),
                grad_norm,
            };
            on_step(&metric);
            report.steps.push(metric);
        }
        let train_loss = epoch_parts.mean();
        report.epochs.push(EpochMetric { epoch, train_loss: Some(train_loss), holdout_loss: holdout_loss(model)? });
        if cfg.early_stop_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }
    Ok(report)
}

/// Writes the step log as CSV with a header row.
pub fn write_metrics_csv(path: &Path, report: &TrainReport) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for m in &report.steps {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}
