//! SGD with momentum and coupled weight decay under cosine annealing.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sample_training_segment, Piece, SplitManifest};
use crate::eval::{confusion_matrix, predict_pieces, weighted_f1};
use crate::nn::{cross_entropy, Layer, ModelConfig, ResNet, Slot, Tensor};
use crate::parallel;
use crate::pianoroll::{RollSource, Variant, PITCHES, SEGMENT_BINS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("gradient for '{0}' is missing or mis-shaped")]
    MissingGrad(String),
    #[error("training split is too small: {0}")]
    TooFewPieces(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model takes {model} input channels but variant {variant} has {got}")]
    VariantMismatch { model: usize, variant: Variant, got: usize },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

/// Momentum buffers plus the update hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    /// One buffer per trainable parameter, in visit order; allocated on the first step.
    pub velocity: Vec<Tensor<T>>,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_min: f64,
}

impl<T: crate::nn::Scalar> OptimizerState<T> {
    pub fn new(lr0: f64, momentum: f64, weight_decay: f64, lr_min: f64) -> Result<Self, TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(lr0 >= 0.0 && lr0.is_finite()) {
            return bad(format!("lr0 {lr0}"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return bad(format!("momentum {momentum} outside [0, 1)"));
        }
        if !(weight_decay >= 0.0) {
            return bad(format!("weight_decay {weight_decay}"));
        }
        if !(lr_min >= 0.0 && lr_min <= lr0) {
            return bad(format!("lr_min {lr_min} outside [0, lr0]"));
        }
        Ok(Self {
            velocity: Vec::new(),
            lr0,
            momentum,
            weight_decay,
            lr_min,
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self, TrainError> {
        Self::new(cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.lr_min)
    }
}

/// One parameter's update: `g' = g + wd·p; v = m·v + g'; p -= lr·v`.
pub fn sgd_update<T: crate::nn::Scalar>(p: &mut [T], g: &[T], v: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, m, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Applies [`sgd_update`] to every trainable parameter of `model`. Buffers
/// such as batch-norm running statistics are left alone.
pub fn sgd_step<T: crate::nn::Scalar, L: Layer<T> + ?Sized>(
    model: &mut L,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    let mut idx = 0;
    let mut failure = None;
    let (m, wd) = (state.momentum, state.weight_decay);
    let velocity = &mut state.velocity;
    model.visit_mut("", &mut |name, slot| {
        let Slot::Param(p) = slot else { return };
        if failure.is_some() {
            return;
        }
        if p.grad.shape() != p.value.shape() {
            failure = Some(name.to_string());
            return;
        }
        if velocity.len() == idx {
            velocity.push(Tensor::zeros(p.value.shape()));
        }
        if velocity[idx].shape() != p.value.shape() {
            failure = Some(name.to_string());
            return;
        }
        let grad = p.grad.data().to_vec();
        sgd_update(p.value.data_mut(), &grad, velocity[idx].data_mut(), lr, m, wd);
        idx += 1;
    });
    match failure {
        Some(name) => Err(TrainError::MissingGrad(name)),
        None => Ok(()),
    }
}

/// Position `t` of `total` in the annealing schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub t: usize,
    pub total: usize,
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(πt/T))`; `t` is clamped to `T`.
pub fn cosine_lr(state: ScheduleState, lr0: f64, lr_min: f64) -> f64 {
    let total = state.total.max(1) as f64;
    let t = (state.t as f64).min(total);
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t / total).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// `t` = epoch index, `T` = epochs.
    #[default]
    PerEpoch,
    /// `t` = optimizer step, `T` = total steps.
    PerStep,
}

/// Pieces scored for best-checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationSource {
    /// The manifest's held-out split.
    #[default]
    Test,
    /// No validation; the last epoch is also the best.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    /// Random segments drawn per training piece per epoch.
    pub visits_per_epoch: usize,
    pub validation: ValidationSource,
    /// Validate after every `val_every` epochs (and after the last); 0 disables.
    pub val_every: usize,
    pub val_segments: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_min: 0.0,
            batch_size: 16,
            epochs: 100,
            schedule: Schedule::PerEpoch,
            visits_per_epoch: 1,
            validation: ValidationSource::Test,
            val_every: 1,
            val_segments: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        OptimizerState::<f32>::from_config(self)?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch norm)");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.visits_per_epoch == 0 {
            return bad("visits_per_epoch must be positive");
        }
        if self.val_segments == 0 {
            return bad("val_segments must be positive");
        }
        Ok(())
    }

    fn validates_after(&self, epoch: usize) -> bool {
        self.validation == ValidationSource::Test
            && self.val_every > 0
            && ((epoch + 1) % self.val_every == 0 || epoch + 1 == self.epochs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_f1: Option<f64>,
}

pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,val_f1\n");
    for l in logs {
        let val = l.val_f1.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{val}\n", l.epoch, l.lr, l.train_loss, l.train_acc));
    }
    out
}

pub fn write_log_csv(path: &Path, logs: &[EpochLog]) -> Result<(), TrainError> {
    fs::write(path, log_csv(logs)).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: ResNet<f32>,
    /// Epoch of `best`, 0-based.
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
    pub last: ResNet<f32>,
    pub log: Vec<EpochLog>,
}

/// Deterministic 64-bit mix of a seed with a path of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut x = seed;
    for &p in path {
        // splitmix64 finaliser
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

const STREAM_ORDER: u64 = 1;
const STREAM_SEGMENT: u64 = 2;

/// Batch boundaries over `n` items; a trailing singleton joins the previous batch.
pub fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(batch.max(1)).map(|s| s..(s + batch).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = tail.end;
    }
    out
}

/// Training loop. Each epoch visits every training piece `visits_per_epoch`
/// times in a seeded shuffled order and draws one random window per visit.
/// Window sampling uses a generator keyed by `(seed, epoch, position)`, so
/// results do not depend on the worker count.
pub fn fit(
    manifest: &SplitManifest,
    rolls: &dyn RollSource,
    variant: Variant,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> crate::Result<FitOutcome> {
    cfg.validate()?;
    if model_cfg.in_channels != variant.channels() {
        return Err(TrainError::VariantMismatch {
            model: model_cfg.in_channels,
            variant,
            got: variant.channels(),
        }
        .into());
    }
    if model_cfg.n_classes != manifest.n_classes() {
        return Err(TrainError::Config(format!(
            "model has {} classes, manifest {}",
            model_cfg.n_classes,
            manifest.n_classes()
        ))
        .into());
    }
    let visits: Vec<&Piece> = manifest
        .train
        .iter()
        .flat_map(|p| std::iter::repeat_n(p, cfg.visits_per_epoch))
        .collect();
    if visits.len() < 2 {
        return Err(TrainError::TooFewPieces(format!("{} training visits per epoch", visits.len())).into());
    }
    let mut model = ResNet::<f32>::new(model_cfg, derive_seed(seed, &[0]))?;
    let mut opt = OptimizerState::from_config(cfg)?;
    let batches = batch_ranges(visits.len(), cfg.batch_size);
    let total_steps = cfg.epochs * batches.len();
    let channels = variant.channels();
    let seg_len = channels * SEGMENT_BINS * PITCHES;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ResNet<f32>, usize, Option<f64>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..visits.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_ORDER, epoch as u64])));
        let epoch_lr = cosine_lr(
            ScheduleState {
                t: epoch,
                total: cfg.epochs,
            },
            cfg.lr0,
            cfg.lr_min,
        );
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for range in &batches {
            let segments = parallel::map_range(range.len(), |i| -> crate::Result<(Vec<f32>, usize)> {
                let pos = range.start + i;
                let piece = visits[order[pos]];
                let roll = rolls.roll(piece.id())?;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SEGMENT, epoch as u64, pos as u64]));
                let seg = sample_training_segment(&roll, piece, variant, &mut rng);
                Ok((seg.data, piece.composer_label))
            });
            let mut data = Vec::with_capacity(range.len() * seg_len);
            let mut labels = Vec::with_capacity(range.len());
            for s in segments {
                let (d, l) = s?;
                data.extend_from_slice(&d);
                labels.push(l);
            }
            let x = Tensor::from_vec(&[labels.len(), channels, SEGMENT_BINS, PITCHES], data)?;
            model.zero_grad();
            let logits = model.forward_train(&x)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            let loss = f64::from(loss);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step, loss }.into());
            }
            model.backward(&grad)?;
            let lr = match cfg.schedule {
                Schedule::PerEpoch => epoch_lr,
                Schedule::PerStep => cosine_lr(
                    ScheduleState {
                        t: step,
                        total: total_steps,
                    },
                    cfg.lr0,
                    cfg.lr_min,
                ),
            };
            sgd_step(&mut model, &mut opt, lr)?;
            step += 1;
            loss_sum += loss * labels.len() as f64;
            seen += labels.len();
            let k = model_cfg.n_classes;
            correct += logits
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax_f32(row) == l)
                .count();
        }
        let val_f1 = if cfg.validates_after(epoch) {
            Some(validation_f1(&model, manifest, rolls, variant, cfg.val_segments)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_f1,
        };
        log::info!(
            "epoch {epoch}: lr {:.5} loss {:.4} acc {:.3} val_f1 {:?}",
            entry.lr,
            entry.train_loss,
            entry.train_acc,
            entry.val_f1
        );
        on_epoch(&entry);
        log.push(entry);
        if let Some(f1) = val_f1 {
            if best.as_ref().is_none_or(|(_, _, b)| b.is_none_or(|b| f1 > b)) {
                best = Some((model.clone(), epoch, Some(f1)));
            }
        }
    }
    let (best, best_epoch, best_val_f1) = best.unwrap_or_else(|| (model.clone(), cfg.epochs - 1, None));
    Ok(FitOutcome {
        best,
        best_epoch,
        best_val_f1,
        last: model,
        log,
    })
}

fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn validation_f1(
    model: &ResNet<f32>,
    manifest: &SplitManifest,
    rolls: &dyn RollSource,
    variant: Variant,
    n_segments: usize,
) -> crate::Result<f64> {
    let preds = predict_pieces(model, &manifest.test, rolls, n_segments, variant)?;
    let pairs: Vec<(usize, usize)> = preds.iter().map(|p| (p.true_label, p.final_label)).collect();
    Ok(weighted_f1(&confusion_matrix(manifest.n_classes(), &pairs)?)?)
}
