//! Seeded training loop: categorical cross-entropy, Adam, early stopping
//! with best-weight restoration, and bounded checkpointing (best + last).

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::augment::BatchStream;
use crate::ckpt::{self, ParamBlob};
use crate::error::{Error, Result};
use crate::nn::{Param, TensorD};
use crate::zoo::ClassifierModel;

const LOG_EPS: f64 = 1e-12;

/// Anything the loop can train: classifier backbones and the ensemble.
pub trait TrainableModel {
    fn num_classes(&self) -> usize;
    /// Training-mode forward returning class probabilities.
    fn forward_train(&mut self, images: &Array4<f32>) -> Array2<f32>;
    /// Backpropagate dL/dprobs and accumulate parameter gradients.
    fn backward_from_probs(&mut self, dprobs: &Array2<f32>);
    /// Pure inference-mode probabilities.
    fn predict_proba(&self, images: &Array4<f32>) -> Result<Array2<f32>>;
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    fn param_snapshot(&self) -> Vec<(String, TensorD)> {
        let mut entries = Vec::new();
        self.visit_params(&mut |name, p| entries.push((name.to_string(), p.value.clone())));
        entries
    }

    fn restore_snapshot(&mut self, snapshot: &[(String, TensorD)]) {
        let mut idx = 0;
        self.visit_params_mut(&mut |name, p| {
            let (snap_name, value) = &snapshot[idx];
            debug_assert_eq!(name, snap_name);
            p.value.assign(value);
            idx += 1;
        });
        debug_assert_eq!(idx, snapshot.len());
    }

    fn param_checksum(&self) -> String {
        let mut tensors = Vec::new();
        self.visit_params(&mut |_, p| tensors.push(p.value.clone()));
        ckpt::tensor_checksum(tensors.iter())
    }
}

impl TrainableModel for ClassifierModel {
    fn num_classes(&self) -> usize {
        ClassifierModel::num_classes(self)
    }

    fn forward_train(&mut self, images: &Array4<f32>) -> Array2<f32> {
        ClassifierModel::forward_train(self, images)
    }

    fn backward_from_probs(&mut self, dprobs: &Array2<f32>) {
        ClassifierModel::backward_from_probs(self, dprobs)
    }

    fn predict_proba(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        ClassifierModel::predict_proba(self, images)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        ClassifierModel::visit_params(self, f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        ClassifierModel::visit_params_mut(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValLoss,
    ValAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStoppingConfig {
    pub monitor: Monitor,
    pub patience: usize,
    pub restore_best: bool,
}

impl Default for EarlyStoppingConfig {
    fn default() -> Self {
        EarlyStoppingConfig {
            monitor: Monitor::ValLoss,
            patience: 5,
            restore_best: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub early_stopping: EarlyStoppingConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            early_stopping: EarlyStoppingConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.optimizer.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Per-epoch metrics plus the early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based; 0 while no epoch is recorded.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn push(&mut self, record: EpochRecord, monitor: Monitor) {
        self.records.push(record);
        self.best_epoch = self.compute_best(monitor);
    }

    /// First occurrence wins on ties, so the result is deterministic.
    fn compute_best(&self, monitor: Monitor) -> usize {
        let mut best = 0usize;
        let mut best_value = f64::INFINITY;
        for record in &self.records {
            let value = match monitor {
                Monitor::ValLoss => record.val_loss,
                Monitor::ValAccuracy => -record.val_acc,
            };
            if value < best_value {
                best_value = value;
                best = record.epoch;
            }
        }
        best
    }

    pub fn last_epoch(&self) -> usize {
        self.records.last().map(|r| r.epoch).unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stop once the monitored value has gone `patience` epochs without a
/// strict improvement over the best epoch. `patience == 0` degenerates
/// to stopping at the first epoch that fails to improve.
pub fn early_stopping_step(history: &TrainingHistory, patience: usize) -> StopDecision {
    if history.records.is_empty() || history.best_epoch == 0 {
        return StopDecision::Continue;
    }
    let since_best = history.last_epoch() - history.best_epoch;
    if since_best >= patience.max(1) {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

/// Mean categorical cross-entropy: -sum_c y_c ln(max(p_c, 1e-12)),
/// averaged over the batch. Accumulated in f64.
pub fn cross_entropy(probs: &Array2<f32>, onehot: &Array2<f32>) -> Result<f64> {
    if probs.dim() != onehot.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", probs.dim()),
            actual: format!("{:?}", onehot.dim()),
        });
    }
    let n = probs.nrows() as f64;
    let mut total = 0.0f64;
    for (p_row, y_row) in probs.rows().into_iter().zip(onehot.rows()) {
        for (&p, &y) in p_row.iter().zip(y_row.iter()) {
            if y != 0.0 {
                total -= f64::from(y) * f64::from(p).max(LOG_EPS).ln();
            }
        }
    }
    Ok(total / n)
}

/// dL/dprobs for [`cross_entropy`]: -y / (n * max(p, eps)).
pub fn cross_entropy_grad(probs: &Array2<f32>, onehot: &Array2<f32>) -> Array2<f32> {
    let n = probs.nrows() as f32;
    let mut grad = Array2::<f32>::zeros(probs.raw_dim());
    for ((g, &p), &y) in grad.iter_mut().zip(probs.iter()).zip(onehot.iter()) {
        if y != 0.0 {
            *g = -y / (p.max(LOG_EPS as f32) * n);
        }
    }
    grad
}

/// Fraction of rows whose argmax matches the one-hot label.
pub fn accuracy(probs: &Array2<f32>, onehot: &Array2<f32>) -> f64 {
    let mut correct = 0usize;
    for (p_row, y_row) in probs.rows().into_iter().zip(onehot.rows()) {
        let pred = argmax(p_row.iter().copied());
        let label = argmax(y_row.iter().copied());
        if pred == label {
            correct += 1;
        }
    }
    correct as f64 / probs.nrows() as f64
}

pub fn argmax(values: impl Iterator<Item = f32>) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Adam with explicit bias correction. State is kept per parameter in
/// visit order; frozen parameters hold state slots but are never updated.
pub struct Adam {
    cfg: OptimizerConfig,
    t: u64,
    m: Vec<TensorD>,
    v: Vec<TensorD>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn TrainableModel) {
        self.t += 1;
        let Adam { cfg, t, m, v } = self;
        let t = *t as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        let (lr, b1, b2, eps) = (
            cfg.learning_rate as f32,
            cfg.beta1 as f32,
            cfg.beta2 as f32,
            cfg.epsilon as f32,
        );
        let (bias1, bias2) = (bias1 as f32, bias2 as f32);

        let mut idx = 0usize;
        model.visit_params_mut(&mut |_, p| {
            if m.len() <= idx {
                m.push(TensorD::zeros(p.value.raw_dim()));
                v.push(TensorD::zeros(p.value.raw_dim()));
            }
            if p.trainable {
                let m_t = &mut m[idx];
                let v_t = &mut v[idx];
                for ((mi, vi), (pi, gi)) in m_t
                    .iter_mut()
                    .zip(v_t.iter_mut())
                    .zip(p.value.iter_mut().zip(p.grad.iter()))
                {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    let m_hat = *mi / bias1;
                    let v_hat = *vi / bias2;
                    *pi -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            idx += 1;
        });
    }
}

fn eval_pass<M: TrainableModel>(model: &M, stream: &BatchStream) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct_weighted = 0.0;
    let mut n = 0usize;
    for batch in stream.epoch(0) {
        let batch = batch?;
        let probs = model.predict_proba(&batch.images)?;
        let b = batch.images.shape()[0];
        loss_sum += cross_entropy(&probs, &batch.labels)? * b as f64;
        correct_weighted += accuracy(&probs, &batch.labels) * b as f64;
        n += b;
    }
    if n == 0 {
        return Err(Error::StreamExhausted);
    }
    Ok((loss_sum / n as f64, correct_weighted / n as f64))
}

/// Where and how to persist checkpoints during training. `meta` is
/// merged into each checkpoint so the files are self-describing.
pub struct CheckpointSink {
    pub dir: std::path::PathBuf,
    pub meta: serde_json::Value,
}

/// Train a model. At most `cfg.epochs` epochs; stops early per the
/// config and, with `restore_best`, leaves the model holding the
/// best-epoch parameters exactly. With a checkpoint sink, only
/// `best.ckpt` and `last.ckpt` are kept.
pub fn train<M: TrainableModel>(
    model: &mut M,
    train_stream: &BatchStream,
    val_stream: &BatchStream,
    cfg: &TrainingConfig,
    checkpoint: Option<&CheckpointSink>,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    if train_stream.num_batches() == 0 || val_stream.num_batches() == 0 {
        return Err(Error::StreamExhausted);
    }

    let mut adam = Adam::new(cfg.optimizer.clone());
    let mut history = TrainingHistory::default();
    let mut best_snapshot: Option<Vec<(String, TensorD)>> = None;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut n = 0usize;
        for batch in train_stream.epoch((epoch - 1) as u64) {
            let batch = batch?;
            let probs = model.forward_train(&batch.images);
            let loss = cross_entropy(&probs, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, value: loss });
            }
            let b = batch.images.shape()[0];
            loss_sum += loss * b as f64;
            acc_sum += accuracy(&probs, &batch.labels) * b as f64;
            n += b;

            model.zero_grads();
            let dprobs = cross_entropy_grad(&probs, &batch.labels);
            model.backward_from_probs(&dprobs);
            adam.step(model);
        }
        let train_loss = loss_sum / n as f64;
        let train_acc = acc_sum / n as f64;

        let (val_loss, val_acc) = eval_pass(model, val_stream)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                value: val_loss,
            });
        }
        log::info!("epoch={epoch} train_loss={train_loss:.6} val_loss={val_loss:.6}");

        history.push(
            EpochRecord {
                epoch,
                train_loss,
                train_acc,
                val_loss,
                val_acc,
            },
            cfg.early_stopping.monitor,
        );
        if history.best_epoch == epoch {
            best_snapshot = Some(model.param_snapshot());
            if let Some(sink) = checkpoint {
                save_checkpoint(model, sink, epoch, "best.ckpt")?;
            }
        }
        if let Some(sink) = checkpoint {
            save_checkpoint(model, sink, epoch, "last.ckpt")?;
        }

        if early_stopping_step(&history, cfg.early_stopping.patience) == StopDecision::Stop {
            history.stopped_early = true;
            break;
        }
    }

    if cfg.early_stopping.restore_best {
        if let Some(snapshot) = &best_snapshot {
            model.restore_snapshot(snapshot);
        }
    }
    Ok(history)
}

fn save_checkpoint<M: TrainableModel>(
    model: &M,
    sink: &CheckpointSink,
    epoch: usize,
    file: &str,
) -> Result<()> {
    let mut meta = sink.meta.clone();
    if let Some(obj) = meta.as_object_mut() {
        obj.insert("epoch".to_string(), serde_json::json!(epoch));
    }
    let blob = ParamBlob {
        meta,
        entries: model.param_snapshot(),
    };
    ckpt::write_blob(&sink.dir.join(file), &blob)
}
