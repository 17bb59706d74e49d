//! SGD with momentum, cosine learning-rate restarts, weight EMA, and the
//! epoch loop with best-validation checkpointing.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{derive_rng, BatchIter, Dataset, Preprocessor};
use crate::error::{Error, Result};
use crate::metrics::{Latency, MetricsReport};
use crate::model::Model;
use crate::ops;
use crate::params::{apply_updates, Graph, Mode, ModelState};
use crate::tensor::{Scalar, Tensor};

/// Keeps dropout streams apart from the data streams derived from the
/// same seed.
const DROPOUT_STREAM_BASE: u64 = 1 << 40;
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub t_max_epochs: usize,
    pub eta_min: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    pub seed: u64,
    /// Select and report with EMA weights rather than raw weights.
    pub eval_with_ema: bool,
    /// Hold `eta_min` after the first cycle instead of restarting.
    pub no_restart: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            t_max_epochs: 40,
            eta_min: 1e-6,
            momentum: 0.9,
            batch_size: 16,
            epochs: 200,
            ema_decay: 0.995,
            seed: 0,
            eval_with_ema: true,
            no_restart: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr0 && self.lr0.is_finite()) {
            return bad(format!("need 0 <= eta_min ({}) <= lr0 ({})", self.eta_min, self.lr0));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.t_max_epochs == 0 {
            return bad("t_max_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// `eta_min + (lr0 - eta_min)(1 + cos(pi * t / t_max)) / 2` with
/// `t = epoch mod t_max`, or `t = min(epoch, t_max)` without restarts.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let t_max = cfg.t_max_epochs.max(1);
    let t = if cfg.no_restart { epoch.min(t_max) } else { epoch % t_max };
    let lr = cfg.eta_min + 0.5 * (cfg.lr0 - cfg.eta_min) * (1.0 + (PI * t as f64 / t_max as f64).cos());
    // Rounding can land one ulp outside the range at the cycle ends.
    lr.clamp(cfg.eta_min, cfg.lr0)
}

#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub momentum: f64,
    pub step: u64,
    pub lr: f64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &[Tensor<T>], momentum: f64) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            momentum,
            step: 0,
            lr: 0.0,
        }
    }
}

/// Heavy-ball SGD: `v = mu * v + g`, `w -= lr * v`.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut OptimState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((w, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::Dimension(format!(
                "param {:?}, grad {:?}, velocity {:?}",
                w.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    let mu = T::from_f64(state.momentum);
    let rate = T::from_f64(lr);
    for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi;
            *wi = *wi - rate * *vi;
        }
    }
    state.step += 1;
    state.lr = lr;
    Ok(())
}

/// `shadow = decay * shadow + (1 - decay) * value`, elementwise.
pub fn ema_update<T: Scalar>(shadow: &mut [Tensor<T>], values: &[Tensor<T>], decay: f64) -> Result<()> {
    if shadow.len() != values.len() || shadow.iter().zip(values).any(|(s, v)| s.shape() != v.shape()) {
        return Err(Error::Dimension("EMA shadow layout differs from the tracked tensors".into()));
    }
    let d = T::from_f64(decay);
    let one_minus = T::from_f64(1.0 - decay);
    for (s, v) in shadow.iter_mut().zip(values) {
        for (si, &vi) in s.data_mut().iter_mut().zip(v.data()) {
            *si = d * *si + one_minus * vi;
        }
    }
    Ok(())
}

/// Shadow copy of parameters and batch-norm buffers. Starts at the initial
/// values, has no bias correction, and never enters a gradient.
#[derive(Debug, Clone)]
pub struct EmaState<T> {
    pub shadow: ModelState<T>,
    pub decay: f64,
    pub updates: u64,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(initial: &ModelState<T>, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            shadow: initial.clone(),
            decay,
            updates: 0,
        })
    }

    pub fn update(&mut self, state: &ModelState<T>) -> Result<()> {
        ema_update(&mut self.shadow.params, &state.params, self.decay)?;
        ema_update(&mut self.shadow.buffers, &state.buffers, self.decay)?;
        self.updates += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean over the epoch's training batches.
    pub train_loss: f64,
    /// Selection weights (EMA or raw) on the val split.
    pub val_acc: f64,
    /// Raw weights on the unaugmented train split, eval mode.
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub first_batch_loss: f64,
    pub steps: u64,
    pub selection_weights: String,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_acc,train_acc\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_acc, r.train_acc);
        }
        out
    }

    /// `key = value` summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "epochs = {}", self.epochs.len());
        let _ = writeln!(out, "steps = {}", self.steps);
        let _ = writeln!(out, "first_batch_loss = {}", self.first_batch_loss);
        let _ = writeln!(out, "best_epoch = {}", self.best_epoch);
        let _ = writeln!(out, "best_val_acc = {}", self.best_val_acc);
        let _ = writeln!(out, "selection_weights = {}", self.selection_weights);
        if let Some(last) = self.epochs.last() {
            let _ = writeln!(out, "final_train_loss = {}", last.train_loss);
            let _ = writeln!(out, "final_train_acc = {}", last.train_acc);
        }
        if let Some(p) = &self.best_checkpoint {
            let _ = writeln!(out, "best_checkpoint = {}", p.display());
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("train_report.csv"), self.to_csv())?;
        fs::write(dir.join("train_report.txt"), self.to_text())?;
        Ok(())
    }
}

/// Result of [`train`]: the report plus raw and EMA weights from the best
/// validation epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best_raw: ModelState<f32>,
    pub best_ema: ModelState<f32>,
}

impl TrainOutcome {
    pub fn best_weights(&self, ema: bool) -> &ModelState<f32> {
        if ema {
            &self.best_ema
        } else {
            &self.best_raw
        }
    }
}

pub struct TrainSetup<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub pre: &'a Preprocessor,
    /// Where `best.ckpt` goes; `None` keeps everything in memory.
    pub out_dir: Option<&'a Path>,
}

/// Runs the epoch loop. On return `model` holds the final raw weights.
pub fn train(model: &mut Model<f32>, setup: &TrainSetup<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if setup.train.is_empty() || setup.val.is_empty() {
        return Err(Error::Argument("train and val splits must be nonempty".into()));
    }
    let k = model.config().num_classes;
    if setup.train.num_classes() != k {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {k}",
            setup.train.num_classes()
        )));
    }

    let mut opt = OptimState::new(&model.state().params, cfg.momentum);
    let mut ema = EmaState::new(model.state(), cfg.ema_decay)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelState<f32>, ModelState<f32>)> = None;
    let mut first_batch_loss = None;
    let ckpt_path = setup.out_dir.map(|d| d.join("best.ckpt"));

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let batches = BatchIter::new(setup.train, setup.pre, Mode::Train, cfg.batch_size, true, cfg.seed, epoch)?;
        for (step_in_epoch, batch) in batches.enumerate() {
            let batch = batch?;
            if batch.labels.len() < 2 {
                // Batch statistics need two samples at the 1x1 stages.
                log::debug!("epoch {epoch}: skipping single-sample batch");
                continue;
            }
            let rng = derive_rng(cfg.seed, DROPOUT_STREAM_BASE + epoch as u64, step_in_epoch as u64);
            let (loss, grads, updates) = {
                let mut g = Graph::new(model.state(), Mode::Train, true).with_rng(rng);
                let x = g.input(batch.images);
                let logits = model.forward(&mut g, x)?;
                let loss_var = g.tape.cross_entropy(logits, &batch.labels)?;
                let loss = g.tape.value(loss_var).item()? as f64;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step: opt.step as usize,
                        loss,
                    });
                }
                let mut grads = g.tape.backward(loss_var)?;
                let vars = g.param_vars().to_vec();
                let grads: Vec<Tensor<f32>> = vars
                    .iter()
                    .zip(&model.state().params)
                    .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect();
                (loss, grads, g.take_updates())
            };
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step: opt.step as usize,
                    loss: f64::NAN,
                });
            }
            first_batch_loss.get_or_insert(loss);
            loss_sum += loss * batch.labels.len() as f64;
            seen += batch.labels.len();
            let state = model.state_mut();
            apply_updates(state, updates)?;
            sgd_step(&mut state.params, &grads, &mut opt, lr)?;
            ema.update(model.state())?;
        }

        let weights = if cfg.eval_with_ema { &ema.shadow } else { model.state() };
        let val_acc = accuracy(model, weights, setup.val, setup.pre)?;
        let train_acc = accuracy(model, model.state(), setup.train, setup.pre)?;
        let train_loss = if seen == 0 { f64::NAN } else { loss_sum / seen as f64 };
        log::info!("epoch {epoch} lr {lr:.3e} loss {train_loss:.4} train_acc {train_acc:.4} val_acc {val_acc:.4}");
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_acc,
            train_acc,
        });

        if best.as_ref().map_or(true, |b| val_acc > b.1) {
            if let Some(path) = &ckpt_path {
                let meta = CheckpointMeta {
                    epoch,
                    best_val_acc: val_acc,
                    class_names: setup.train.class_names.clone(),
                    image_size: setup.pre.size,
                    normalization: setup.pre.normalization,
                };
                checkpoint::save(path, model, Some(&ema.shadow), &meta)?;
            }
            best = Some((epoch, val_acc, model.state().clone(), ema.shadow.clone()));
        }
    }

    let (best_epoch, best_val_acc, best_raw, best_ema) = best.expect("at least one epoch ran");
    let report = TrainReport {
        epochs: records,
        best_epoch,
        best_val_acc,
        best_checkpoint: ckpt_path,
        first_batch_loss: first_batch_loss.unwrap_or(f64::NAN),
        steps: opt.step,
        selection_weights: if cfg.eval_with_ema { "ema" } else { "raw" }.into(),
    };
    Ok(TrainOutcome {
        report,
        best_raw,
        best_ema,
    })
}

/// Eval-mode softmax probabilities, one row per sample in dataset order.
pub fn predict_probs(model: &Model<f32>, weights: &ModelState<f32>, ds: &Dataset, pre: &Preprocessor) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(ds.len());
    for batch in BatchIter::new(ds, pre, Mode::Eval, EVAL_BATCH, false, 0, 0)? {
        let batch = batch?;
        let logits = model.logits_with(weights, &batch.images)?;
        rows.extend(softmax_rows(&logits)?);
    }
    Ok(rows)
}

fn softmax_rows(logits: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let (_, k) = logits.dims2()?;
    let probs = ops::softmax(&logits.cast::<f64>())?;
    Ok(probs.data().chunks(k).map(<[f64]>::to_vec).collect())
}

pub fn accuracy(model: &Model<f32>, weights: &ModelState<f32>, ds: &Dataset, pre: &Preprocessor) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let probs = predict_probs(model, weights, ds, pre)?;
    let preds = crate::metrics::argmax_rows(&probs);
    let correct = preds.iter().zip(&ds.samples).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Full metrics over `ds`. Samples run one at a time so that the latency
/// statistics are per-sample forward times (preprocessing excluded).
pub fn evaluate(model: &Model<f32>, weights: &ModelState<f32>, ds: &Dataset, pre: &Preprocessor) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let mut rows = Vec::with_capacity(ds.len());
    let mut times = Vec::with_capacity(ds.len());
    for batch in BatchIter::new(ds, pre, Mode::Eval, 1, false, 0, 0)? {
        let batch = batch?;
        let start = Instant::now();
        let logits = model.logits_with(weights, &batch.images)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        rows.extend(softmax_rows(&logits)?);
    }
    let mut report = MetricsReport::from_scores(&ds.class_names, &rows, &ds.labels())?;
    report.latency = Latency::from_millis(&times);
    Ok(report)
}

/// Per-sample forward latency over `repeats` runs of a fixed input.
pub fn measure_latency(model: &Model<f32>, image_size: usize, repeats: usize, warmup: usize) -> Result<Latency> {
    let x = Tensor::full(&[1, 3, image_size, image_size], 0.1f32);
    for _ in 0..warmup {
        model.logits(&x)?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        model.logits(&x)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Latency::from_millis(&times).ok_or_else(|| Error::Argument("latency needs at least one repeat".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg), 0.01);
        assert_eq!(cosine_lr(40, &cfg), 0.01);
        assert!((cosine_lr(20, &cfg) - 5.0005e-3).abs() < 1e-12);
        let clamp = TrainConfig {
            no_restart: true,
            ..cfg
        };
        assert_eq!(cosine_lr(57, &clamp), clamp.eta_min);
    }

    #[test]
    fn sgd_hand_recurrence() {
        let mut w = vec![Tensor::<f64>::zeros(&[1])];
        let g = vec![Tensor::<f64>::ones(&[1])];
        let mut st = OptimState::new(&w, 0.9);
        sgd_step(&mut w, &g, &mut st, 0.1).unwrap();
        assert!((w[0].data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut w, &g, &mut st, 0.1).unwrap();
        assert!((st.velocity[0].data()[0] - 1.9).abs() < 1e-15);
        assert!((w[0].data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut w = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = OptimState::new(&w, 0.9);
        assert!(sgd_step(&mut w, &[Tensor::zeros(&[3])], &mut st, 0.1).is_err());
    }

    #[test]
    fn ema_decay_zero_tracks_latest() {
        let mut s = vec![Tensor::<f64>::zeros(&[2])];
        ema_update(&mut s, &[Tensor::full(&[2], 3.0)], 0.0).unwrap();
        assert_eq!(s[0].data(), &[3.0, 3.0]);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { ema_decay: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { eta_min: 0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
