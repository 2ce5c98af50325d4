//! Mini-batch training with BCE loss and Adam, per-epoch validation, and
//! best-DSC checkpoint retention.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{confusion, Metrics, MetricsReport};
use super::optim::{adam_step, AdamConfig, AdamState};
use crate::autodiff::Tape;
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::model::{self, save_checkpoint, ModelConfig};
use crate::ops::sigmoid_scalar;
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_dsc,val_se,val_sp,val_acc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Drives the train/val split and the per-epoch shuffles.
    pub seed: u64,
    /// Probability cut for turning sigmoid outputs into masks.
    pub threshold: f64,
    /// Share of the dataset held out for validation.
    pub val_fraction: f64,
    /// Also write `epoch_<k>.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            threshold: 0.5,
            val_fraction: 0.2,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Validation size for a dataset of `n` samples; at least one sample
    /// lands on each side.
    pub fn val_count(&self, n: usize) -> usize {
        ((n as f64 * self.val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
}

pub fn history_csv(rows: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.8},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.train_loss, r.val.dsc, r.val.se, r.val.sp, r.val.acc
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub last: ModelParams,
    /// Parameters from the epoch with the highest validation DSC.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// One optimizer step on a batch; returns the mean BCE of the batch.
pub fn train_step(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    batch: &[&Sample],
    state: &mut AdamState,
    adam: &AdamConfig,
) -> Result<f64> {
    let (img, mask) = data::stack(batch)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(img);
    let out = model::forward(&mut tape, &bound, cfg, x)?;
    let loss = tape.bce_with_logits(out.logits, &mask)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    let named: IndexMap<String, Tensor> = bound
        .iter()
        .filter_map(|(name, v)| grads.get(v).map(|g| (name.to_owned(), g.clone())))
        .collect();
    adam_step(params, &named, state, adam)?;
    Ok(value)
}

/// Train from the seeded initialization of `cfg`. When `out_dir` is given,
/// `history.csv` is rewritten after every epoch and `best.ckpt` whenever
/// validation DSC improves.
pub fn train(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tc.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "need nonempty train and validation sets, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut params = model::build(cfg)?;
    let adam = tc.adam();
    let mut state = AdamState::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = train_step(&mut params, cfg, &batch, &mut state, &adam)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: step + 1, loss });
            }
            loss_sum += loss * batch.len() as f64;
        }
        let report = evaluate(&params, cfg, val_set, tc.threshold, tc.batch_size)?;
        let record = EpochRecord { epoch, train_loss: loss_sum / train_set.len() as f64, val: report.micro };
        history.push(record);
        on_epoch(&record);

        let improved = best.as_ref().map_or(true, |(_, dsc, _)| record.val.dsc > *dsc);
        if improved {
            best = Some((epoch, record.val.dsc, params.clone()));
        }
        if let Some(dir) = out_dir {
            fs::write(dir.join("history.csv"), history_csv(&history))?;
            if improved {
                save_checkpoint(&params, cfg, &dir.join("best.ckpt"))?;
            }
            if tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0 {
                save_checkpoint(&params, cfg, &dir.join(format!("epoch_{epoch}.ckpt")))?;
            }
        }
    }
    let (best_epoch, _, best) = best.ok_or_else(|| Error::InvalidConfig("epochs must be at least 1".into()))?;
    Ok(TrainOutcome { last: params, best, best_epoch, history })
}

/// Threshold `sigmoid(logits)` into `[1, H, W]` masks, one per sample.
pub fn predict_masks(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[Sample],
    threshold: f64,
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    let [h, w] = cfg.input_hw;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (img, _) = data::stack(&refs)?;
        let logits = model::predict_logits(params, cfg, &img)?;
        for plane in logits.data().chunks(h * w) {
            let mask = plane.iter().map(|&z| if sigmoid_scalar(z) >= threshold { 1.0 } else { 0.0 }).collect();
            out.push(Tensor::new([1, h, w], mask)?);
        }
    }
    Ok(out)
}

/// Score predicted masks against the ground truth of `samples`.
pub fn score(predictions: &[Tensor], samples: &[Sample], threshold: f64) -> Result<MetricsReport> {
    if predictions.len() != samples.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} samples", predictions.len(), samples.len())));
    }
    let rows = predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| Ok((s.id.clone(), confusion(p, &s.mask)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_samples(threshold, rows))
}

pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[Sample],
    threshold: f64,
    batch_size: usize,
) -> Result<MetricsReport> {
    score(&predict_masks(params, cfg, samples, threshold, batch_size)?, samples, threshold)
}
