//! Evaluation: batched prediction, top-k accuracy, macro precision/recall/F1,
//! and the per-epoch metrics record.

use rayon::prelude::*;

use crate::augment::{normalize, ChannelStats};
use crate::distill::teacher_hard_label;
use crate::error::{Error, Result};
use crate::tensor::Tape;
use crate::titn::TitnModel;

use super::data::Dataset;

const EVAL_BATCH: usize = 64;

/// Raw logits of both heads over a dataset, row-major `[n, num_classes]`.
pub struct Predictions {
    pub class_logits: Vec<f64>,
    pub distill_logits: Vec<f64>,
    pub num_classes: usize,
    pub n: usize,
}

impl Predictions {
    /// Inference fusion: mean of the two heads' logits.
    pub fn fused(&self) -> Vec<f64> {
        self.class_logits
            .iter()
            .zip(&self.distill_logits)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }
}

/// Evaluate both heads over the dataset. Batches shard across the rayon pool;
/// results are written back by index so the output is order-deterministic.
pub fn predict(model: &TitnModel, dataset: &Dataset, stats: &ChannelStats) -> Result<Predictions> {
    let cfg = &model.config;
    if dataset.dims.channels != cfg.in_channels
        || dataset.dims.height != cfg.image_size
        || dataset.dims.width != cfg.image_size
    {
        return Err(Error::InvalidConfig(format!(
            "dataset images {:?} do not match model input {}x{}x{}",
            dataset.dims, cfg.in_channels, cfg.image_size, cfg.image_size
        )));
    }
    if dataset.num_classes != cfg.num_classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, model has {}",
            dataset.num_classes, cfg.num_classes
        )));
    }
    let n = dataset.len();
    let k = cfg.num_classes;
    let isz = dataset.dims.numel();
    let starts: Vec<usize> = (0..n).step_by(EVAL_BATCH).collect();
    let chunks: Vec<(usize, Vec<f64>, Vec<f64>)> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + EVAL_BATCH).min(n);
            let raw = &dataset.images[start * isz..end * isz];
            let input = normalize(raw, dataset.dims, stats);
            let tape = Tape::new();
            let (c, d) = model.forward(&tape, &input, end - start)?;
            Ok((start, c.value(), d.value()))
        })
        .collect::<Result<_>>()?;

    let mut class_logits = vec![0.0; n * k];
    let mut distill_logits = vec![0.0; n * k];
    for (start, c, d) in chunks {
        class_logits[start * k..start * k + c.len()].copy_from_slice(&c);
        distill_logits[start * k..start * k + d.len()].copy_from_slice(&d);
    }
    Ok(Predictions {
        class_logits,
        distill_logits,
        num_classes: k,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub top1: f64,
    pub top5: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Metrics over row-major `[n, num_classes]` logits.
///
/// Top-k counts a hit when the true label is among the k largest logits,
/// ties broken toward lower class indices; k is capped at the class count.
/// Precision/recall/F1 are macro-averaged with absent classes contributing
/// zero.
pub fn metrics_from_logits(logits: &[f64], num_classes: usize, labels: &[usize]) -> EvalMetrics {
    let n = labels.len();
    assert_eq!(logits.len(), n * num_classes, "logit matrix shape mismatch");
    let k5 = num_classes.min(5);
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        // rank of the true label: classes strictly better, or equal with a
        // lower index
        let lv = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > lv || (v == lv && j < label))
            .count();
        if rank < 1 {
            hit1 += 1;
        }
        if rank < k5 {
            hit5 += 1;
        }
        let pred = teacher_hard_label(row);
        if pred == label {
            tp[label] += 1;
        } else {
            fp[pred] += 1;
            fneg[label] += 1;
        }
    }
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    for c in 0..num_classes {
        let p = if tp[c] + fp[c] > 0 {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        } else {
            0.0
        };
        let r = if tp[c] + fneg[c] > 0 {
            tp[c] as f64 / (tp[c] + fneg[c]) as f64
        } else {
            0.0
        };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        precision += p;
        recall += r;
        f1 += f;
    }
    let kf = num_classes as f64;
    EvalMetrics {
        top1: hit1 as f64 / n as f64,
        top5: hit5 as f64 / n as f64,
        precision: precision / kf,
        recall: recall / kf,
        f1: f1 / kf,
    }
}

/// Fused-logits evaluation of a model over a dataset.
pub fn evaluate(model: &TitnModel, dataset: &Dataset, stats: &ChannelStats) -> Result<EvalMetrics> {
    let preds = predict(model, dataset, stats)?;
    Ok(metrics_from_logits(
        &preds.fused(),
        preds.num_classes,
        &dataset.labels,
    ))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,top1,top5,precision,recall,f1,lr,seconds";

impl MetricsRecord {
    /// CSV row matching [`CSV_HEADER`]. All metric fields print with full
    /// round-trip precision; `seconds` is wall clock and the only field that
    /// varies between identically-seeded runs.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.top1,
            self.top5,
            self.precision,
            self.recall,
            self.f1,
            self.lr,
            self.seconds
        )
    }
}
