//! Training loop: seeded shuffling, crop/flip/CutMix augmentation, the hybrid
//! distillation objective, SGD with cosine-annealed learning rate, per-epoch
//! evaluation, and best-checkpoint retention.

pub mod data;
pub mod metrics;
pub mod optim;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    channel_stats, cutmix, horizontal_flip, normalize, random_crop, sample_lambda, AugmentConfig,
    ChannelStats,
};
use crate::checkpoint::save_checkpoint;
use crate::distill::{
    cutmix_loss, distillation_loss, teacher_hard_label, LossConfig, TeacherProvider,
};
use crate::error::{Error, Result};
use crate::tensor::Tape;
use crate::titn::TitnModel;

use data::Dataset;
use metrics::{evaluate, MetricsRecord};
use optim::{cosine_lr, Sgd};

/// Optimizer, scheduler and augmentation settings for one run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Cosine horizon; defaults to `epochs` when absent.
    pub scheduler_total: Option<usize>,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 20,
            lr_max: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            scheduler_total: None,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be at least 2 (CutMix needs a partner)".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if !(self.lr_max >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_max {} must be non-negative",
                self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        self.loss.validate()
    }
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
/// Seed stream for synthetic dataset generation (used by callers).
pub const STREAM_SYNTHETIC: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent generator seed from (master seed, stream, indices).
pub fn mix_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    for part in [stream, a, b] {
        h = splitmix64(h ^ part);
    }
    h
}

/// Seeded epoch shuffle; a permutation of `0..n`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_SHUFFLE, epoch as u64, 0));
    order.shuffle(&mut rng);
    order
}

/// One already-augmented batch ready for a gradient step. `label_2` and
/// `lambda` carry the CutMix mixing state (`lambda = 1`, `label_2 = label_1`
/// when no mixing happened). `images` are normalized, `[batch, C, H, W]`
/// flattened.
pub struct StepBatch<'a> {
    pub images: &'a [f64],
    pub batch: usize,
    pub label_1: &'a [usize],
    pub label_2: &'a [usize],
    pub lambda: f64,
    pub teacher_labels: Option<&'a [usize]>,
}

/// Forward + loss + backward + SGD update. Returns the loss value; on a
/// non-finite loss the parameters are left untouched so the caller can abort
/// with diagnostics.
pub fn train_step(
    model: &mut TitnModel,
    batch: &StepBatch,
    loss_cfg: &LossConfig,
    sgd: &mut Sgd,
    lr: f64,
) -> Result<f64> {
    let tape = Tape::permissive();
    let bound = model.bind(&tape, true);
    let (t_c, t_d) = model.forward_with(&tape, &bound, batch.images, batch.batch)?;
    let loss = match batch.teacher_labels {
        Some(lt) => distillation_loss(
            &t_c,
            &t_d,
            batch.label_1,
            batch.label_2,
            batch.lambda,
            lt,
            loss_cfg.distill_alpha,
        )?,
        None => cutmix_loss(&t_c, batch.label_1, batch.label_2, batch.lambda)?,
    };
    let value = loss.item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    loss.backward()?;
    let grads: Vec<Option<Vec<f64>>> = model
        .params
        .entries()
        .iter()
        .map(|e| bound.grad_of(&e.name))
        .collect();
    sgd.step(&mut model.params, &grads, lr);
    Ok(value)
}

#[derive(Debug)]
pub struct TrainResult {
    pub records: Vec<MetricsRecord>,
    pub best_top1: f64,
    pub best_epoch: usize,
    pub stats: ChannelStats,
}

/// Train `model` on `train_set`, evaluating on `test_set` after every epoch.
///
/// With a teacher the objective is the full distillation loss; without one it
/// reduces to the CutMix loss on the class head. When `checkpoint_dir` is
/// given, `best.ckpt` tracks the best test top-1 and `final.ckpt` the last
/// epoch. `on_epoch` observes each metrics record as it is produced.
pub fn train(
    model: &mut TitnModel,
    train_set: &Dataset,
    test_set: &Dataset,
    teacher: Option<&dyn TeacherProvider>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainResult> {
    cfg.validate()?;
    train_set.validate()?;
    test_set.validate()?;
    for ds in [train_set, test_set] {
        if ds.num_classes != model.config.num_classes {
            return Err(Error::InvalidConfig(format!(
                "dataset has {} classes, model has {}",
                ds.num_classes, model.config.num_classes
            )));
        }
        if ds.dims.channels != model.config.in_channels
            || ds.dims.height != model.config.image_size
            || ds.dims.width != model.config.image_size
        {
            return Err(Error::InvalidConfig(format!(
                "dataset images {:?} do not match model input {}x{}x{}",
                ds.dims,
                model.config.in_channels,
                model.config.image_size,
                model.config.image_size
            )));
        }
    }
    if let Some(t) = teacher {
        if t.num_classes() != model.config.num_classes {
            return Err(Error::TeacherClassMismatch {
                teacher_classes: t.num_classes(),
                model_classes: model.config.num_classes,
            });
        }
    }

    let stats = channel_stats(&train_set.images, train_set.dims);
    let mut sgd = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let horizon = cfg.scheduler_total.unwrap_or(cfg.epochs);
    let isz = train_set.dims.numel();
    let n = train_set.len();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best_top1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch.min(horizon), horizon, cfg.lr_max, cfg.lr_min)?;
        let order = epoch_order(cfg.seed, epoch, n);
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                cfg.seed,
                STREAM_AUGMENT,
                epoch as u64,
                batch_idx as u64,
            ));
            // crop + flip per sample
            let mut raw = Vec::with_capacity(chunk.len() * isz);
            for &idx in chunk {
                let cropped =
                    random_crop(train_set.image(idx), train_set.dims, cfg.augment.crop_pad, &mut rng);
                raw.extend(horizontal_flip(
                    &cropped,
                    train_set.dims,
                    cfg.augment.flip_prob,
                    &mut rng,
                ));
            }
            let label_1: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let apply_cutmix = chunk.len() >= 2
                && cfg.augment.cutmix_prob > 0.0
                && rng.random::<f64>() < cfg.augment.cutmix_prob;
            let (images, label_1, label_2, lambda) = if apply_cutmix {
                let lam = sample_lambda(cfg.loss.cutmix_alpha, &mut rng)?;
                let cm = cutmix(&raw, &label_1, train_set.dims, lam, &mut rng)?;
                (cm.images, cm.label_1, cm.label_2, cm.lambda)
            } else {
                (raw, label_1.clone(), label_1, 1.0)
            };
            let input = normalize(&images, train_set.dims, &stats);
            let teacher_labels: Option<Vec<usize>> = teacher.map(|t| {
                chunk
                    .iter()
                    .enumerate()
                    .map(|(j, &idx)| {
                        teacher_hard_label(&t.scores(idx, &input[j * isz..(j + 1) * isz]))
                    })
                    .collect()
            });
            let step = StepBatch {
                images: &input,
                batch: chunk.len(),
                label_1: &label_1,
                label_2: &label_2,
                lambda,
                teacher_labels: teacher_labels.as_deref(),
            };
            let loss = train_step(model, &step, &cfg.loss, &mut sgd, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    value: loss,
                });
            }
            loss_sum += loss * chunk.len() as f64;
        }

        let eval = evaluate(model, test_set, &stats)?;
        let record = MetricsRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            top1: eval.top1,
            top5: eval.top5,
            precision: eval.precision,
            recall: eval.recall,
            f1: eval.f1,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if eval.top1 > best_top1 {
            best_top1 = eval.top1;
            best_epoch = epoch + 1;
            if let Some(dir) = checkpoint_dir {
                save_checkpoint(&dir.join("best.ckpt"), model)?;
            }
        }
        on_epoch(&record);
        records.push(record);
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&dir.join("final.ckpt"), model)?;
    }
    Ok(TrainResult {
        records,
        best_top1,
        best_epoch,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::OracleTeacher;
    use crate::titn::ModelConfig;
    use data::{synthetic_dataset, Split};

    fn tiny_config(classes: usize) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            in_channels: 1,
            patch_size: 4,
            pixel_size: 2,
            patch_dim: 16,
            pixel_dim: 8,
            depth: 1,
            outer_heads: 4,
            inner_heads: 2,
            mlp_ratio: 2,
            num_classes: classes,
        }
    }

    fn tiny_sets() -> (Dataset, Dataset) {
        (
            synthetic_dataset(3, 48, 8, 10, Split::Train),
            synthetic_dataset(3, 24, 8, 11, Split::Test),
        )
    }

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs,
            lr_max: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn epoch_order_is_a_permutation_and_deterministic() {
        let a = epoch_order(7, 3, 100);
        let b = epoch_order(7, 3, 100);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(epoch_order(7, 4, 100), a);
    }

    #[test]
    fn zero_lr_keeps_parameters_bit_identical() {
        let (train_set, test_set) = tiny_sets();
        let mut model = TitnModel::new(tiny_config(3), 0).unwrap();
        let before: Vec<Vec<u64>> = model
            .params
            .entries()
            .iter()
            .map(|e| e.data.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut cfg = quick_cfg(2, 0);
        cfg.lr_max = 0.0;
        train(&mut model, &train_set, &test_set, None, &cfg, None, |_| {}).unwrap();
        let after: Vec<Vec<u64>> = model
            .params
            .entries()
            .iter()
            .map(|e| e.data.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn fixed_seed_reproduces_metric_trajectory() {
        let (train_set, test_set) = tiny_sets();
        let run = || {
            let mut model = TitnModel::new(tiny_config(3), 5).unwrap();
            train(
                &mut model,
                &train_set,
                &test_set,
                None,
                &quick_cfg(2, 9),
                None,
                |_| {},
            )
            .unwrap()
            .records
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.top1, rb.top1);
            assert_eq!(ra.top5, rb.top5);
            assert_eq!(ra.f1, rb.f1);
            assert_eq!(ra.lr, rb.lr);
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let (train_set, _) = tiny_sets();
        let stats = channel_stats(&train_set.images, train_set.dims);
        let mut model = TitnModel::new(tiny_config(3), 1).unwrap();
        let mut sgd = Sgd::new(&model.params, 0.0, 0.0);
        let input = normalize(&train_set.images[..16 * 64], train_set.dims, &stats);
        let labels: Vec<usize> = train_set.labels[..16].to_vec();
        let cfg = LossConfig::default();
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let batch = StepBatch {
                images: &input,
                batch: 16,
                label_1: &labels,
                label_2: &labels,
                lambda: 1.0,
                teacher_labels: None,
            };
            let loss = train_step(&mut model, &batch, &cfg, &mut sgd, 1e-3).unwrap();
            assert!(
                loss < last + 1e-9,
                "loss rose at step {step}: {last} -> {loss}"
            );
            last = loss;
        }
    }

    #[test]
    fn poisoned_parameters_abort_with_batch_diagnostics() {
        let (train_set, test_set) = tiny_sets();
        let mut model = TitnModel::new(tiny_config(3), 2).unwrap();
        model.params.get_mut("class_token").data[0] = f64::NAN;
        let err = train(
            &mut model,
            &train_set,
            &test_set,
            None,
            &quick_cfg(1, 0),
            None,
            |_| {},
        )
        .unwrap_err();
        match err {
            Error::NonFiniteLoss { epoch, batch, .. } => {
                assert_eq!(epoch, 0);
                assert_eq!(batch, 0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn teacher_class_mismatch_is_rejected() {
        let (train_set, test_set) = tiny_sets();
        let mut model = TitnModel::new(tiny_config(3), 3).unwrap();
        let teacher = OracleTeacher::new(train_set.labels.clone(), 7);
        let err = train(
            &mut model,
            &train_set,
            &test_set,
            Some(&teacher),
            &quick_cfg(1, 0),
            None,
            |_| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::TeacherClassMismatch { .. }));
    }

    #[test]
    fn checkpointed_model_reproduces_test_metrics_bit_exactly() {
        let (train_set, test_set) = tiny_sets();
        let dir = tempfile::tempdir().unwrap();
        let mut model = TitnModel::new(tiny_config(3), 4).unwrap();
        let result = train(
            &mut model,
            &train_set,
            &test_set,
            None,
            &quick_cfg(2, 1),
            Some(dir.path()),
            |_| {},
        )
        .unwrap();
        let loaded = crate::checkpoint::load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        let stats = channel_stats(&train_set.images, train_set.dims);
        let a = evaluate(&model, &test_set, &stats).unwrap();
        let b = evaluate(&loaded, &test_set, &stats).unwrap();
        assert_eq!(a, b);
        let last = result.records.last().unwrap();
        assert_eq!(a.top1, last.top1);
        assert_eq!(a.top5, last.top5);
        assert!(last.top5 >= last.top1);
    }
}
