//! Loss stack and teacher abstraction.
//!
//! The training objective mixes a CutMix cross-entropy on the class-token
//! logits with a hard-label cross-entropy on the distillation-token logits
//! against the teacher's argmax class:
//!
//! ```text
//! loss = alpha * [lambda*CE(class, l1) + (1-lambda)*CE(class, l2)]
//!      + (1 - alpha) * CE(distill, teacher_label)
//! ```
//!
//! Teacher scores come from a [`TeacherProvider`]: either a logits file keyed
//! by sample index ([`TeacherLogits`]) or an in-process callable such as
//! [`OracleTeacher`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp bound applied to logits before the log-sum-exp; guards against
/// overflow without affecting realistic values.
pub const LOGIT_CLAMP: f64 = 1e4;

/// Mixing weights: `distill_alpha` blends the two loss terms, `cutmix_alpha`
/// parameterizes the Beta distribution the mixing coefficient is drawn from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub distill_alpha: f64,
    pub cutmix_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            distill_alpha: 0.5,
            cutmix_alpha: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.distill_alpha) {
            return Err(Error::InvalidConfig(format!(
                "distill_alpha {} outside [0, 1]",
                self.distill_alpha
            )));
        }
        if !(self.cutmix_alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cutmix_alpha {} must be positive",
                self.cutmix_alpha
            )));
        }
        Ok(())
    }
}

/// Mean over the batch of -log softmax(logits)[label], stabilized via
/// log-sum-exp with max subtraction.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            shape: shape.to_vec(),
            detail: format!("expected [batch={}, classes]", labels.len()),
        });
    }
    if shape[1] < 2 {
        return Err(Error::InvalidConfig(format!(
            "cross_entropy needs at least 2 classes, got {}",
            shape[1]
        )));
    }
    logits
        .clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
        .log_softmax(1)?
        .nll_loss(labels)
}

/// Mean of -(y log p + (1-y) log(1-p)) over probabilities `p` in (0, 1).
/// Probabilities are clamped at 1e-12 from both ends; values outside [0, 1]
/// are rejected.
pub fn binary_cross_entropy(p: &Tensor, y: &[f64]) -> Result<Tensor> {
    if p.shape() != [y.len()] {
        return Err(Error::InvalidShape {
            op: "binary_cross_entropy",
            shape: p.shape().to_vec(),
            detail: format!("expected [batch={}]", y.len()),
        });
    }
    for &t in y {
        if t != 0.0 && t != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "binary_cross_entropy target {t} is not in {{0, 1}}"
            )));
        }
    }
    for v in p.value() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!(
                "binary_cross_entropy probability {v} outside [0, 1]"
            )));
        }
    }
    let tape = p.tape().clone();
    let clamped = p.clamp(1e-12, 1.0 - 1e-12);
    let log_p = clamped.ln();
    let log_1p = clamped.neg().add_scalar(1.0).ln();
    let ty = tape.leaf(y.to_vec(), &[y.len()])?;
    let t1y = tape.leaf(y.iter().map(|&t| 1.0 - t).collect(), &[y.len()])?;
    Ok(ty
        .mul(&log_p)?
        .add(&t1y.mul(&log_1p)?)?
        .mean()
        .neg())
}

/// Convex combination of cross-entropies against the two CutMix labels.
pub fn cutmix_loss(
    logits: &Tensor,
    label_1: &[usize],
    label_2: &[usize],
    lambda: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "cutmix lambda {lambda} outside [0, 1]"
        )));
    }
    let ce1 = cross_entropy(logits, label_1)?;
    let ce2 = cross_entropy(logits, label_2)?;
    ce1.mul_scalar(lambda).add(&ce2.mul_scalar(1.0 - lambda))
}

/// Argmax with ties broken toward the lowest index.
pub fn teacher_hard_label(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Full objective over both logit heads; see the module docs.
#[allow(clippy::too_many_arguments)]
pub fn distillation_loss(
    class_logits: &Tensor,
    distill_logits: &Tensor,
    label_1: &[usize],
    label_2: &[usize],
    lambda: f64,
    teacher_labels: &[usize],
    alpha: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!(
            "distill alpha {alpha} outside [0, 1]"
        )));
    }
    let base = cutmix_loss(class_logits, label_1, label_2, lambda)?;
    let distill = cross_entropy(distill_logits, teacher_labels)?;
    base.mul_scalar(alpha).add(&distill.mul_scalar(1.0 - alpha))
}

// ---------------------------------------------------------------------------
// Teachers

/// Source of per-sample teacher class scores. `index` is the dataset index of
/// the sample; `image` is the (possibly augmented) normalized image, for
/// implementations that actually look at pixels.
pub trait TeacherProvider {
    fn num_classes(&self) -> usize;
    fn scores(&self, index: usize, image: &[f64]) -> Vec<f64>;
}

/// Teacher that emits a one-hot score vector of the true label. Useful as a
/// deterministic stand-in for a live teacher network.
pub struct OracleTeacher {
    labels: Vec<usize>,
    num_classes: usize,
}

impl OracleTeacher {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Self {
        OracleTeacher {
            labels,
            num_classes,
        }
    }
}

impl TeacherProvider for OracleTeacher {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn scores(&self, index: usize, _image: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.num_classes];
        s[self.labels[index]] = 1.0;
        s
    }
}

/// Teacher logits stored row-major, as read from a TLOG file.
///
/// TLOG layout (little-endian): magic `b"TLOG"`, u32 version = 1,
/// u32 num_samples, u32 num_classes, then num_samples * num_classes f32.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLogits {
    pub num_samples: usize,
    pub num_classes: usize,
    pub scores: Vec<f32>,
}

pub const TLOG_MAGIC: &[u8; 4] = b"TLOG";
pub const TLOG_VERSION: u32 = 1;

impl TeacherLogits {
    pub fn new(num_samples: usize, num_classes: usize, scores: Vec<f32>) -> Result<Self> {
        if scores.len() != num_samples * num_classes {
            return Err(Error::Format {
                what: "teacher logits",
                detail: format!(
                    "{num_samples} x {num_classes} rows need {} values, got {}",
                    num_samples * num_classes,
                    scores.len()
                ),
            });
        }
        Ok(TeacherLogits {
            num_samples,
            num_classes,
            scores,
        })
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.scores[index * self.num_classes..(index + 1) * self.num_classes]
    }

    pub fn hard_label(&self, index: usize) -> usize {
        let row: Vec<f64> = self.row(index).iter().map(|&v| v as f64).collect();
        teacher_hard_label(&row)
    }

    /// NaN-freedom over all rows.
    pub fn validate(&self) -> Result<()> {
        if let Some(pos) = self.scores.iter().position(|v| v.is_nan()) {
            return Err(Error::Format {
                what: "teacher logits",
                detail: format!("NaN at row {}", pos / self.num_classes),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut w = BufWriter::new(file);
        let mut out = |bytes: &[u8]| {
            w.write_all(bytes).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })
        };
        out(TLOG_MAGIC)?;
        out(&TLOG_VERSION.to_le_bytes())?;
        out(&(self.num_samples as u32).to_le_bytes())?;
        out(&(self.num_classes as u32).to_le_bytes())?;
        for &v in &self.scores {
            out(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Parse and validate a TLOG file (header, size, NaN-freedom).
    pub fn load(path: &Path) -> Result<Self> {
        let io = |e: std::io::Error| Error::Io {
            path: path.display().to_string(),
            source: e,
        };
        let fmt = |detail: String| Error::Format {
            what: "teacher logits",
            detail,
        };
        let file = File::open(path).map_err(io)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != TLOG_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io)?;
        let version = u32::from_le_bytes(u32buf);
        if version != TLOG_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        r.read_exact(&mut u32buf).map_err(io)?;
        let num_samples = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf).map_err(io)?;
        let num_classes = u32::from_le_bytes(u32buf) as usize;
        let mut scores = vec![0f32; num_samples * num_classes];
        for v in scores.iter_mut() {
            r.read_exact(&mut u32buf)
                .map_err(|_| fmt("truncated score matrix".into()))?;
            *v = f32::from_le_bytes(u32buf);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(fmt("trailing bytes after score matrix".into()));
        }
        let logits = TeacherLogits {
            num_samples,
            num_classes,
            scores,
        };
        logits.validate()?;
        Ok(logits)
    }
}

impl TeacherProvider for TeacherLogits {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn scores(&self, index: usize, _image: &[f64]) -> Vec<f64> {
        self.row(index).iter().map(|&v| v as f64).collect()
    }
}
