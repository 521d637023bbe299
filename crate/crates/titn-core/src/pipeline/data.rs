//! Dataset containers and loaders: MNIST IDX, CIFAR-10/100 binary, and the
//! in-process synthetic task used for dataset-free runs.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::{resize_nearest, ImageDims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Raw pixel dataset: `u8` images, integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub dims: ImageDims,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[u8] {
        let isz = self.dims.numel();
        &self.images[index * isz..(index + 1) * isz]
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.dims.numel() {
            return Err(Error::Format {
                what: "dataset",
                detail: format!(
                    "{} labels but {} image bytes for {:?}",
                    self.len(),
                    self.images.len(),
                    self.dims
                ),
            });
        }
        for &l in &self.labels {
            if l >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    /// Nearest-neighbor resize of every image (e.g. 28x28 digits to a
    /// patch-divisible 32x32).
    pub fn resized(&self, new_h: usize, new_w: usize) -> Dataset {
        let isz = self.dims.numel();
        let mut images = Vec::with_capacity(self.len() * self.dims.channels * new_h * new_w);
        for img in self.images.chunks_exact(isz) {
            images.extend(resize_nearest(img, self.dims, new_h, new_w));
        }
        Dataset {
            images,
            labels: self.labels.clone(),
            dims: ImageDims {
                channels: self.dims.channels,
                height: new_h,
                width: new_w,
            },
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;

/// Parse the big-endian IDX pair for one MNIST split. File names follow the
/// official distribution (`train-*` / `t10k-*`, decompressed).
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let fmt = |detail: String| Error::Format {
        what: "mnist",
        detail,
    };

    let img_bytes = read_file(&images_path)?;
    if img_bytes.len() < 16 {
        return Err(fmt(format!("{}: truncated header", images_path.display())));
    }
    let magic = be_u32(&img_bytes, 0);
    if magic != IDX_IMAGE_MAGIC {
        return Err(fmt(format!(
            "{}: magic {magic}, expected {IDX_IMAGE_MAGIC}",
            images_path.display()
        )));
    }
    let count = be_u32(&img_bytes, 4) as usize;
    let rows = be_u32(&img_bytes, 8) as usize;
    let cols = be_u32(&img_bytes, 12) as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() < expected {
        return Err(fmt(format!("{}: truncated image data", images_path.display())));
    }
    if img_bytes.len() > expected {
        return Err(fmt(format!("{}: trailing bytes", images_path.display())));
    }

    let lab_bytes = read_file(&labels_path)?;
    if lab_bytes.len() < 8 {
        return Err(fmt(format!("{}: truncated header", labels_path.display())));
    }
    let magic = be_u32(&lab_bytes, 0);
    if magic != IDX_LABEL_MAGIC {
        return Err(fmt(format!(
            "{}: magic {magic}, expected {IDX_LABEL_MAGIC}",
            labels_path.display()
        )));
    }
    let lab_count = be_u32(&lab_bytes, 4) as usize;
    if lab_bytes.len() != 8 + lab_count {
        return Err(fmt(format!("{}: truncated label data", labels_path.display())));
    }
    if lab_count != count {
        return Err(fmt(format!(
            "image file declares {count} samples, label file {lab_count}"
        )));
    }

    let dataset = Dataset {
        images: img_bytes[16..].to_vec(),
        labels: lab_bytes[8..].iter().map(|&b| b as usize).collect(),
        dims: ImageDims {
            channels: 1,
            height: rows,
            width: cols,
        },
        num_classes: 10,
        split,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Ten,
    Hundred,
}

/// CIFAR binary records: 3073 bytes for CIFAR-10 (label + 3072 pixels) and
/// 3074 for CIFAR-100 (coarse + fine labels + pixels; the fine label is used).
pub fn load_cifar(dir: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let (files, record, classes): (Vec<PathBuf>, usize, usize) = match (variant, split) {
        (CifarVariant::Ten, Split::Train) => (
            (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect(),
            3073,
            10,
        ),
        (CifarVariant::Ten, Split::Test) => (vec![dir.join("test_batch.bin")], 3073, 10),
        (CifarVariant::Hundred, Split::Train) => (vec![dir.join("train.bin")], 3074, 100),
        (CifarVariant::Hundred, Split::Test) => (vec![dir.join("test.bin")], 3074, 100),
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in &files {
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::Format {
                what: "cifar",
                detail: format!(
                    "{}: {} bytes is not a whole number of {record}-byte records",
                    path.display(),
                    bytes.len()
                ),
            });
        }
        for chunk in bytes.chunks_exact(record) {
            let label = match variant {
                CifarVariant::Ten => chunk[0] as usize,
                CifarVariant::Hundred => chunk[1] as usize,
            };
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            labels.push(label);
            images.extend_from_slice(&chunk[record - 3072..]);
        }
    }
    let dataset = Dataset {
        images,
        labels,
        dims: ImageDims {
            channels: 3,
            height: 32,
            width: 32,
        },
        num_classes: classes,
        split,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Deterministic separable toy task: class k is a centered 2-d cosine grating
/// with a class-specific frequency pair, plus seeded amplitude jitter and
/// pixel noise. Labels cycle over classes so every split is balanced.
pub fn synthetic_dataset(
    num_classes: usize,
    samples: usize,
    image_size: usize,
    seed: u64,
    split: Split,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.06).expect("positive std");
    let s = image_size;
    let mut images = Vec::with_capacity(samples * s * s);
    let mut labels = Vec::with_capacity(samples);
    let center = (s as f64 - 1.0) / 2.0;
    for i in 0..samples {
        let k = i % num_classes;
        let fx = (1 + k % 3 + k / 3) as f64;
        let fy = (1 + (k + 1) % 3 + k / 3) as f64;
        let amp: f64 = rng.random_range(0.85..1.15);
        for y in 0..s {
            for x in 0..s {
                let u = (x as f64 - center) / s as f64;
                let v = (y as f64 - center) / s as f64;
                let signal = 0.5
                    + 0.35
                        * amp
                        * (std::f64::consts::TAU * fx * u).cos()
                        * (std::f64::consts::TAU * fy * v).cos();
                let value = (signal + noise.sample(&mut rng)).clamp(0.0, 1.0);
                images.push((value * 255.0).round() as u8);
            }
        }
        labels.push(k);
    }
    Dataset {
        images,
        labels,
        dims: ImageDims {
            channels: 1,
            height: s,
            width: s,
        },
        num_classes,
        split,
    }
}
