//! Run configuration: flag/file merging, the run manifest, dataset loading
//! and teacher construction.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use titn_core::distill::{OracleTeacher, TeacherLogits, TeacherProvider};
use titn_core::pipeline::data::{
    load_cifar, load_mnist, synthetic_dataset, CifarVariant, Dataset, Split,
};
use titn_core::pipeline::{mix_seed, TrainConfig, STREAM_SYNTHETIC};
use titn_core::titn::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Cifar100,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => bail!("unknown dataset {other} (expected mnist|cifar10|cifar100|synthetic)"),
        }
    }
}

impl Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
            DatasetKind::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

/// Everything needed to reproduce the data a run saw.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub data_dir: Option<String>,
    pub num_classes: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
}

impl DatasetSpec {
    pub fn kind(&self) -> Result<DatasetKind> {
        self.name.parse()
    }

    /// Load one split. MNIST images are resized to 32x32 (nearest neighbor)
    /// so the default patch size divides them.
    pub fn load(&self, split: Split, seed: u64) -> Result<Dataset> {
        let need_dir = || -> Result<&Path> {
            self.data_dir
                .as_deref()
                .map(Path::new)
                .context("--data-dir is required for on-disk datasets")
        };
        let ds = match self.kind()? {
            DatasetKind::Synthetic => {
                let (samples, stream) = match split {
                    Split::Train => (self.synthetic_train, 0),
                    Split::Test => (self.synthetic_test, 1),
                };
                synthetic_dataset(
                    self.num_classes,
                    samples,
                    self.image_size,
                    mix_seed(seed, STREAM_SYNTHETIC, stream, 0),
                    split,
                )
            }
            DatasetKind::Mnist => load_mnist(need_dir()?, split)?.resized(32, 32),
            DatasetKind::Cifar10 => load_cifar(need_dir()?, CifarVariant::Ten, split)?,
            DatasetKind::Cifar100 => load_cifar(need_dir()?, CifarVariant::Hundred, split)?,
        };
        Ok(ds)
    }
}

/// Teacher selector: `none`, `oracle`, or `file:<path>`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TeacherSpec(pub String);

impl TeacherSpec {
    pub fn build(&self, train_set: &Dataset) -> Result<Option<Box<dyn TeacherProvider>>> {
        match self.0.as_str() {
            "none" => Ok(None),
            "oracle" => Ok(Some(Box::new(OracleTeacher::new(
                train_set.labels.clone(),
                train_set.num_classes,
            )))),
            other => {
                let path = other
                    .strip_prefix("file:")
                    .with_context(|| format!("unknown teacher {other} (none|file:<path>|oracle)"))?;
                let logits = TeacherLogits::load(Path::new(path))?;
                if logits.num_samples != train_set.len() {
                    bail!(
                        "teacher file holds {} rows but the training split has {} samples",
                        logits.num_samples,
                        train_set.len()
                    );
                }
                Ok(Some(Box::new(logits)))
            }
        }
    }
}

/// Resolved description of one run, written to `manifest.json` before
/// training starts. Re-running from a manifest reproduces the metric
/// trajectory (the wall-clock column excepted).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub dataset_checksum: Option<String>,
    pub teacher: TeacherSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out_dir: String,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// sha256 over raw image bytes and labels of both splits.
pub fn dataset_checksum(train: &Dataset, test: &Dataset) -> String {
    let mut hasher = Sha256::new();
    for ds in [train, test] {
        hasher.update(&ds.images);
        for &l in &ds.labels {
            hasher.update((l as u64).to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Head-count defaults when not set explicitly: prefer 3-way splits (the
/// flagship 192-dim setting), then 4, then 2.
pub fn default_outer_heads(dim: usize) -> usize {
    if dim % 3 == 0 {
        3
    } else if dim % 4 == 0 {
        4
    } else if dim % 2 == 0 {
        2
    } else {
        1
    }
}

pub fn default_inner_heads(dim: usize) -> usize {
    if dim % 2 == 0 {
        2
    } else {
        1
    }
}

/// Plain `key = value` config file; `#` starts a comment. Keys use the flag
/// names with `-` or `_` separators.
pub fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("{}:{}: expected key=value", path.display(), lineno + 1))?;
        map.insert(key.trim().replace('-', "_"), value.trim().to_string());
    }
    Ok(map)
}

/// Flag value, falling back to the config file, then to the default.
pub fn merged<T>(
    flag: Option<T>,
    file: &HashMap<String, String>,
    key: &str,
    default: T,
) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|e| anyhow::anyhow!("config key {key}={raw}: {e}")),
        None => Ok(default),
    }
}

/// Build the output directory, failing loudly on unwritable paths.
pub fn ensure_out_dir(out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out.to_path_buf())
}
