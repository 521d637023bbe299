//! Training-time augmentation over raw `u8` images: CutMix with a
//! Beta-sampled mixing coefficient, zero-padded random crop, random
//! horizontal flip, nearest-neighbor resize, and per-channel normalization.
//!
//! Everything is a pure function of (input, seeded generator), so parallel
//! workers with independent generator streams reproduce bit-exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};

/// Channel/height/width of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Augmentation knobs; the Beta parameter for CutMix lives in
/// [`crate::distill::LossConfig`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub crop_pad: usize,
    pub flip_prob: f64,
    pub cutmix_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_pad: 2,
            flip_prob: 0.5,
            cutmix_prob: 1.0,
        }
    }
}

/// Batch after CutMix pasting: two label vectors and the shared, area-corrected
/// mixing coefficient. `pasted_box` is the clipped `(y1, x1, y2, x2)` region.
#[derive(Debug, Clone)]
pub struct CutMixBatch {
    pub images: Vec<u8>,
    pub dims: ImageDims,
    pub batch: usize,
    pub label_1: Vec<usize>,
    pub label_2: Vec<usize>,
    pub lambda: f64,
    pub pasted_box: (usize, usize, usize, usize),
}

/// Draw the mixing coefficient from Beta(alpha, alpha).
pub fn sample_lambda(beta_alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(beta_alpha > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "cutmix beta parameter must be positive, got {beta_alpha}"
        )));
    }
    let beta = Beta::new(beta_alpha, beta_alpha)
        .map_err(|e| Error::InvalidConfig(format!("beta distribution: {e}")))?;
    Ok(beta.sample(rng))
}

/// Clipped paste box for a given lambda and center, following the usual
/// convention: side lengths `H*sqrt(1-lambda)` and `W*sqrt(1-lambda)`
/// truncated to integers, then clipped to the image bounds.
pub fn cutmix_box(
    height: usize,
    width: usize,
    lambda: f64,
    cy: usize,
    cx: usize,
) -> (usize, usize, usize, usize) {
    let ratio = (1.0 - lambda).max(0.0).sqrt();
    let cut_h = (height as f64 * ratio) as usize;
    let cut_w = (width as f64 * ratio) as usize;
    let y1 = cy.saturating_sub(cut_h / 2);
    let x1 = cx.saturating_sub(cut_w / 2);
    let y2 = (cy + cut_h / 2).min(height);
    let x2 = (cx + cut_w / 2).min(width);
    (y1, x1, y2, x2)
}

/// Paste a box from a permuted partner into every image of the batch and
/// correct lambda to the exact surviving-area fraction.
pub fn cutmix(
    images: &[u8],
    labels: &[usize],
    dims: ImageDims,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<CutMixBatch> {
    let isz = dims.numel();
    let batch = images.len() / isz;
    if batch * isz != images.len() || batch != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "cutmix: {} image bytes / {} labels do not form a batch of {:?}",
            images.len(),
            labels.len(),
            dims
        )));
    }
    if batch < 2 {
        return Err(Error::InvalidConfig(
            "cutmix requires a batch of at least 2".into(),
        ));
    }
    let mut perm: Vec<usize> = (0..batch).collect();
    perm.shuffle(rng);
    let cy = rng.random_range(0..dims.height);
    let cx = rng.random_range(0..dims.width);
    cutmix_at(images, labels, dims, lambda, (cy, cx), &perm)
}

/// Deterministic CutMix with an explicit box center and partner permutation;
/// [`cutmix`] samples both and delegates here.
pub fn cutmix_at(
    images: &[u8],
    labels: &[usize],
    dims: ImageDims,
    lambda: f64,
    center: (usize, usize),
    perm: &[usize],
) -> Result<CutMixBatch> {
    let isz = dims.numel();
    let batch = labels.len();
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "cutmix lambda {lambda} outside [0, 1]"
        )));
    }
    let (y1, x1, y2, x2) = cutmix_box(dims.height, dims.width, lambda, center.0, center.1);
    let area = (y2 - y1) * (x2 - x1);
    let corrected = 1.0 - area as f64 / (dims.height * dims.width) as f64;

    let mut out = images.to_vec();
    for i in 0..batch {
        let src = perm[i];
        for c in 0..dims.channels {
            for y in y1..y2 {
                let dst_base = i * isz + c * dims.height * dims.width + y * dims.width;
                let src_base = src * isz + c * dims.height * dims.width + y * dims.width;
                out[dst_base + x1..dst_base + x2]
                    .copy_from_slice(&images[src_base + x1..src_base + x2]);
            }
        }
    }
    Ok(CutMixBatch {
        images: out,
        dims,
        batch,
        label_1: labels.to_vec(),
        label_2: perm.iter().map(|&p| labels[p]).collect(),
        lambda: corrected,
        pasted_box: (y1, x1, y2, x2),
    })
}

/// Uniform crop offsets over `{0 ..= 2*pad}` per axis.
pub fn crop_offsets(pad: usize, rng: &mut impl Rng) -> (usize, usize) {
    if pad == 0 {
        return (0, 0);
    }
    (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))
}

/// Zero-pad `pad` pixels on each side, then crop back to the original size at
/// a uniform offset.
pub fn random_crop(image: &[u8], dims: ImageDims, pad: usize, rng: &mut impl Rng) -> Vec<u8> {
    let (oy, ox) = crop_offsets(pad, rng);
    crop_at(image, dims, pad, oy, ox)
}

fn crop_at(image: &[u8], dims: ImageDims, pad: usize, oy: usize, ox: usize) -> Vec<u8> {
    if pad == 0 {
        return image.to_vec();
    }
    let (h, w) = (dims.height, dims.width);
    let mut out = vec![0u8; image.len()];
    for c in 0..dims.channels {
        for y in 0..h {
            let src_y = y + oy;
            if src_y < pad || src_y >= pad + h {
                continue;
            }
            for x in 0..w {
                let src_x = x + ox;
                if src_x < pad || src_x >= pad + w {
                    continue;
                }
                out[c * h * w + y * w + x] = image[c * h * w + (src_y - pad) * w + (src_x - pad)];
            }
        }
    }
    out
}

/// Mirror along the width axis.
pub fn flip_width(image: &[u8], dims: ImageDims) -> Vec<u8> {
    let (h, w) = (dims.height, dims.width);
    let mut out = vec![0u8; image.len()];
    for c in 0..dims.channels {
        for y in 0..h {
            for x in 0..w {
                out[c * h * w + y * w + x] = image[c * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Mirror along the width axis with probability `prob`.
pub fn horizontal_flip(image: &[u8], dims: ImageDims, prob: f64, rng: &mut impl Rng) -> Vec<u8> {
    if rng.random::<f64>() < prob {
        flip_width(image, dims)
    } else {
        image.to_vec()
    }
}

/// Nearest-neighbor resize (used to bring 28x28 inputs to a patch-divisible
/// size).
pub fn resize_nearest(image: &[u8], dims: ImageDims, new_h: usize, new_w: usize) -> Vec<u8> {
    let (h, w) = (dims.height, dims.width);
    let mut out = vec![0u8; dims.channels * new_h * new_w];
    for c in 0..dims.channels {
        for y in 0..new_h {
            let sy = y * h / new_h;
            for x in 0..new_w {
                let sx = x * w / new_w;
                out[c * new_h * new_w + y * new_w + x] = image[c * h * w + sy * w + sx];
            }
        }
    }
    out
}

/// Per-channel mean and population std over a dataset, in `[0, 1]` pixel
/// scale. Channels with zero variance get std 1 so normalization stays finite.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn channel_stats(images: &[u8], dims: ImageDims) -> ChannelStats {
    let plane = dims.height * dims.width;
    let isz = dims.numel();
    let count = images.len() / isz;
    let mut mean = vec![0.0; dims.channels];
    let mut sq = vec![0.0; dims.channels];
    for img in images.chunks_exact(isz) {
        for c in 0..dims.channels {
            for &v in &img[c * plane..(c + 1) * plane] {
                let x = v as f64 / 255.0;
                mean[c] += x;
                sq[c] += x * x;
            }
        }
    }
    let n = (count * plane) as f64;
    let mut std = vec![0.0; dims.channels];
    for c in 0..dims.channels {
        mean[c] /= n;
        let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
        std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    ChannelStats { mean, std }
}

/// Scale to `[0, 1]` then standardize per channel.
pub fn normalize(images: &[u8], dims: ImageDims, stats: &ChannelStats) -> Vec<f64> {
    let plane = dims.height * dims.width;
    let isz = dims.numel();
    let mut out = Vec::with_capacity(images.len());
    for img in images.chunks_exact(isz) {
        for c in 0..dims.channels {
            let (m, s) = (stats.mean[c], stats.std[c]);
            out.extend(
                img[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| (v as f64 / 255.0 - m) / s),
            );
        }
    }
    out
}
