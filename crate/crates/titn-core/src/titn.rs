//! The two-level transformer: an inner stack over pixel-level tokens inside
//! each patch, an outer stack over patch tokens plus a class token and a
//! distillation token, coupled per depth by a zero-padded bridge projection.
//!
//! Outer sequence layout is `[class, patch_0 .. patch_{n-1}, distill]`, so the
//! token count on the outer path is always `n_patches + 2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    self, LayerNormParams, LinearParams, MlpParams, MultiHeadAttentionParams,
};
use crate::params::{normal, trunc_normal, BoundParams, ParamSet};
use crate::tensor::{Tape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub pixel_size: usize,
    pub patch_dim: usize,
    pub pixel_dim: usize,
    pub depth: usize,
    pub outer_heads: usize,
    pub inner_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Flagship configuration: 32x32 RGB, patch 8, pixel 2, dims 192/12,
    /// depth 12.
    pub fn base(num_classes: usize) -> Self {
        ModelConfig {
            image_size: 32,
            in_channels: 3,
            patch_size: 8,
            pixel_size: 2,
            patch_dim: 192,
            pixel_dim: 12,
            depth: 12,
            outer_heads: 3,
            inner_heads: 2,
            mlp_ratio: 4,
            num_classes,
        }
    }

    /// Large-patch variant: patch 16, pixel 4, everything else as `base`.
    pub fn large_patch(num_classes: usize) -> Self {
        ModelConfig {
            patch_size: 16,
            pixel_size: 4,
            ..Self::base(num_classes)
        }
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn n_pixels_per_patch(&self) -> usize {
        let per_side = self.patch_size / self.pixel_size;
        per_side * per_side
    }

    /// Outer sequence length: patches plus class and distill tokens.
    pub fn outer_tokens(&self) -> usize {
        self.n_patches() + 2
    }

    /// Raw extent of one pixel token before embedding.
    pub fn pixel_token_len(&self) -> usize {
        self.pixel_size * self.pixel_size * self.in_channels
    }

    pub fn image_len(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("patch_size", self.patch_size),
            ("pixel_size", self.pixel_size),
            ("patch_dim", self.patch_dim),
            ("pixel_dim", self.pixel_dim),
            ("depth", self.depth),
            ("outer_heads", self.outer_heads),
            ("inner_heads", self.inner_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.patch_size % self.pixel_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_size {} not divisible by pixel_size {}",
                self.patch_size, self.pixel_size
            )));
        }
        if self.patch_dim % self.outer_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_dim {} not divisible by outer_heads {}",
                self.patch_dim, self.outer_heads
            )));
        }
        if self.pixel_dim % self.inner_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "pixel_dim {} not divisible by inner_heads {}",
                self.pixel_dim, self.inner_heads
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Patch extraction.
//
// Flattening order is fixed in one place: a patch (or pixel token) vector
// lists values channel-major, then row, then column. Patches themselves are
// ordered row-major over the patch grid.

/// Split `[channels, size, size]` into non-overlapping `p x p` patches:
/// output is `[n_patches, p*p*channels]`.
pub fn patchify(image: &[f64], channels: usize, size: usize, p: usize) -> Result<Vec<f64>> {
    if size % p != 0 {
        return Err(Error::InvalidConfig(format!(
            "image size {size} not divisible by patch size {p}"
        )));
    }
    if image.len() != channels * size * size {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: vec![channels, size, size],
            detail: format!("buffer holds {} values", image.len()),
        });
    }
    let per_side = size / p;
    let mut out = Vec::with_capacity(per_side * per_side * p * p * channels);
    for pr in 0..per_side {
        for pc in 0..per_side {
            for ch in 0..channels {
                for r in 0..p {
                    let row = pr * p + r;
                    let base = ch * size * size + row * size + pc * p;
                    out.extend_from_slice(&image[base..base + p]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f64], channels: usize, size: usize, p: usize) -> Result<Vec<f64>> {
    let per_side = size / p;
    let mut image = vec![0.0; channels * size * size];
    let plen = p * p * channels;
    for pr in 0..per_side {
        for pc in 0..per_side {
            let patch = &patches[(pr * per_side + pc) * plen..][..plen];
            for ch in 0..channels {
                for r in 0..p {
                    let row = pr * p + r;
                    let base = ch * size * size + row * size + pc * p;
                    image[base..base + p].copy_from_slice(&patch[ch * p * p + r * p..][..p]);
                }
            }
        }
    }
    Ok(image)
}

/// Split one patch (as produced by [`patchify`], logically `[channels, p, p]`)
/// into `m x m` pixel tokens: output is `[n_pixels, m*m*channels]`.
pub fn pixelify(patch: &[f64], channels: usize, p: usize, m: usize) -> Result<Vec<f64>> {
    if p % m != 0 {
        return Err(Error::InvalidConfig(format!(
            "patch size {p} not divisible by pixel size {m}"
        )));
    }
    if patch.len() != channels * p * p {
        return Err(Error::InvalidShape {
            op: "pixelify",
            shape: vec![channels, p, p],
            detail: format!("buffer holds {} values", patch.len()),
        });
    }
    let per_side = p / m;
    let mut out = Vec::with_capacity(patch.len());
    for qr in 0..per_side {
        for qc in 0..per_side {
            for ch in 0..channels {
                for r in 0..m {
                    let row = qr * m + r;
                    let base = ch * p * p + row * p + qc * m;
                    out.extend_from_slice(&patch[base..base + m]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixelify`].
pub fn unpixelify(tokens: &[f64], channels: usize, p: usize, m: usize) -> Result<Vec<f64>> {
    let per_side = p / m;
    let tlen = m * m * channels;
    let mut patch = vec![0.0; channels * p * p];
    for qr in 0..per_side {
        for qc in 0..per_side {
            let tok = &tokens[(qr * per_side + qc) * tlen..][..tlen];
            for ch in 0..channels {
                for r in 0..m {
                    let row = qr * m + r;
                    let base = ch * p * p + row * p + qc * m;
                    patch[base..base + m].copy_from_slice(&tok[ch * m * m + r * m..][..m]);
                }
            }
        }
    }
    Ok(patch)
}

/// Zero-pad one leading row (class slot) and one trailing row (distill slot)
/// along the token axis of `[batch, tokens, dim]`.
pub fn pad_token_rows(tape: &Tape, t: &Tensor) -> Result<Tensor> {
    let shape = t.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            op: "pad_token_rows",
            shape,
            detail: "expected [batch, tokens, dim]".into(),
        });
    }
    let zeros = tape.leaf(vec![0.0; shape[0] * shape[2]], &[shape[0], 1, shape[2]])?;
    tape.concat(&[&zeros, t, &zeros], 1)
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug)]
pub struct TitnModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl TitnModel {
    /// Fresh model with seeded initialization: truncated normal (std 0.02)
    /// weights, zero biases, unit norm scales, normal (std 0.02) tokens and
    /// positional embeddings.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = &config;
        let (pd, pxd, r) = (c.patch_dim, c.pixel_dim, c.mlp_ratio);
        let n_pix = c.n_pixels_per_patch();

        let linear = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize| {
            ps.register(
                &format!("{name}.weight"),
                &[d_in, d_out],
                trunc_normal(rng, d_in * d_out, 0.02),
                true,
            );
            ps.register(&format!("{name}.bias"), &[d_out], vec![0.0; d_out], true);
        };
        let norm = |ps: &mut ParamSet, name: &str, d: usize| {
            ps.register(&format!("{name}.gamma"), &[d], vec![1.0; d], false);
            ps.register(&format!("{name}.beta"), &[d], vec![0.0; d], false);
        };
        let attn = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d: usize| {
            for proj in ["w_q", "w_k", "w_v", "w_o"] {
                ps.register(
                    &format!("{name}.{proj}"),
                    &[d, d],
                    trunc_normal(rng, d * d, 0.02),
                    true,
                );
            }
        };

        linear(&mut ps, &mut rng, "pixel_embed", c.pixel_token_len(), pxd);
        linear(&mut ps, &mut rng, "patch_embed", n_pix * pxd, pd);
        ps.register("class_token", &[pd], normal(&mut rng, pd, 0.02), false);
        ps.register("distill_token", &[pd], normal(&mut rng, pd, 0.02), false);
        ps.register(
            "outer_pos",
            &[c.outer_tokens(), pd],
            normal(&mut rng, c.outer_tokens() * pd, 0.02),
            false,
        );
        ps.register(
            "inner_pos",
            &[n_pix, pxd],
            normal(&mut rng, n_pix * pxd, 0.02),
            false,
        );
        for d in 0..c.depth {
            let pre = format!("blocks.{d}");
            norm(&mut ps, &format!("{pre}.inner.norm1"), pxd);
            attn(&mut ps, &mut rng, &format!("{pre}.inner.attn"), pxd);
            norm(&mut ps, &format!("{pre}.inner.norm2"), pxd);
            linear(&mut ps, &mut rng, &format!("{pre}.inner.mlp.fc1"), pxd, r * pxd);
            linear(&mut ps, &mut rng, &format!("{pre}.inner.mlp.fc2"), r * pxd, pxd);
            linear(&mut ps, &mut rng, &format!("{pre}.bridge"), n_pix * pxd, pd);
            norm(&mut ps, &format!("{pre}.outer.norm1"), pd);
            attn(&mut ps, &mut rng, &format!("{pre}.outer.attn"), pd);
            norm(&mut ps, &format!("{pre}.outer.norm2"), pd);
            linear(&mut ps, &mut rng, &format!("{pre}.outer.mlp.fc1"), pd, r * pd);
            linear(&mut ps, &mut rng, &format!("{pre}.outer.mlp.fc2"), r * pd, pd);
        }
        linear(&mut ps, &mut rng, "class_head", pd, c.num_classes);
        linear(&mut ps, &mut rng, "distill_head", pd, c.num_classes);

        debug_assert_eq!(ps.total_scalars(), parameter_count(c));
        Ok(TitnModel { config, params: ps })
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundParams {
        self.params.bind(tape, trainable)
    }

    /// Forward pass over a normalized batch `[batch, channels, size, size]`
    /// (flattened). Returns `(class_logits, distill_logits)`, each
    /// `[batch, num_classes]`.
    pub fn forward_with(
        &self,
        tape: &Tape,
        p: &BoundParams,
        images: &[f64],
        batch: usize,
    ) -> Result<(Tensor, Tensor)> {
        let c = &self.config;
        if images.len() != batch * c.image_len() {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: vec![batch, c.in_channels, c.image_size, c.image_size],
                detail: format!("input buffer holds {} values", images.len()),
            });
        }
        let np = c.n_patches();
        let n_pix = c.n_pixels_per_patch();
        let (pd, pxd) = (c.patch_dim, c.pixel_dim);

        // pixel tokens for the whole batch: [batch*np, n_pix, m*m*C]
        let mut tokens = Vec::with_capacity(batch * np * n_pix * c.pixel_token_len());
        for img in images.chunks_exact(c.image_len()) {
            let patches = patchify(img, c.in_channels, c.image_size, c.patch_size)?;
            for patch in patches.chunks_exact(c.patch_size * c.patch_size * c.in_channels) {
                tokens.extend(pixelify(patch, c.in_channels, c.patch_size, c.pixel_size)?);
            }
        }
        let raw = tape.leaf(tokens, &[batch * np, n_pix, c.pixel_token_len()])?;
        let embed = LinearParams {
            weight: p.get("pixel_embed.weight").clone(),
            bias: p.get("pixel_embed.bias").clone(),
        };
        let mut x = embed.forward(&raw)?.add(p.get("inner_pos"))?;

        // outer sequence: [class, patch tokens, distill] + positional embedding
        let patch_embed = LinearParams {
            weight: p.get("patch_embed.weight").clone(),
            bias: p.get("patch_embed.bias").clone(),
        };
        let patch_tokens = patch_embed.forward(&x.reshape(&[batch, np, n_pix * pxd])?)?;
        let zero_row = tape.leaf(vec![0.0; batch * pd], &[batch, 1, pd])?;
        let cls = zero_row.add(p.get("class_token"))?;
        let dst = zero_row.add(p.get("distill_token"))?;
        let mut o = tape.concat(&[&cls, &patch_tokens, &dst], 1)?;
        o = o.add(p.get("outer_pos"))?;

        for d in 0..c.depth {
            let pre = format!("blocks.{d}");
            x = encoder_block(&x, p, &format!("{pre}.inner"), c.inner_heads)?;
            let bridge = LinearParams {
                weight: p.get(&format!("{pre}.bridge.weight")).clone(),
                bias: p.get(&format!("{pre}.bridge.bias")).clone(),
            };
            let patch_residual = bridge.forward(&x.reshape(&[batch, np, n_pix * pxd])?)?;
            o = o.add(&pad_token_rows(tape, &patch_residual)?)?;
            o = encoder_block(&o, p, &format!("{pre}.outer"), c.outer_heads)?;
        }

        let class_row = o.slice(1, 0, 1)?.reshape(&[batch, pd])?;
        let distill_row = o.slice(1, np + 1, 1)?.reshape(&[batch, pd])?;
        let class_head = LinearParams {
            weight: p.get("class_head.weight").clone(),
            bias: p.get("class_head.bias").clone(),
        };
        let distill_head = LinearParams {
            weight: p.get("distill_head.weight").clone(),
            bias: p.get("distill_head.bias").clone(),
        };
        Ok((
            class_head.forward(&class_row)?,
            distill_head.forward(&distill_row)?,
        ))
    }

    /// Convenience forward that binds parameters as frozen leaves.
    pub fn forward(&self, tape: &Tape, images: &[f64], batch: usize) -> Result<(Tensor, Tensor)> {
        let bound = self.bind(tape, false);
        self.forward_with(tape, &bound, images, batch)
    }
}

fn encoder_block(x: &Tensor, p: &BoundParams, prefix: &str, heads: usize) -> Result<Tensor> {
    let norm1 = LayerNormParams {
        gamma: p.get(&format!("{prefix}.norm1.gamma")).clone(),
        beta: p.get(&format!("{prefix}.norm1.beta")).clone(),
        eps: LAYER_NORM_EPS,
    };
    let attn = MultiHeadAttentionParams {
        w_q: p.get(&format!("{prefix}.attn.w_q")).clone(),
        w_k: p.get(&format!("{prefix}.attn.w_k")).clone(),
        w_v: p.get(&format!("{prefix}.attn.w_v")).clone(),
        w_o: p.get(&format!("{prefix}.attn.w_o")).clone(),
        heads,
    };
    let x = x.add(&nn::multi_head_attention(&nn::layer_norm(x, &norm1)?, &attn)?)?;
    let norm2 = LayerNormParams {
        gamma: p.get(&format!("{prefix}.norm2.gamma")).clone(),
        beta: p.get(&format!("{prefix}.norm2.beta")).clone(),
        eps: LAYER_NORM_EPS,
    };
    let mlp = MlpParams {
        fc1: LinearParams {
            weight: p.get(&format!("{prefix}.mlp.fc1.weight")).clone(),
            bias: p.get(&format!("{prefix}.mlp.fc1.bias")).clone(),
        },
        fc2: LinearParams {
            weight: p.get(&format!("{prefix}.mlp.fc2.weight")).clone(),
            bias: p.get(&format!("{prefix}.mlp.fc2.bias")).clone(),
        },
    };
    x.add(&nn::mlp(&nn::layer_norm(&x, &norm2)?, &mlp)?)
}

// ---------------------------------------------------------------------------
// Analytic parameter and FLOP accounting

/// Itemized count of learnable scalars.
pub fn parameter_count_items(c: &ModelConfig) -> Vec<(String, u64)> {
    let (pd, pxd, r, k) = (
        c.patch_dim as u64,
        c.pixel_dim as u64,
        c.mlp_ratio as u64,
        c.num_classes as u64,
    );
    let n_pix = c.n_pixels_per_patch() as u64;
    let depth = c.depth as u64;
    let tokens = c.outer_tokens() as u64;
    let block = |d: u64| 4 * d + 4 * d * d + (d * r * d + r * d) + (r * d * d + d);
    vec![
        (
            "pixel_embed".into(),
            c.pixel_token_len() as u64 * pxd + pxd,
        ),
        ("patch_embed".into(), n_pix * pxd * pd + pd),
        ("class_token".into(), pd),
        ("distill_token".into(), pd),
        ("outer_pos".into(), tokens * pd),
        ("inner_pos".into(), n_pix * pxd),
        ("inner_blocks".into(), depth * block(pxd)),
        ("bridges".into(), depth * (n_pix * pxd * pd + pd)),
        ("outer_blocks".into(), depth * block(pd)),
        ("heads".into(), 2 * (pd * k + k)),
    ]
}

/// Exact count of learnable scalars for a configuration.
pub fn parameter_count(c: &ModelConfig) -> u64 {
    parameter_count_items(c).iter().map(|(_, n)| n).sum()
}

/// Itemized analytic FLOPs (2 x multiply-accumulates in matrix products) for
/// one forward pass of a single image.
pub fn flops_per_image_items(c: &ModelConfig) -> Vec<(String, u64)> {
    let (pd, pxd, r) = (c.patch_dim as u64, c.pixel_dim as u64, c.mlp_ratio as u64);
    let np = c.n_patches() as u64;
    let n_pix = c.n_pixels_per_patch() as u64;
    let t = c.outer_tokens() as u64;
    let depth = c.depth as u64;
    let k = c.num_classes as u64;
    let macs: Vec<(String, u64)> = vec![
        (
            "pixel_embed".into(),
            np * n_pix * c.pixel_token_len() as u64 * pxd,
        ),
        ("patch_embed".into(), np * n_pix * pxd * pd),
        (
            "inner_attention".into(),
            depth * np * (4 * n_pix * pxd * pxd + 2 * n_pix * n_pix * pxd),
        ),
        (
            "inner_mlp".into(),
            depth * np * 2 * n_pix * pxd * (r * pxd),
        ),
        ("bridge".into(), depth * np * n_pix * pxd * pd),
        (
            "outer_attention".into(),
            depth * (4 * t * pd * pd + 2 * t * t * pd),
        ),
        ("outer_mlp".into(), depth * 2 * t * pd * (r * pd)),
        ("heads".into(), 2 * pd * k),
    ];
    macs.into_iter().map(|(n, m)| (n, 2 * m)).collect()
}

pub fn flops_per_image(c: &ModelConfig) -> u64 {
    flops_per_image_items(c).iter().map(|(_, n)| n).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            in_channels: 1,
            patch_size: 4,
            pixel_size: 2,
            patch_dim: 16,
            pixel_dim: 8,
            depth: 2,
            outer_heads: 4,
            inner_heads: 2,
            mlp_ratio: 4,
            num_classes: 10,
        }
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn patchify_counts_and_lengths() {
        let image = vec![0.5; 3 * 32 * 32];
        let patches = patchify(&image, 3, 32, 8).unwrap();
        assert_eq!(patches.len(), 16 * 64 * 3);

        let whole = patchify(&image, 3, 32, 32).unwrap();
        assert_eq!(whole.len(), image.len());
    }

    #[test]
    fn patchify_single_patch_is_flat_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let image = randn(&mut rng, 2 * 4 * 4);
        let whole = patchify(&image, 2, 4, 4).unwrap();
        assert_eq!(whole, image);
    }

    #[test]
    fn patchify_roundtrip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = randn(&mut rng, 3 * 16 * 16);
        let patches = patchify(&image, 3, 16, 4).unwrap();
        assert_eq!(unpatchify(&patches, 3, 16, 4).unwrap(), image);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let image = vec![0.0; 3 * 10 * 10];
        assert!(patchify(&image, 3, 10, 4).is_err());
    }

    #[test]
    fn pixelify_counts_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patch = randn(&mut rng, 3 * 8 * 8);
        let toks = pixelify(&patch, 3, 8, 2).unwrap();
        assert_eq!(toks.len(), 16 * 4 * 3);
        assert_eq!(unpixelify(&toks, 3, 8, 2).unwrap(), patch);

        let single = pixelify(&patch, 3, 8, 8).unwrap();
        assert_eq!(single, patch);
    }

    #[test]
    fn forward_shape_contract() {
        let model = TitnModel::new(tiny_config(), 0).unwrap();
        let images = vec![0.1; 2 * model.config.image_len()];
        let tape = Tape::new();
        let (c, d) = model.forward(&tape, &images, 2).unwrap();
        assert_eq!(c.shape(), &[2, 10]);
        assert_eq!(d.shape(), &[2, 10]);
    }

    #[test]
    fn zero_heads_zero_logits() {
        let mut model = TitnModel::new(tiny_config(), 3).unwrap();
        for name in [
            "class_head.weight",
            "class_head.bias",
            "distill_head.weight",
            "distill_head.bias",
        ] {
            model.params.get_mut(name).data.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let images = randn(&mut rng, 2 * model.config.image_len());
        let tape = Tape::new();
        let (c, d) = model.forward(&tape, &images, 2).unwrap();
        assert!(c.value().iter().all(|&v| v == 0.0));
        assert!(d.value().iter().all(|&v| v == 0.0));
    }

    fn zero_block_weights(model: &mut TitnModel) {
        let names: Vec<String> = model
            .params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("blocks."))
            .map(|e| e.name.clone())
            .collect();
        for n in names {
            let e = model.params.get_mut(&n);
            if n.contains("norm") {
                continue; // norms stay at identity defaults
            }
            e.data.fill(0.0);
        }
    }

    #[test]
    fn residual_identity_with_zeroed_blocks() {
        // With every attention, MLP and bridge weight zeroed, the outer
        // sequence passes through unchanged, so logits equal the heads
        // applied to the initial embedding rows.
        let mut model = TitnModel::new(tiny_config(), 5).unwrap();
        zero_block_weights(&mut model);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let images = randn(&mut rng, model.config.image_len());
        let tape = Tape::new();
        let (c_logits, d_logits) = model.forward(&tape, &images, 1).unwrap();

        // hand-computed oracle from raw parameter values
        let c = &model.config;
        let np = c.n_patches();
        let pd = c.patch_dim;
        let head = |row: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; c.num_classes];
            for (j, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (p, &rv) in row.iter().enumerate() {
                    acc += rv * w[p * c.num_classes + j];
                }
                *o = acc + b[j];
            }
            out
        };
        let pos = &model.params.get("outer_pos").data;
        let cls_row: Vec<f64> = model
            .params
            .get("class_token")
            .data
            .iter()
            .zip(&pos[0..pd])
            .map(|(t, p)| t + p)
            .collect();
        let dst_row: Vec<f64> = model
            .params
            .get("distill_token")
            .data
            .iter()
            .zip(&pos[(np + 1) * pd..(np + 2) * pd])
            .map(|(t, p)| t + p)
            .collect();
        let expect_c = head(
            &cls_row,
            &model.params.get("class_head.weight").data,
            &model.params.get("class_head.bias").data,
        );
        let expect_d = head(
            &dst_row,
            &model.params.get("distill_head.weight").data,
            &model.params.get("distill_head.bias").data,
        );
        for (a, b) in c_logits.value().iter().zip(&expect_c) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        for (a, b) in d_logits.value().iter().zip(&expect_d) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn padded_rows_are_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let t = tape.leaf(randn(&mut rng, 2 * 3 * 4), &[2, 3, 4]).unwrap();
        let padded = pad_token_rows(&tape, &t).unwrap();
        assert_eq!(padded.shape(), &[2, 5, 4]);
        let v = padded.value();
        for b in 0..2 {
            assert!(v[b * 20..b * 20 + 4].iter().all(|&x| x == 0.0));
            assert!(v[b * 20 + 16..b * 20 + 20].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = TitnModel::new(tiny_config(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let images = randn(&mut rng, 2 * model.config.image_len());
        let run = || {
            let tape = Tape::new();
            let (c, d) = model.forward(&tape, &images, 2).unwrap();
            (c.value(), d.value())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for seed in [0u64, 1, 2] {
            let model = TitnModel::new(tiny_config(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let images = randn(&mut rng, 2 * model.config.image_len());
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let (c, d) = model.forward_with(&tape, &bound, &images, 2).unwrap();
            let loss = c.sum().add(&d.sum()).unwrap();
            loss.backward().unwrap();
            for e in model.params.entries() {
                let g = bound
                    .grad_of(&e.name)
                    .unwrap_or_else(|| panic!("no gradient for {}", e.name));
                let norm: f64 = g.iter().map(|v| v * v).sum();
                assert!(norm > 0.0, "zero gradient for {} (seed {seed})", e.name);
            }
        }
    }

    #[test]
    fn parameter_count_flagship_configs_within_two_percent() {
        let target = 5_850_000.0;
        for cfg in [ModelConfig::base(100), ModelConfig::large_patch(100)] {
            let n = parameter_count(&cfg) as f64;
            let rel = (n - target).abs() / target;
            assert!(rel <= 0.02, "{cfg:?}: {n} vs {target} (rel {rel})");
        }
    }

    #[test]
    fn parameter_count_toy_enumeration_oracle() {
        // depth 1, patch_dim 8, pixel_dim 4, K = 2, enumerated by hand:
        let cfg = ModelConfig {
            image_size: 8,
            in_channels: 1,
            patch_size: 4,
            pixel_size: 2,
            patch_dim: 8,
            pixel_dim: 4,
            depth: 1,
            outer_heads: 2,
            inner_heads: 2,
            mlp_ratio: 4,
            num_classes: 2,
        };
        // pixel_embed: 4*4+4 = 20
        // patch_embed: (4*4)*8+8 = 136
        // tokens: 8 + 8 = 16
        // outer_pos: 6*8 = 48, inner_pos: 4*4 = 16
        // inner block: norms 2*(4+4)=16, attn 4*16=64,
        //              mlp (4*16+16)+(16*4+4)=148 -> 228
        // bridge: 16*8+8 = 136
        // outer block: norms 32, attn 256, mlp (8*32+32)+(32*8+8)=552 -> 840
        // heads: 2*(8*2+2) = 36
        let expect = 20 + 136 + 16 + 48 + 16 + 228 + 136 + 840 + 36;
        assert_eq!(parameter_count(&cfg), expect);
    }

    #[test]
    fn parameter_count_matches_allocated_buffers() {
        for cfg in [
            tiny_config(),
            ModelConfig::base(100),
            ModelConfig::large_patch(100),
            ModelConfig {
                depth: 3,
                num_classes: 7,
                ..tiny_config()
            },
        ] {
            let model = TitnModel::new(cfg.clone(), 0).unwrap();
            assert_eq!(model.params.total_scalars(), parameter_count(&cfg));
        }
    }

    #[test]
    fn flops_match_instrumented_mac_counter() {
        let cfg = tiny_config();
        let model = TitnModel::new(cfg.clone(), 0).unwrap();
        let images = vec![0.25; cfg.image_len()];
        let tape = Tape::new();
        let _ = model.forward(&tape, &images, 1).unwrap();
        assert_eq!(flops_per_image(&cfg), 2 * tape.mac_count());
    }

    #[test]
    fn flops_scale_linearly_in_depth() {
        let base = tiny_config();
        let mut doubled = base.clone();
        doubled.depth *= 2;
        let embed_and_heads = |c: &ModelConfig| -> u64 {
            flops_per_image_items(c)
                .iter()
                .filter(|(n, _)| n.contains("embed") || n == "heads")
                .map(|(_, v)| v)
                .sum()
        };
        let blocks = |c: &ModelConfig| flops_per_image(c) - embed_and_heads(c);
        assert_eq!(blocks(&doubled), 2 * blocks(&base));
        assert_eq!(embed_and_heads(&doubled), embed_and_heads(&base));
    }

    #[test]
    fn invalid_configs_name_the_violated_divisibility() {
        let mut cfg = tiny_config();
        cfg.patch_size = 3;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("image_size 8 not divisible by patch_size 3"), "{msg}");

        let mut cfg = tiny_config();
        cfg.outer_heads = 3;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("patch_dim 16 not divisible by outer_heads 3"), "{msg}");
    }

    #[test]
    fn single_seed_models_are_reproducible() {
        let a = TitnModel::new(tiny_config(), 42).unwrap();
        let b = TitnModel::new(tiny_config(), 42).unwrap();
        for (ea, eb) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(ea.data, eb.data, "{} differs", ea.name);
        }
    }

    #[test]
    fn depth_one_zero_weight_oracle_single_block() {
        let cfg = ModelConfig {
            depth: 1,
            ..tiny_config()
        };
        let mut model = TitnModel::new(cfg, 11).unwrap();
        zero_block_weights(&mut model);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let images = randn(&mut rng, model.config.image_len());
        let tape = Tape::new();
        let (c_logits, _) = model.forward(&tape, &images, 1).unwrap();
        // the class row is untouched by the single block, so logits depend
        // only on the class token and its positional embedding
        let c = &model.config;
        let pos = &model.params.get("outer_pos").data;
        let row: Vec<f64> = model
            .params
            .get("class_token")
            .data
            .iter()
            .zip(&pos[0..c.patch_dim])
            .map(|(t, p)| t + p)
            .collect();
        let w = &model.params.get("class_head.weight").data;
        let b = &model.params.get("class_head.bias").data;
        for j in 0..c.num_classes {
            let mut acc = 0.0;
            for (p, &rv) in row.iter().enumerate() {
                acc += rv * w[p * c.num_classes + j];
            }
            let expect = acc + b[j];
            let got = c_logits.value()[j];
            assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        }
    }
}
