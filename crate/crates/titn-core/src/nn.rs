//! Neural building blocks: linear layers, scaled dot-product and multi-head
//! attention, the two-layer MLP, and layer normalization.
//!
//! Parameter structs hold [`Tensor`] handles bound to the current tape; the
//! persistent storage behind them lives in a [`crate::params::ParamSet`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine map `x W + b` with `W: [d_in, d_out]`, `b: [d_out]`.
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

/// Fused projections for multi-head self-attention. Per-head projections are
/// the column blocks of `w_q`/`w_k`/`w_v`; `w_o` mixes the concatenated heads.
pub struct MultiHeadAttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

/// Two-layer MLP `fc2(gelu(fc1(x)))` with hidden extent `ratio * d`.
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

/// Per-feature affine for layer normalization.
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

/// Scaled dot-product attention softmax(Q K^T / sqrt(d_k)) V.
///
/// Q, K, V are `[.., tokens, d_k]`; Q and K must share their last extent and
/// K and V their token count. Attention rows are nonnegative and sum to one.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dq = *q.shape().last().ok_or_else(|| Error::InvalidShape {
        op: "attention",
        shape: q.shape().to_vec(),
        detail: "rank must be >= 2".into(),
    })?;
    let dk = *k.shape().last().unwrap_or(&0);
    if dq != dk {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let k_tokens = k.shape()[k.shape().len() - 2];
    let v_tokens = v.shape()[v.shape().len().saturating_sub(2)];
    if k_tokens != v_tokens {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let rank = k.shape().len();
    let kt = k.transpose(rank - 2, rank - 1)?;
    let scale = 1.0 / (dq as f64).sqrt();
    let scores = q.matmul(&kt)?.mul_scalar(scale);
    let weights = scores.softmax(rank - 1)?;
    weights.matmul(v)
}

/// Multi-head self-attention over `x: [batch, tokens, d_model]`.
pub fn multi_head_attention(x: &Tensor, p: &MultiHeadAttentionParams) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            op: "multi_head_attention",
            shape,
            detail: "expected [batch, tokens, d_model]".into(),
        });
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if p.w_q.shape() != [d, d] {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lhs: shape,
            rhs: p.w_q.shape().to_vec(),
        });
    }
    if d % p.heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "d_model {d} not divisible by head count {}",
            p.heads
        )));
    }
    let dk = d / p.heads;

    let split = |proj: Tensor| -> Result<Tensor> {
        // [b, t, d] -> [b, heads, t, dk]
        proj.reshape(&[b, t, p.heads, dk])?.transpose(1, 2)
    };
    let q = split(x.matmul(&p.w_q)?)?;
    let k = split(x.matmul(&p.w_k)?)?;
    let v = split(x.matmul(&p.w_v)?)?;
    let heads = attention(&q, &k, &v)?;
    let merged = heads.transpose(1, 2)?.reshape(&[b, t, d])?;
    merged.matmul(&p.w_o)
}

/// `fc2(gelu(fc1(x)))`.
pub fn mlp(x: &Tensor, p: &MlpParams) -> Result<Tensor> {
    p.fc2.forward(&p.fc1.forward(x)?.gelu())
}

/// Per-token normalization over the last axis, then affine by gamma/beta.
pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    x.layer_norm(&p.gamma, &p.beta, p.eps)
}
