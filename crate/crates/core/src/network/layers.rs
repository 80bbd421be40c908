use crate::autodiff::Tensor;

use super::{Bound, Mode, Result};

pub(super) const LN_EPS: f64 = 1e-12;
/// Additive attention bias for masked keys; `exp` of it underflows to 0.
pub(super) const MASK_BIAS: f64 = -1e9;

pub(super) fn linear(b: &Bound, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = b.param(&format!("{name}.weight"))?;
    let bias = b.param(&format!("{name}.bias"))?;
    Ok(x.matmul(w)?.add(bias)?)
}

pub(super) fn norm(b: &Bound, name: &str, x: &Tensor) -> Result<Tensor> {
    let g = b.param(&format!("{name}.gamma"))?;
    let beta = b.param(&format!("{name}.beta"))?;
    Ok(x.layer_norm(x.rank() - 1, g, beta, LN_EPS)?)
}

pub(super) fn ffn(b: &Bound, name: &str, x: &Tensor, mode: &Mode) -> Result<Tensor> {
    let h = linear(b, &format!("{name}.fc1"), x)?.relu();
    let h = mode.dropout(&h, b.config.dropout)?;
    linear(b, &format!("{name}.fc2"), &h)
}

/// `[B, L, H·dk] → [B, H, L, dk]`
pub(super) fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let s = x.shape();
    let (bsz, l, d) = (s[0], s[1], s[2]);
    Ok(x.reshape(&[bsz, l, heads, d / heads])?.transpose(1, 2)?)
}

/// `[B, H, L, dk] → [B, L, H·dk]`
pub(super) fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let (bsz, h, l, dk) = (s[0], s[1], s[2], s[3]);
    Ok(x.transpose(1, 2)?.reshape(&[bsz, l, h * dk])?)
}

/// Scaled dot-product attention over already split heads. `bias`
/// broadcasts against the `[B, H, Lq, Lk]` scores.
pub(super) fn attend(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>, dropout: f64, mode: &Mode) -> Result<Tensor> {
    let dk = q.shape()[q.rank() - 1];
    let mut scores = q.matmul_nt(k)?.scale(1.0 / (dk as f64).sqrt());
    if let Some(bias) = bias {
        scores = scores.add(bias)?;
    }
    let p = scores.softmax(scores.rank() - 1)?;
    let p = mode.dropout(&p, dropout)?;
    Ok(p.matmul(v)?)
}

pub(super) fn multi_head(b: &Bound, name: &str, x: &Tensor, mem: &Tensor, bias: Option<&Tensor>, mode: &Mode) -> Result<Tensor> {
    let h = b.config.heads;
    let q = split_heads(&linear(b, &format!("{name}.q"), x)?, h)?;
    let k = split_heads(&linear(b, &format!("{name}.k"), mem)?, h)?;
    let v = split_heads(&linear(b, &format!("{name}.v"), mem)?, h)?;
    let ctx = merge_heads(&attend(&q, &k, &v, bias, b.config.dropout, mode)?)?;
    linear(b, &format!("{name}.o"), &ctx)
}

/// Pre-norm self-attention block.
pub(super) fn encoder_block(b: &Bound, name: &str, x: &Tensor, key_bias: &Tensor, mode: &Mode) -> Result<Tensor> {
    let p = b.config.dropout;
    let h = norm(b, &format!("{name}.norm1"), x)?;
    let a = multi_head(b, &format!("{name}.self_attn"), &h, &h, Some(key_bias), mode)?;
    let x = x.add(&mode.dropout(&a, p)?)?;
    let h = norm(b, &format!("{name}.norm2"), &x)?;
    let f = ffn(b, &format!("{name}.ffn"), &h, mode)?;
    Ok(x.add(&mode.dropout(&f, p)?)?)
}

/// Sinusoidal table rows `offset..offset+len`, shaped `[1, len, d]`.
pub(super) fn positional(offset: usize, len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        let pos = (offset + p) as f64;
        for i in (0..d).step_by(2) {
            let angle = pos / 10000f64.powf(i as f64 / d as f64);
            data[p * d + i] = angle.sin();
            if i + 1 < d {
                data[p * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::from_vec(data, &[1, len, d]).expect("positional shape")
}

/// `[B, 1, 1, L]` bias hiding keys at positions `≥ lens[b]`.
pub(super) fn key_padding_bias(lens: &[usize], l: usize) -> Tensor {
    let mut data = vec![0.0; lens.len() * l];
    for (b, &len) in lens.iter().enumerate() {
        data[b * l + len.min(l)..(b + 1) * l].fill(MASK_BIAS);
    }
    Tensor::from_vec(data, &[lens.len(), 1, 1, l]).expect("mask shape")
}

/// `[1, 1, L, L]` bias hiding future positions.
pub(super) fn causal_bias(l: usize) -> Tensor {
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        data[i * l + i + 1..(i + 1) * l].fill(MASK_BIAS);
    }
    Tensor::from_vec(data, &[1, 1, l, l]).expect("mask shape")
}

/// `[B, L, 1]` with 1 on valid positions, 0 on padding.
pub(super) fn valid_mask(lens: &[usize], l: usize) -> Tensor {
    let mut data = vec![0.0; lens.len() * l];
    for (b, &len) in lens.iter().enumerate() {
        data[b * l..b * l + len.min(l)].fill(1.0);
    }
    Tensor::from_vec(data, &[lens.len(), l, 1]).expect("mask shape")
}
