use crate::autodiff::{Conv2dSpec, PoolSpec, Tensor, TensorError};

use super::layers::{
    attend, causal_bias, encoder_block, ffn, key_padding_bias, linear, merge_heads, multi_head, norm, positional,
    split_heads, valid_mask,
};
use super::{pad_ids, Bound, Mode, NetworkError, Result};

/// Per-layer cross-attention keys and values of one encoded utterance,
/// shaped `[H, T′, dk]`, shared by every hypothesis.
pub struct Memory {
    k: Vec<Tensor>,
    v: Vec<Tensor>,
    len: usize,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Self-attention keys and values of `n` decoded prefixes, one
/// `[n, H, len, dk]` pair per decoder layer.
#[derive(Clone)]
pub struct DecoderCache {
    n: usize,
    len: usize,
    k: Vec<Tensor>,
    v: Vec<Tensor>,
}

pub(super) fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let row = t.numel() / t.shape()[0].max(1);
    let src = t.data();
    let mut data = Vec::with_capacity(rows.len() * row);
    for &r in rows {
        data.extend_from_slice(&src[r * row..(r + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::from_vec(data, &shape).expect("gathered shape")
}

impl DecoderCache {
    pub fn hyps(&self) -> usize {
        self.n
    }

    /// Number of tokens already consumed (the sos token included).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Cache for hypotheses `rows` (in that order, repeats allowed).
    pub fn select(&self, rows: &[usize]) -> DecoderCache {
        DecoderCache {
            n: rows.len(),
            len: self.len,
            k: self.k.iter().map(|t| gather_rows(t, rows)).collect(),
            v: self.v.iter().map(|t| gather_rows(t, rows)).collect(),
        }
    }
}

fn flatten_err(op: &'static str, got: &[usize], want: &[usize]) -> NetworkError {
    NetworkError::Tensor(TensorError::ShapeMismatch {
        op,
        lhs: got.to_vec(),
        rhs: want.to_vec(),
    })
}

/// `[B, 1, T, 1]` with ones on valid frames.
fn frame_mask(lens: &[usize], t: usize) -> Tensor {
    let mut data = vec![0.0; lens.len() * t];
    for (b, &l) in lens.iter().enumerate() {
        data[b * t..b * t + l.min(t)].fill(1.0);
    }
    Tensor::from_vec(data, &[lens.len(), 1, t, 1]).expect("mask shape")
}

impl Bound {
    /// VGG front end followed by the self-attention stack. `feats` is
    /// `[B, T, feat_dim]`; returns `[B, T′, d_model]` and the subsampled
    /// lengths. Padded frames never influence valid outputs.
    pub fn speech_encoder_forward(&self, feats: &Tensor, lens: &[usize], mode: &Mode) -> Result<(Tensor, Vec<usize>)> {
        let cfg = &self.config;
        let s = feats.shape();
        if s.len() != 3 || s[2] != cfg.feat_dim || s[0] != lens.len() {
            return Err(flatten_err("speech_encoder", s, &[lens.len(), 0, cfg.feat_dim]));
        }
        let (bsz, mut t, f) = (s[0], s[1], s[2]);
        let mut lens = lens.to_vec();
        let mut x = feats.reshape(&[bsz, 1, t, f])?.mul(&frame_mask(&lens, t))?;
        let conv = Conv2dSpec {
            stride: (1, 1),
            padding: (1, 1),
        };
        let pool = PoolSpec {
            kernel: (2, 2),
            stride: (2, 2),
            ceil_mode: true,
        };
        for b in 0..cfg.vgg_channels.len() {
            for j in 0..2 {
                let w = self.param(&format!("encoder.vgg.{b}.conv{j}.weight"))?;
                let bias = self.param(&format!("encoder.vgg.{b}.conv{j}.bias"))?;
                x = x.conv2d(w, Some(bias), conv)?.relu().mul(&frame_mask(&lens, t))?;
            }
            // activations are ≥ 0 and padding is 0, so partial windows pool valid frames only
            x = x.max_pool2d(pool)?;
            t = t.div_ceil(2);
            lens.iter_mut().for_each(|l| *l = l.div_ceil(2));
        }
        let xs = x.shape().to_vec();
        let (c, fp) = (xs[1], xs[3]);
        let x = x.transpose(1, 2)?.reshape(&[bsz, t, c * fp])?;
        let x = linear(self, "encoder.input", &x)?;
        self.encoder_stack("encoder", &x, &lens, mode)
    }

    /// Embedding plus self-attention stack over padded token sequences.
    /// `prefix` is `encoder` for MT models and `mt_encoder` for the
    /// auxiliary branch of ST models.
    pub fn text_encoder_forward(&self, prefix: &str, ids: &[Vec<usize>], mode: &Mode) -> Result<(Tensor, Vec<usize>)> {
        let (flat, l) = pad_ids(ids, 0);
        let lens: Vec<usize> = ids.iter().map(Vec::len).collect();
        let x = self.param(&format!("{prefix}.embed.weight"))?.embedding(&flat, &[ids.len(), l])?;
        self.encoder_stack(prefix, &x, &lens, mode)
    }

    fn encoder_stack(&self, prefix: &str, x: &Tensor, lens: &[usize], mode: &Mode) -> Result<(Tensor, Vec<usize>)> {
        let d = self.config.d_model;
        let l = x.shape()[1];
        let blocks = if prefix == "mt_encoder" {
            self.config.mt_enc_blocks
        } else {
            self.config.enc_blocks
        };
        let mut x = x.scale((d as f64).sqrt()).add(&positional(0, l, d))?;
        x = mode.dropout(&x, self.config.dropout)?;
        let bias = key_padding_bias(lens, l);
        for i in 0..blocks {
            x = encoder_block(self, &format!("{prefix}.block{i}"), &x, &bias, mode)?;
        }
        let x = norm(self, &format!("{prefix}.final_norm"), &x)?.mul(&valid_mask(lens, l))?;
        Ok((x, lens.to_vec()))
    }

    /// Teacher-forced decoder. `ys_in` are target prefixes starting with
    /// sos; returns `[B, L, V]` logits.
    pub fn decoder_forward(&self, memory: &Tensor, mem_lens: &[usize], ys_in: &[Vec<usize>], mode: &Mode) -> Result<Tensor> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let (flat, l) = pad_ids(ys_in, cfg.sos_eos());
        let embed = self.param("decoder.embed.weight")?;
        let mut x = embed
            .embedding(&flat, &[ys_in.len(), l])?
            .scale((d as f64).sqrt())
            .add(&positional(0, l, d))?;
        x = mode.dropout(&x, cfg.dropout)?;
        let self_bias = causal_bias(l);
        let mem_bias = key_padding_bias(mem_lens, memory.shape()[1]);
        let p = cfg.dropout;
        for i in 0..cfg.dec_blocks {
            let name = format!("decoder.block{i}");
            let h = norm(self, &format!("{name}.norm1"), &x)?;
            let a = multi_head(self, &format!("{name}.self_attn"), &h, &h, Some(&self_bias), mode)?;
            x = x.add(&mode.dropout(&a, p)?)?;
            let h = norm(self, &format!("{name}.norm2"), &x)?;
            let a = multi_head(self, &format!("{name}.src_attn"), &h, memory, Some(&mem_bias), mode)?;
            x = x.add(&mode.dropout(&a, p)?)?;
            let h = norm(self, &format!("{name}.norm3"), &x)?;
            let f = ffn(self, &format!("{name}.ffn"), &h, mode)?;
            x = x.add(&mode.dropout(&f, p)?)?;
        }
        let x = norm(self, "decoder.final_norm", &x)?;
        Ok(x.matmul_nt(embed)?.add(self.param("decoder.output.bias")?)?)
    }

    /// CTC log-posteriors `[B, T′, V]` of encoder states.
    pub fn ctc_log_probs(&self, enc: &Tensor) -> Result<Tensor> {
        let logits = linear(self, "ctc", enc)?;
        Ok(logits.log_softmax(logits.rank() - 1)?)
    }

    /// Precomputes cross-attention keys/values of one encoded utterance
    /// `[1, T′, d]` for incremental decoding.
    pub fn decoder_memory(&self, enc: &Tensor) -> Result<Memory> {
        let cfg = &self.config;
        let s = enc.shape();
        if s.len() != 3 || s[0] != 1 || s[2] != cfg.d_model {
            return Err(flatten_err("decoder_memory", s, &[1, 0, cfg.d_model]));
        }
        let (t, h) = (s[1], cfg.heads);
        let heads = |x: Tensor| -> Result<Tensor> { Ok(x.reshape(&[t, h, cfg.d_model / h])?.transpose(0, 1)?) };
        let mut k = Vec::with_capacity(cfg.dec_blocks);
        let mut v = Vec::with_capacity(cfg.dec_blocks);
        for i in 0..cfg.dec_blocks {
            k.push(heads(linear(self, &format!("decoder.block{i}.src_attn.k"), enc)?)?);
            v.push(heads(linear(self, &format!("decoder.block{i}.src_attn.v"), enc)?)?);
        }
        Ok(Memory { k, v, len: t })
    }

    pub fn empty_cache(&self, n: usize) -> DecoderCache {
        let cfg = &self.config;
        let dk = cfg.d_model / cfg.heads;
        let empty = || Tensor::zeros(&[n, cfg.heads, 0, dk]);
        DecoderCache {
            n,
            len: 0,
            k: (0..cfg.dec_blocks).map(|_| empty()).collect(),
            v: (0..cfg.dec_blocks).map(|_| empty()).collect(),
        }
    }

    /// Feeds one token per hypothesis. Returns row-major `[n, V]` next-token
    /// log-probabilities and the extended cache.
    pub fn decoder_step(&self, memory: &Memory, cache: &DecoderCache, tokens: &[usize]) -> Result<(Vec<f64>, DecoderCache)> {
        let cfg = &self.config;
        let n = tokens.len();
        if cache.n != n {
            return Err(NetworkError::CacheMismatch { cache: cache.n, tokens: n });
        }
        let (d, h) = (cfg.d_model, cfg.heads);
        let eval = Mode::eval();
        let embed = self.param("decoder.embed.weight")?;
        let mut x = embed
            .embedding(tokens, &[n, 1])?
            .scale((d as f64).sqrt())
            .add(&positional(cache.len, 1, d))?;
        let mut next = DecoderCache {
            n,
            len: cache.len + 1,
            k: Vec::with_capacity(cfg.dec_blocks),
            v: Vec::with_capacity(cfg.dec_blocks),
        };
        for i in 0..cfg.dec_blocks {
            let name = format!("decoder.block{i}");
            let hn = norm(self, &format!("{name}.norm1"), &x)?;
            let q = split_heads(&linear(self, &format!("{name}.self_attn.q"), &hn)?, h)?;
            let k_new = split_heads(&linear(self, &format!("{name}.self_attn.k"), &hn)?, h)?;
            let v_new = split_heads(&linear(self, &format!("{name}.self_attn.v"), &hn)?, h)?;
            let k = Tensor::concat(&[&cache.k[i], &k_new], 2)?;
            let v = Tensor::concat(&[&cache.v[i], &v_new], 2)?;
            let ctx = merge_heads(&attend(&q, &k, &v, None, 0.0, &eval)?)?;
            x = x.add(&linear(self, &format!("{name}.self_attn.o"), &ctx)?)?;
            next.k.push(k);
            next.v.push(v);

            let hn = norm(self, &format!("{name}.norm2"), &x)?;
            // hypotheses act as query rows against the shared memory
            let q = linear(self, &format!("{name}.src_attn.q"), &hn)?
                .reshape(&[n, h, d / h])?
                .transpose(0, 1)?;
            let ctx = attend(&q, &memory.k[i], &memory.v[i], None, 0.0, &eval)?
                .transpose(0, 1)?
                .reshape(&[n, 1, d])?;
            x = x.add(&linear(self, &format!("{name}.src_attn.o"), &ctx)?)?;

            let hn = norm(self, &format!("{name}.norm3"), &x)?;
            x = x.add(&ffn(self, &format!("{name}.ffn"), &hn, &eval)?)?;
        }
        let x = norm(self, "decoder.final_norm", &x)?;
        let logits = x.matmul_nt(embed)?.add(self.param("decoder.output.bias")?)?;
        Ok((logits.log_softmax(2)?.to_vec(), next))
    }
}
