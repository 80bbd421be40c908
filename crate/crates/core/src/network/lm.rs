//! Stacked LSTM language model.
//!
//! Per layer, with gates in the order input, forget, cell, output:
//! `[i f g o] = x·W_ih + h·W_hh + b`, `c′ = σ(f)⊙c + σ(i)⊙tanh(g)`,
//! `h′ = σ(o)⊙tanh(c′)`.

use crate::autodiff::Tensor;

use super::layers::linear;
use super::seq::gather_rows;
use super::{pad_ids, Bound, Mode, NetworkError, Result};

/// Hidden and cell states of `n` hypotheses, `[n, units]` per layer.
#[derive(Clone)]
pub struct LmState {
    h: Vec<Tensor>,
    c: Vec<Tensor>,
}

impl LmState {
    pub fn select(&self, rows: &[usize]) -> LmState {
        LmState {
            h: self.h.iter().map(|t| gather_rows(t, rows)).collect(),
            c: self.c.iter().map(|t| gather_rows(t, rows)).collect(),
        }
    }

    pub fn hyps(&self) -> usize {
        self.h.first().map_or(0, |t| t.shape()[0])
    }
}

fn cell(x_proj: &Tensor, h: &Tensor, c: &Tensor, w_hh: &Tensor, units: usize) -> Result<(Tensor, Tensor)> {
    let gates = x_proj.add(&h.matmul(w_hh)?)?;
    let i = gates.slice(1, 0, units)?.sigmoid();
    let f = gates.slice(1, units, 2 * units)?.sigmoid();
    let g = gates.slice(1, 2 * units, 3 * units)?.tanh();
    let o = gates.slice(1, 3 * units, 4 * units)?.sigmoid();
    let c = f.mul(c)?.add(&i.mul(&g)?)?;
    let h = o.mul(&c.tanh())?;
    Ok((h, c))
}

impl Bound {
    /// Teacher-forced LM over padded `ids_in`; returns `[B, L, V]` logits.
    pub fn lm_forward(&self, ids_in: &[Vec<usize>], mode: &Mode) -> Result<Tensor> {
        let cfg = &self.config;
        let u = cfg.lm_units;
        let bsz = ids_in.len();
        let (flat, l) = pad_ids(ids_in, cfg.sos_eos());
        let mut x = self.param("lm.embed.weight")?.embedding(&flat, &[bsz, l])?;
        for layer in 0..cfg.lm_layers {
            x = mode.dropout(&x, cfg.dropout)?;
            let w_ih = self.param(&format!("lm.lstm{layer}.w_ih"))?;
            let w_hh = self.param(&format!("lm.lstm{layer}.w_hh"))?;
            let bias = self.param(&format!("lm.lstm{layer}.bias"))?;
            let proj = x.matmul(w_ih)?.add(bias)?;
            let mut h = Tensor::zeros(&[bsz, u]);
            let mut c = Tensor::zeros(&[bsz, u]);
            let mut outs = Vec::with_capacity(l);
            for t in 0..l {
                let xt = proj.slice(1, t, t + 1)?.reshape(&[bsz, 4 * u])?;
                (h, c) = cell(&xt, &h, &c, w_hh, u)?;
                outs.push(h.reshape(&[bsz, 1, u])?);
            }
            let refs: Vec<&Tensor> = outs.iter().collect();
            x = if refs.is_empty() {
                Tensor::zeros(&[bsz, 0, u])
            } else {
                Tensor::concat(&refs, 1)?
            };
        }
        let x = mode.dropout(&x, cfg.dropout)?;
        linear(self, "lm.output", &x)
    }

    /// One LM step for `n` hypotheses (`state = None` starts from zeros).
    /// Returns row-major `[n, V]` log-probabilities and the new state.
    pub fn lm_step(&self, state: Option<&LmState>, tokens: &[usize]) -> Result<(Vec<f64>, LmState)> {
        let cfg = &self.config;
        let (u, n) = (cfg.lm_units, tokens.len());
        if let Some(s) = state.filter(|s| s.hyps() != n) {
            return Err(NetworkError::CacheMismatch { cache: s.hyps(), tokens: n });
        }
        let mut x = self.param("lm.embed.weight")?.embedding(tokens, &[n])?;
        let mut next = LmState {
            h: Vec::with_capacity(cfg.lm_layers),
            c: Vec::with_capacity(cfg.lm_layers),
        };
        for layer in 0..cfg.lm_layers {
            let w_ih = self.param(&format!("lm.lstm{layer}.w_ih"))?;
            let w_hh = self.param(&format!("lm.lstm{layer}.w_hh"))?;
            let bias = self.param(&format!("lm.lstm{layer}.bias"))?;
            let zeros = Tensor::zeros(&[n, u]);
            let (h0, c0) = match state {
                Some(s) => (&s.h[layer], &s.c[layer]),
                None => (&zeros, &zeros),
            };
            let proj = x.matmul(w_ih)?.add(bias)?;
            let (h, c) = cell(&proj, h0, c0, w_hh, u)?;
            x = h.clone();
            next.h.push(h);
            next.c.push(c);
        }
        let logits = linear(self, "lm.output", &x)?;
        Ok((logits.log_softmax(1)?.to_vec(), next))
    }
}
