//! Training objectives: CTC, label-smoothed cross-entropy and their hybrid
//! and multi-task combinations.

mod ctc;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};
use crate::network::{Bound, Mode, NetworkError, Task};
use crate::subword::BLANK_ID;

pub use ctc::{ctc_loss, min_frames};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("target of {labels} labels cannot be aligned to {frames} frames")]
    InfeasibleTarget { frames: usize, labels: usize },
    #[error("target id {0} is blank or out of range")]
    InvalidTarget(usize),
    #[error("auxiliary ASR/MT objective needs source transcripts (output[1])")]
    MissingTranscript,
    #[error("batch has no speech features")]
    MissingFeatures,
    #[error("loss does not apply to {0:?} models")]
    WrongTask(Task),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl From<TensorError> for ObjectiveError {
    fn from(e: TensorError) -> Self {
        ObjectiveError::Network(NetworkError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Mean CTC loss over a batch of `[B, T, V]` log-probabilities, with
/// per-utterance valid lengths. Differentiable with respect to `log_probs`.
pub fn ctc_batch(log_probs: &Tensor, lens: &[usize], targets: &[Vec<usize>]) -> Result<Tensor> {
    let s = log_probs.shape();
    if s.len() != 3 || s[0] != lens.len() || s[0] != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "ctc_batch",
            lhs: s.to_vec(),
            rhs: vec![lens.len(), targets.len()],
        }
        .into());
    }
    let (bsz, t_max, v) = (s[0], s[1], s[2]);
    let data = log_probs.data();
    let mut total = 0.0;
    let mut grad = vec![0.0; data.len()];
    for b in 0..bsz {
        let t = lens[b].min(t_max);
        let off = b * t_max * v;
        let (loss, g) = ctc_loss(&data[off..off + t * v], t, v, &targets[b], BLANK_ID)?;
        total += loss;
        grad[off..off + t * v].copy_from_slice(&g);
    }
    let scale = 1.0 / bsz.max(1) as f64;
    Ok(Tensor::from_op(vec![total * scale], vec![], &[log_probs], move |g, _| {
        vec![Some(grad.iter().map(|x| x * g[0] * scale).collect())]
    }))
}

/// Positions with this target are excluded from cross-entropy.
pub const IGNORE_ID: usize = usize::MAX;

/// Label-smoothed cross-entropy averaged over non-ignored positions:
/// `−[(1−ε)·log p(y) + ε/(V−1)·Σ_{k≠y} log p(k)]`. Returns the loss and the
/// number of counted positions (a zero count gives a zero loss).
pub fn label_smoothed_ce(logits: &Tensor, targets: &[usize], eps: f64) -> Result<(Tensor, usize)> {
    let s = logits.shape();
    let v = *s.last().unwrap_or(&0);
    let positions = logits.numel() / v.max(1);
    if targets.len() != positions || v < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "label_smoothed_ce",
            lhs: s.to_vec(),
            rhs: vec![targets.len()],
        }
        .into());
    }
    let count = targets.iter().filter(|&&y| y != IGNORE_ID).count();
    if count == 0 {
        return Ok((Tensor::scalar(0.0), 0));
    }
    let off = eps / (v - 1) as f64;
    let mut weights = vec![0.0; logits.numel()];
    for (p, &y) in targets.iter().enumerate() {
        if y == IGNORE_ID {
            continue;
        }
        if y >= v {
            return Err(ObjectiveError::InvalidTarget(y));
        }
        let row = &mut weights[p * v..(p + 1) * v];
        row.fill(off);
        row[y] = 1.0 - eps;
    }
    let w = Tensor::from_vec(weights, s)?;
    let lp = logits.log_softmax(s.len() - 1)?;
    Ok((lp.mul(&w)?.reduce_sum().scale(-1.0 / count as f64), count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub parts: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

/// Differentiable total plus its itemization.
pub struct Loss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// CTC share of the hybrid ASR loss.
    pub ctc: f64,
    /// Auxiliary ASR (CTC) branch of ST training.
    pub asr: f64,
    /// Auxiliary MT branch of ST training.
    pub mt: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ctc: 0.3,
            asr: 0.3,
            mt: 0.3,
            label_smoothing: 0.1,
        }
    }
}

/// One padded minibatch. Features are stored as plain values so batches
/// can be prepared on another thread.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchData {
    pub utt_ids: Vec<String>,
    /// `[B, T, D]` zero-padded features.
    pub feats: Option<(Vec<f64>, [usize; 3])>,
    pub feat_lens: Vec<usize>,
    /// Primary targets (`output[0]`), without sos/eos.
    pub targets: Vec<Vec<usize>>,
    /// Source transcripts (`output[1]`).
    pub sources: Option<Vec<Vec<usize>>>,
}

impl BatchData {
    pub fn len(&self) -> usize {
        self.utt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utt_ids.is_empty()
    }

    fn feats_tensor(&self) -> Result<Tensor> {
        let (data, shape) = self.feats.as_ref().ok_or(ObjectiveError::MissingFeatures)?;
        Ok(Tensor::from_vec(data.clone(), shape)?)
    }

    fn sources(&self) -> Result<&[Vec<usize>]> {
        self.sources.as_deref().ok_or(ObjectiveError::MissingTranscript)
    }
}

/// `([sos] + y, y + [eos])` per target, the latter flattened and padded
/// with [`IGNORE_ID`] to the longest sequence.
pub fn teacher_forcing(targets: &[Vec<usize>], sos_eos: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let l = targets.iter().map(Vec::len).max().unwrap_or(0) + 1;
    let ys_in = targets
        .iter()
        .map(|y| std::iter::once(sos_eos).chain(y.iter().copied()).collect())
        .collect();
    let mut ys_out = Vec::with_capacity(targets.len() * l);
    for y in targets {
        ys_out.extend_from_slice(y);
        ys_out.push(sos_eos);
        ys_out.extend(std::iter::repeat(IGNORE_ID).take(l - y.len() - 1));
    }
    (ys_in, ys_out)
}

fn attention_ce(b: &Bound, enc: &Tensor, lens: &[usize], targets: &[Vec<usize>], eps: f64, mode: &Mode) -> Result<Tensor> {
    let (ys_in, ys_out) = teacher_forcing(targets, b.config.sos_eos());
    let logits = b.decoder_forward(enc, lens, &ys_in, mode)?;
    Ok(label_smoothed_ce(&logits, &ys_out, eps)?.0)
}

struct Combiner {
    total: Option<Tensor>,
    breakdown: LossBreakdown,
}

impl Combiner {
    fn new() -> Self {
        Combiner {
            total: None,
            breakdown: LossBreakdown {
                total: 0.0,
                parts: BTreeMap::new(),
                weights: BTreeMap::new(),
            },
        }
    }

    fn add(&mut self, name: &str, weight: f64, part: Tensor) -> Result<()> {
        self.breakdown.parts.insert(name.to_string(), part.item());
        self.breakdown.weights.insert(name.to_string(), weight);
        let term = if weight == 1.0 { part } else { part.scale(weight) };
        self.total = Some(match self.total.take() {
            None => term,
            Some(t) => t.add(&term)?,
        });
        Ok(())
    }

    fn finish(self) -> Loss {
        let total = self.total.unwrap_or_else(|| Tensor::scalar(0.0));
        let mut breakdown = self.breakdown;
        breakdown.total = total.item();
        Loss { total, breakdown }
    }
}

/// `λ·ctc + (1−λ)·att`; a branch with zero weight is not computed.
pub fn hybrid_asr_loss(b: &Bound, batch: &BatchData, w: &LossWeights, mode: &Mode) -> Result<Loss> {
    if b.config.task != Task::Asr {
        return Err(ObjectiveError::WrongTask(b.config.task));
    }
    let (enc, lens) = b.speech_encoder_forward(&batch.feats_tensor()?, &batch.feat_lens, mode)?;
    let mut c = Combiner::new();
    if w.ctc > 0.0 {
        let lp = b.ctc_log_probs(&enc)?;
        c.add("ctc", w.ctc, ctc_batch(&lp, &lens, &batch.targets)?)?;
    }
    if w.ctc < 1.0 {
        let att = attention_ce(b, &enc, &lens, &batch.targets, w.label_smoothing, mode)?;
        c.add("att", 1.0 - w.ctc, att)?;
    }
    Ok(c.finish())
}

/// `st_ce + λ_asr·asr_ctc + λ_mt·mt_ce`. The ASR branch is CTC on the
/// speech encoder against the source transcript; the MT branch feeds the
/// transcript through the auxiliary text encoder into the shared decoder.
pub fn st_mtl_loss(b: &Bound, batch: &BatchData, w: &LossWeights, mode: &Mode) -> Result<Loss> {
    if b.config.task != Task::St {
        return Err(ObjectiveError::WrongTask(b.config.task));
    }
    if (w.asr > 0.0 || w.mt > 0.0) && batch.sources.is_none() {
        return Err(ObjectiveError::MissingTranscript);
    }
    let (enc, lens) = b.speech_encoder_forward(&batch.feats_tensor()?, &batch.feat_lens, mode)?;
    let mut c = Combiner::new();
    c.add("st_ce", 1.0, attention_ce(b, &enc, &lens, &batch.targets, w.label_smoothing, mode)?)?;
    if w.asr > 0.0 {
        let lp = b.ctc_log_probs(&enc)?;
        c.add("asr_ctc", w.asr, ctc_batch(&lp, &lens, batch.sources()?)?)?;
    }
    if w.mt > 0.0 {
        let (src, src_lens) = b.text_encoder_forward("mt_encoder", batch.sources()?, mode)?;
        let mt = attention_ce(b, &src, &src_lens, &batch.targets, w.label_smoothing, mode)?;
        c.add("mt_ce", w.mt, mt)?;
    }
    Ok(c.finish())
}

/// Text-to-text cross-entropy of an MT model; the encoder reads `sources`.
pub fn mt_loss(b: &Bound, batch: &BatchData, w: &LossWeights, mode: &Mode) -> Result<Loss> {
    if b.config.task != Task::Mt {
        return Err(ObjectiveError::WrongTask(b.config.task));
    }
    let (enc, lens) = b.text_encoder_forward("encoder", batch.sources()?, mode)?;
    let mut c = Combiner::new();
    c.add("att", 1.0, attention_ce(b, &enc, &lens, &batch.targets, w.label_smoothing, mode)?)?;
    Ok(c.finish())
}

/// Next-token cross-entropy (no smoothing) of an LSTM LM over `targets`.
pub fn lm_loss(b: &Bound, batch: &BatchData, mode: &Mode) -> Result<Loss> {
    if b.config.task != Task::Lm {
        return Err(ObjectiveError::WrongTask(b.config.task));
    }
    let (ys_in, ys_out) = teacher_forcing(&batch.targets, b.config.sos_eos());
    let logits = b.lm_forward(&ys_in, mode)?;
    let mut c = Combiner::new();
    c.add("lm", 1.0, label_smoothed_ce(&logits, &ys_out, 0.0)?.0)?;
    Ok(c.finish())
}

/// The objective matching the model's task.
pub fn task_loss(b: &Bound, batch: &BatchData, w: &LossWeights, mode: &Mode) -> Result<Loss> {
    match b.config.task {
        Task::Asr => hybrid_asr_loss(b, batch, w, mode),
        Task::St => st_mtl_loss(b, batch, w, mode),
        Task::Mt => mt_loss(b, batch, w, mode),
        Task::Lm => lm_loss(b, batch, mode),
    }
}

#[cfg(test)]
mod tests;
