//! Beam search with hybrid CTC/attention scoring, shallow LM fusion and
//! ensembles, plus dataset-level decoding to `hyp.trn`.

mod ctc_prefix;
mod output;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::manifest::ManifestError;
use crate::network::{Bound, DecoderCache, LmState, Memory, Model, Mode, NetworkError, Task};
use crate::subword::{SubwordError, BLANK_ID};

pub use ctc_prefix::{ctc_prefix_score, CtcPrefixScorer, CtcPrefixState};
pub use output::{decode_dataset, entry_input, EntryInput, HYP_FILE, NBEST_FILE};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("nothing to decode: empty input")]
    EmptyInput,
    #[error("at least one model is required")]
    NoModels,
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("inconsistent prefix state: {0}")]
    StateMismatch(String),
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("input does not fit the model: {0}")]
    WrongInput(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::autodiff::TensorError> for DecodeError {
    fn from(e: crate::autodiff::TensorError) -> Self {
        DecodeError::Network(NetworkError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Output length limit as a multiple of the encoder length.
    pub max_len_ratio: f64,
    /// Absolute limit on emitted tokens; overrides the ratio.
    pub max_len: Option<usize>,
    /// CTC share of the per-token score (ASR models only).
    pub ctc_weight: f64,
    pub lm_weight: f64,
    /// Added once per emitted token, eos included.
    pub length_reward: f64,
    pub nbest: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 10,
            max_len_ratio: 1.5,
            max_len: None,
            ctc_weight: 0.3,
            lm_weight: 0.0,
            length_reward: 0.0,
            nbest: 1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DecodeError::InvalidConfig(m.to_string()));
        if self.beam_size == 0 || self.nbest == 0 {
            return bad("beam_size and nbest must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return bad("ctc_weight must lie in [0, 1]");
        }
        if !self.lm_weight.is_finite() || !self.length_reward.is_finite() || !(self.max_len_ratio > 0.0) {
            return bad("weights must be finite and max_len_ratio positive");
        }
        Ok(())
    }
}

/// One utterance to decode.
#[derive(Debug, Clone, Copy)]
pub enum DecodeInput<'a> {
    /// Row-major `frames × dim` features.
    Speech { feats: &'a [f64], frames: usize, dim: usize },
    /// Source token ids (MT).
    Text(&'a [usize]),
}

/// Unweighted score components of a hypothesis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub att: f64,
    pub ctc: f64,
    pub lm: f64,
    pub len: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBest {
    /// Emitted tokens without sos and eos.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub parts: ScoreParts,
}

/// `log(mean_m exp(rows[m][k]))` per column. Equal rows come back
/// unchanged bit for bit.
pub fn log_mean_exp(rows: &[&[f64]]) -> Vec<f64> {
    if rows.len() == 1 {
        return rows[0].to_vec();
    }
    let k = rows.len() as f64;
    (0..rows[0].len())
        .map(|j| {
            let m = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return m;
            }
            let s: f64 = rows.iter().map(|r| (r[j] - m).exp()).sum();
            m + (s / k).ln()
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    parts: ScoreParts,
    ctc: Option<CtcPrefixState<f64>>,
}

struct Candidate {
    score: f64,
    hyp: usize,
    token: usize,
    parts: ScoreParts,
    ctc: Option<CtcPrefixState<f64>>,
}

fn by_score(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.hyp.cmp(&b.hyp))
        .then(a.token.cmp(&b.token))
}

struct Prepared {
    memories: Vec<Memory>,
    ctc: Option<(Vec<f64>, usize)>,
    max_len: usize,
}

/// Bound models ready to decode many utterances.
pub struct Decoder {
    models: Vec<Bound>,
    lm: Option<Bound>,
    cfg: DecodeConfig,
    task: Task,
    vocab: usize,
    eos: usize,
}

impl Decoder {
    /// All models must share task and vocabulary. The LM is only consulted
    /// when `lm_weight` is nonzero.
    pub fn new(models: &[&Model], lm: Option<&Model>, cfg: &DecodeConfig) -> Result<Decoder> {
        cfg.validate()?;
        let first = models.first().ok_or(DecodeError::NoModels)?;
        let (task, vocab) = (first.config.task, first.config.vocab_size);
        if task == Task::Lm {
            return Err(DecodeError::WrongInput("an LM cannot be decoded on its own".into()));
        }
        for m in models {
            if m.config.task != task || m.config.vocab_size != vocab {
                return Err(DecodeError::VocabMismatch(format!(
                    "ensemble members differ ({:?}/{} vs {:?}/{})",
                    m.config.task, m.config.vocab_size, task, vocab
                )));
            }
        }
        let lm = match lm {
            Some(l) if cfg.lm_weight != 0.0 => {
                if l.config.task != Task::Lm || l.config.vocab_size != vocab {
                    return Err(DecodeError::VocabMismatch(format!(
                        "LM vocabulary {} vs decoder {}",
                        l.config.vocab_size, vocab
                    )));
                }
                Some(l.bind(false))
            }
            _ => None,
        };
        Ok(Decoder {
            models: models.iter().map(|m| m.bind(false)).collect(),
            lm,
            cfg: cfg.clone(),
            task,
            vocab,
            eos: first.config.sos_eos(),
        })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.cfg
    }

    pub fn task(&self) -> Task {
        self.task
    }

    fn uses_ctc(&self) -> bool {
        self.task == Task::Asr && self.cfg.ctc_weight > 0.0
    }

    fn prepare(&self, input: DecodeInput<'_>) -> Result<Prepared> {
        let eval = Mode::eval();
        let mut memories = Vec::with_capacity(self.models.len());
        let mut ctc_rows = Vec::new();
        let mut enc_len = 0;
        for b in &self.models {
            let (enc, lens) = match (input, self.task) {
                (DecodeInput::Speech { feats, frames, dim }, Task::Asr | Task::St) => {
                    if frames == 0 {
                        return Err(DecodeError::EmptyInput);
                    }
                    if dim != b.config.feat_dim || feats.len() != frames * dim {
                        return Err(DecodeError::WrongInput(format!(
                            "features are {frames}×{dim}, model expects dim {}",
                            b.config.feat_dim
                        )));
                    }
                    let x = Tensor::from_vec(feats.to_vec(), &[1, frames, dim])?;
                    b.speech_encoder_forward(&x, &[frames], &eval)?
                }
                (DecodeInput::Text(ids), Task::Mt) => {
                    if ids.is_empty() {
                        return Err(DecodeError::EmptyInput);
                    }
                    if ids.iter().any(|&i| i >= b.config.src_vocab_size) {
                        return Err(DecodeError::VocabMismatch("source id out of range".into()));
                    }
                    b.text_encoder_forward("encoder", &[ids.to_vec()], &eval)?
                }
                _ => return Err(DecodeError::WrongInput(format!("{:?} models need the other input kind", self.task))),
            };
            enc_len = lens[0];
            if self.uses_ctc() {
                ctc_rows.push(b.ctc_log_probs(&enc)?.to_vec());
            }
            memories.push(b.decoder_memory(&enc)?);
        }
        let ctc = if self.uses_ctc() {
            let refs: Vec<&[f64]> = ctc_rows.iter().map(Vec::as_slice).collect();
            Some((log_mean_exp(&refs), enc_len))
        } else {
            None
        };
        let max_len = self
            .cfg
            .max_len
            .unwrap_or_else(|| ((enc_len as f64) * self.cfg.max_len_ratio).ceil() as usize)
            .max(1);
        Ok(Prepared { memories, ctc, max_len })
    }

    fn initial(&self, prep: &Prepared) -> Result<Hyp> {
        let ctc = match &prep.ctc {
            Some((lp, t)) => Some(CtcPrefixScorer::new(lp, *t, self.vocab, BLANK_ID, self.eos)?.initial()),
            None => None,
        };
        Ok(Hyp {
            tokens: vec![self.eos],
            score: 0.0,
            parts: ScoreParts::default(),
            ctc,
        })
    }

    /// Scores every allowed extension of `hyp`.
    fn expand(&self, prep: &Prepared, idx: usize, hyp: &Hyp, att: &[f64], lm: Option<&[f64]>, out: &mut Vec<Candidate>) -> Result<()> {
        let emitted = hyp.tokens.len() - 1;
        let scorer = match &prep.ctc {
            Some((lp, t)) => Some(CtcPrefixScorer::new(lp, *t, self.vocab, BLANK_ID, self.eos)?),
            None => None,
        };
        let lambda = if scorer.is_some() { self.cfg.ctc_weight } else { 0.0 };
        let tokens: Box<dyn Iterator<Item = usize>> = if emitted >= prep.max_len {
            Box::new(std::iter::once(self.eos))
        } else {
            Box::new((0..self.vocab).filter(|&k| k != BLANK_ID))
        };
        for y in tokens {
            let mut parts = hyp.parts;
            parts.att += att[y];
            let mut step = (1.0 - lambda) * att[y];
            let mut ctc_state = None;
            if let (Some(sc), Some(state)) = (&scorer, &hyp.ctc) {
                let (inc, st) = sc.score(state, y)?;
                parts.ctc += inc;
                step += lambda * inc;
                ctc_state = Some(st);
            }
            if let Some(l) = lm {
                parts.lm += l[y];
                step += self.cfg.lm_weight * l[y];
            }
            parts.len += self.cfg.length_reward;
            step += self.cfg.length_reward;
            out.push(Candidate {
                score: hyp.score + step,
                hyp: idx,
                token: y,
                parts,
                ctc: ctc_state,
            });
        }
        Ok(())
    }

    fn finish(&self, mut finished: Vec<Hyp>) -> Vec<NBest> {
        finished.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
        finished
            .into_iter()
            .take(self.cfg.nbest)
            .map(|h| NBest {
                tokens: h.tokens[1..h.tokens.len() - 1].to_vec(),
                score: h.score,
                parts: h.parts,
            })
            .collect()
    }

    /// Whether no active hypothesis can still enter the n-best list.
    fn can_stop(&self, finished: &[Hyp], active: &[Hyp], max_len: usize) -> bool {
        if finished.len() < self.cfg.nbest || active.is_empty() {
            return active.is_empty();
        }
        let mut scores: Vec<f64> = finished.iter().map(|h| h.score).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let kth = scores[self.cfg.nbest - 1];
        let emitted = active[0].tokens.len() - 1;
        let gain = self.cfg.length_reward.max(0.0) * (max_len + 1 - emitted.min(max_len)) as f64;
        let best = active.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        best + gain < kth
    }

    /// Keeps the best `beam` candidates; returns (finished, continuing).
    fn select(&self, mut cands: Vec<Candidate>, parents: &[Hyp]) -> (Vec<Hyp>, Vec<(usize, Hyp)>) {
        cands.sort_by(by_score);
        cands.truncate(self.cfg.beam_size);
        let mut done = Vec::new();
        let mut next = Vec::new();
        for c in cands {
            let mut tokens = parents[c.hyp].tokens.clone();
            tokens.push(c.token);
            let h = Hyp {
                tokens,
                score: c.score,
                parts: c.parts,
                ctc: c.ctc,
            };
            if c.token == self.eos {
                done.push(h);
            } else {
                next.push((c.hyp, h));
            }
        }
        (done, next)
    }

    /// Vectorized beam search: each step runs one batched decoder (and LM)
    /// forward over all active hypotheses.
    pub fn search(&self, input: DecodeInput<'_>) -> Result<Vec<NBest>> {
        let prep = self.prepare(input)?;
        let mut active = vec![self.initial(&prep)?];
        let mut caches: Vec<DecoderCache> = self.models.iter().map(|b| b.empty_cache(1)).collect();
        let mut lm_state: Option<LmState> = None;
        let mut finished = Vec::new();
        loop {
            let last: Vec<usize> = active.iter().map(|h| *h.tokens.last().expect("sos")).collect();
            let mut rows = Vec::with_capacity(self.models.len());
            let mut stepped = Vec::with_capacity(self.models.len());
            for ((b, mem), cache) in self.models.iter().zip(&prep.memories).zip(&caches) {
                let (lp, c) = b.decoder_step(mem, cache, &last)?;
                rows.push(lp);
                stepped.push(c);
            }
            let lm_out = match &self.lm {
                Some(lm) => Some(lm.lm_step(lm_state.as_ref(), &last)?),
                None => None,
            };
            let v = self.vocab;
            let mut cands = Vec::new();
            for (i, h) in active.iter().enumerate() {
                let per_model: Vec<&[f64]> = rows.iter().map(|r| &r[i * v..(i + 1) * v]).collect();
                let att = log_mean_exp(&per_model);
                let lm_row = lm_out.as_ref().map(|(lp, _)| &lp[i * v..(i + 1) * v]);
                self.expand(&prep, i, h, &att, lm_row, &mut cands)?;
            }
            let (done, next) = self.select(cands, &active);
            finished.extend(done);
            let parents: Vec<usize> = next.iter().map(|(p, _)| *p).collect();
            active = next.into_iter().map(|(_, h)| h).collect();
            if self.can_stop(&finished, &active, prep.max_len) {
                break;
            }
            caches = stepped.iter().map(|c| c.select(&parents)).collect();
            lm_state = lm_out.map(|(_, s)| s.select(&parents));
        }
        Ok(self.finish(finished))
    }

    /// Reference search that advances one hypothesis at a time with its own
    /// caches. Produces the same n-best lists as [`Decoder::search`].
    pub fn search_reference(&self, input: DecodeInput<'_>) -> Result<Vec<NBest>> {
        let prep = self.prepare(input)?;
        type State = (Vec<DecoderCache>, Option<LmState>);
        let mut active: Vec<(Hyp, State)> = vec![(
            self.initial(&prep)?,
            (self.models.iter().map(|b| b.empty_cache(1)).collect(), None),
        )];
        let mut finished = Vec::new();
        loop {
            let mut cands = Vec::new();
            let mut after: Vec<State> = Vec::with_capacity(active.len());
            for (i, (h, (caches, lm_state))) in active.iter().enumerate() {
                let last = [*h.tokens.last().expect("sos")];
                let mut rows = Vec::new();
                let mut next_caches = Vec::new();
                for ((b, mem), cache) in self.models.iter().zip(&prep.memories).zip(caches) {
                    let (lp, c) = b.decoder_step(mem, cache, &last)?;
                    rows.push(lp);
                    next_caches.push(c);
                }
                let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
                let att = log_mean_exp(&refs);
                let lm_out = match &self.lm {
                    Some(lm) => Some(lm.lm_step(lm_state.as_ref(), &last)?),
                    None => None,
                };
                self.expand(&prep, i, h, &att, lm_out.as_ref().map(|(lp, _)| lp.as_slice()), &mut cands)?;
                after.push((next_caches, lm_out.map(|(_, s)| s)));
            }
            let parents: Vec<Hyp> = active.iter().map(|(h, _)| h.clone()).collect();
            let (done, next) = self.select(cands, &parents);
            finished.extend(done);
            active = next.into_iter().map(|(p, h)| (h, after[p].clone())).collect();
            let hyps: Vec<Hyp> = active.iter().map(|(h, _)| h.clone()).collect();
            if self.can_stop(&finished, &hyps, prep.max_len) {
                break;
            }
        }
        Ok(self.finish(finished))
    }
}

/// Decodes one utterance with the vectorized search.
pub fn beam_search(models: &[&Model], lm: Option<&Model>, input: DecodeInput<'_>, cfg: &DecodeConfig) -> Result<Vec<NBest>> {
    Decoder::new(models, lm, cfg)?.search(input)
}
