//! Incremental CTC prefix probabilities for joint decoding.
//!
//! For a prefix `g`, `r_n[t]` / `r_b[t]` are the log-probabilities of all
//! alignments of frames `0..=t` that emit exactly `g` and end in a
//! non-blank / blank frame. `log_psi` is the log-probability of every label
//! sequence that starts with `g`.

use crate::scalar::Scalar;

use super::DecodeError;

#[derive(Debug, Clone, PartialEq)]
pub struct CtcPrefixState<S> {
    pub last: Option<usize>,
    pub r_n: Vec<S>,
    pub r_b: Vec<S>,
    pub log_psi: S,
}

/// CTC posteriors of one utterance, `frames × vocab` time-major.
pub struct CtcPrefixScorer<'a, S> {
    log_probs: &'a [S],
    frames: usize,
    vocab: usize,
    blank: usize,
    eos: usize,
}

impl<'a, S: Scalar> CtcPrefixScorer<'a, S> {
    pub fn new(log_probs: &'a [S], frames: usize, vocab: usize, blank: usize, eos: usize) -> Result<Self, DecodeError> {
        if frames == 0 {
            return Err(DecodeError::EmptyInput);
        }
        if log_probs.len() != frames * vocab || blank >= vocab || eos >= vocab {
            return Err(DecodeError::StateMismatch("posterior matrix does not match frames × vocab".into()));
        }
        Ok(CtcPrefixScorer {
            log_probs,
            frames,
            vocab,
            blank,
            eos,
        })
    }

    fn lp(&self, t: usize, k: usize) -> S {
        self.log_probs[t * self.vocab + k]
    }

    /// State of the empty prefix.
    pub fn initial(&self) -> CtcPrefixState<S> {
        let mut r_b = Vec::with_capacity(self.frames);
        let mut acc = S::zero();
        for t in 0..self.frames {
            acc += self.lp(t, self.blank);
            r_b.push(acc);
        }
        CtcPrefixState {
            last: None,
            r_n: vec![S::neg_infinity(); self.frames],
            r_b,
            log_psi: S::zero(),
        }
    }

    /// `log p(prefix·token·…) − log p(prefix·…)` and the extended state.
    /// For `eos` the increment closes the hypothesis:
    /// `log p(prefix) − log p(prefix·…)`.
    pub fn score(&self, state: &CtcPrefixState<S>, token: usize) -> Result<(S, CtcPrefixState<S>), DecodeError> {
        if state.r_n.len() != self.frames || state.r_b.len() != self.frames {
            return Err(DecodeError::StateMismatch(format!(
                "state covers {} frames, posteriors {}",
                state.r_n.len(),
                self.frames
            )));
        }
        if token >= self.vocab || token == self.blank {
            return Err(DecodeError::StateMismatch(format!("token {token} cannot extend a CTC prefix")));
        }
        let ninf = S::neg_infinity();
        let last_t = self.frames - 1;
        if token == self.eos {
            let full = state.r_n[last_t].log_add_exp(state.r_b[last_t]);
            let next = CtcPrefixState {
                last: Some(token),
                r_n: vec![ninf; self.frames],
                r_b: vec![ninf; self.frames],
                log_psi: full,
            };
            return Ok((increment(full, state.log_psi), next));
        }
        // paths that may precede a new `token` emission
        let phi = |t: usize| {
            if state.last == Some(token) {
                state.r_b[t]
            } else {
                state.r_b[t].log_add_exp(state.r_n[t])
            }
        };
        let mut r_n = vec![ninf; self.frames];
        let mut r_b = vec![ninf; self.frames];
        if state.last.is_none() {
            r_n[0] = self.lp(0, token);
        }
        let mut psi = r_n[0];
        for t in 1..self.frames {
            let p = phi(t - 1);
            r_n[t] = r_n[t - 1].log_add_exp(p) + self.lp(t, token);
            r_b[t] = r_b[t - 1].log_add_exp(r_n[t - 1]) + self.lp(t, self.blank);
            psi = psi.log_add_exp(p + self.lp(t, token));
        }
        let next = CtcPrefixState {
            last: Some(token),
            r_n,
            r_b,
            log_psi: psi,
        };
        Ok((increment(psi, state.log_psi), next))
    }
}

fn increment<S: Scalar>(new: S, old: S) -> S {
    if old == S::neg_infinity() {
        S::neg_infinity()
    } else {
        new - old
    }
}

/// One incremental step from `state`; see [`CtcPrefixScorer::score`].
pub fn ctc_prefix_score<S: Scalar>(
    log_probs: &[S],
    frames: usize,
    vocab: usize,
    state: &CtcPrefixState<S>,
    next_token: usize,
    blank: usize,
    eos: usize,
) -> Result<(S, CtcPrefixState<S>), DecodeError> {
    CtcPrefixScorer::new(log_probs, frames, vocab, blank, eos)?.score(state, next_token)
}
