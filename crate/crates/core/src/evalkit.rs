//! Corpus BLEU on whitespace tokens (multi-reference, optional
//! lowercasing) and word/character error rates.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} reference sets")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("utterance {0} has no reference")]
    MissingReference(String),
    #[error("malformed line {lineno} in {path}")]
    Malformed { path: String, lineno: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram statistics of one sentence (or a whole corpus).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    /// Modified precisions p1..p4 in [0, 1].
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
}

fn split(s: &str, lowercase: bool) -> Vec<String> {
    let s = if lowercase { s.to_lowercase() } else { s.to_string() };
    s.split_whitespace().map(str::to_string).collect()
}

/// Statistics of one hypothesis against its references: each n-gram count
/// is clipped by its maximum count in any single reference, and the
/// reference length is the one closest to the hypothesis (ties → shorter).
pub fn sentence_stats<S: AsRef<str>>(hyp: &str, refs: &[S], lowercase: bool) -> BleuStats {
    let h = split(hyp, lowercase);
    let rs: Vec<Vec<String>> = refs.iter().map(|r| split(r.as_ref(), lowercase)).collect();
    let hv: Vec<&str> = h.iter().map(String::as_str).collect();
    let rv: Vec<Vec<&str>> = rs.iter().map(|r| r.iter().map(String::as_str).collect()).collect();

    let mut st = BleuStats {
        hyp_len: hv.len(),
        ..Default::default()
    };
    st.ref_len = rv
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(hv.len()), l))
        .unwrap_or(0);
    for n in 1..=MAX_ORDER {
        let counts = count_ngrams(&hv, n);
        let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
        for r in &rv {
            for (g, c) in count_ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        st.totals[n - 1] = hv.len().saturating_sub(n - 1);
        st.matches[n - 1] = counts.iter().map(|(g, &c)| c.min(*max_ref.get(g).unwrap_or(&0))).sum();
    }
    st
}

fn count_ngrams<'s>(toks: &'s [&'s str], n: usize) -> HashMap<&'s [&'s str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// BLEU from accumulated statistics; no smoothing, so any zero n-gram
/// precision gives 0.
pub fn bleu_from_stats(st: &BleuStats) -> BleuReport {
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if st.totals[n] > 0 {
            precisions[n] = st.matches[n] as f64 / st.totals[n] as f64;
        }
    }
    let brevity_penalty = if st.hyp_len == 0 {
        0.0
    } else if st.hyp_len >= st.ref_len {
        1.0
    } else {
        (1.0 - st.ref_len as f64 / st.hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    } else {
        0.0
    };
    BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len: st.hyp_len,
        ref_len: st.ref_len,
        matches: st.matches,
        totals: st.totals,
    }
}

/// Corpus-level 4-gram BLEU; `refs[i]` holds every reference of `hyps[i]`.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[Vec<R>], lowercase: bool) -> Result<BleuReport> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let mut total = BleuStats::default();
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        if r.is_empty() {
            return Err(EvalError::MissingReference(i.to_string()));
        }
        total += sentence_stats(h.as_ref(), r, lowercase);
    }
    Ok(bleu_from_stats(&total))
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

fn rate(edits: usize, len: usize) -> f64 {
    if len == 0 {
        if edits == 0 {
            0.0
        } else {
            1.0
        }
    } else {
        edits as f64 / len as f64
    }
}

pub fn wer(hyp: &str, reference: &str) -> f64 {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rate(edit_distance(&h, &r), r.len())
}

/// Character error rate; whitespace runs count as one space character.
pub fn cer(hyp: &str, reference: &str) -> f64 {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").chars().collect::<Vec<char>>();
    let (h, r) = (norm(hyp), norm(reference));
    rate(edit_distance(&h, &r), r.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRate {
    pub rate: f64,
    pub errors: usize,
    pub ref_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UttScore {
    pub utt_id: String,
    #[serde(flatten)]
    pub stats: BleuStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub word_errors: Option<usize>,
}

/// Contents of `score.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub lowercase: bool,
    pub bleu: BleuReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<ErrorRate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cer: Option<ErrorRate>,
    pub utterances: Vec<UttScore>,
}

impl ScoreReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}

/// Scores `(utt_id, text)` hypotheses against references keyed by id.
/// With `error_rates`, WER and CER against the first reference are added.
pub fn score_hypotheses(
    hyps: &[(String, String)],
    refs: &BTreeMap<String, Vec<String>>,
    lowercase: bool,
    error_rates: bool,
) -> Result<ScoreReport> {
    if hyps.is_empty() {
        return Err(EvalError::LengthMismatch { hyps: 0, refs: refs.len() });
    }
    let mut total = BleuStats::default();
    let mut utterances = Vec::with_capacity(hyps.len());
    let (mut w_err, mut w_len, mut c_err, mut c_len) = (0, 0, 0, 0);
    for (id, text) in hyps {
        let r = refs
            .get(id)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| EvalError::MissingReference(id.clone()))?;
        let stats = sentence_stats(text, r, lowercase);
        total += stats;
        let word_errors = if error_rates {
            let h: Vec<String> = split(text, lowercase);
            let rr: Vec<String> = split(&r[0], lowercase);
            let e = edit_distance(&h, &rr);
            w_err += e;
            w_len += rr.len();
            let hc: Vec<char> = h.join(" ").chars().collect();
            let rc: Vec<char> = rr.join(" ").chars().collect();
            c_err += edit_distance(&hc, &rc);
            c_len += rc.len();
            Some(e)
        } else {
            None
        };
        utterances.push(UttScore {
            utt_id: id.clone(),
            stats,
            word_errors,
        });
    }
    let er = |errors, len| ErrorRate {
        rate: rate(errors, len),
        errors,
        ref_len: len,
    };
    Ok(ScoreReport {
        lowercase,
        bleu: bleu_from_stats(&total),
        wer: error_rates.then(|| er(w_err, w_len)),
        cer: error_rates.then(|| er(c_err, c_len)),
        utterances,
    })
}

/// Reads `<utt_id> <text>` lines.
pub fn read_trn(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = match line.split_once(' ') {
            Some((id, rest)) => (id, rest),
            None => (line, ""),
        };
        if id.is_empty() {
            return Err(EvalError::Malformed {
                path: path.display().to_string(),
                lineno: i + 1,
            });
        }
        out.push((id.to_string(), rest.trim().to_string()));
    }
    Ok(out)
}
