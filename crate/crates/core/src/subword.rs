//! Byte-pair-encoding subwords.
//!
//! Every word starts as `▁` followed by its characters. Learning repeatedly
//! merges the most frequent adjacent pair (ties go to the lexicographically
//! smallest pair) until the vocabulary is full or no pair occurs twice.
//! Encoding replays the merges in learned order.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const MARKER: &str = "▁";
pub const BLANK: &str = "<blank>";
pub const UNK: &str = "<unk>";
pub const SOS_EOS: &str = "<sos/eos>";
pub const BLANK_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum SubwordError {
    #[error("vocabulary size {requested} is below the minimum {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("model file line {lineno}: {msg}")]
    Parse { lineno: usize, msg: String },
    #[error("{0}")]
    Io(String),
}

impl From<io::Error> for SubwordError {
    fn from(e: io::Error) -> Self {
        SubwordError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubwordModel {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    ids: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
}

fn split_word(word: &str) -> Vec<String> {
    std::iter::once(MARKER.to_string())
        .chain(word.chars().map(String::from))
        .collect()
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let r = symbols.remove(i + 1);
            symbols[i].push_str(&r);
        }
        i += 1;
    }
}

/// Learns merges from whitespace-tokenized lines.
pub fn bpe_learn<S: AsRef<str>>(lines: &[S], vocab_size: usize) -> Result<SubwordModel, SubwordError> {
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    let mut base: Vec<String> = word_counts
        .keys()
        .flat_map(|w| w.chars().map(String::from))
        .chain(std::iter::once(MARKER.to_string()))
        .collect();
    base.sort();
    base.dedup();
    let minimum = base.len() + 3;
    if vocab_size < minimum {
        return Err(SubwordError::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }

    let mut words: Vec<(Vec<String>, usize)> = word_counts.iter().map(|(w, &c)| (split_word(w), c)).collect();
    let mut symbols = base;
    let mut known: std::collections::HashSet<String> = symbols.iter().cloned().collect();
    let mut merges = Vec::new();
    while symbols.len() + 3 < vocab_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, c) in &words {
            for p in syms.windows(2) {
                *counts.entry((&p[0], &p[1])).or_default() += c;
            }
        }
        // BTreeMap order makes the first maximum the lexicographically smallest
        let Some((pair, n)) = counts.iter().fold(None, |best: Option<(&(&str, &str), usize)>, (p, &n)| match best {
            Some((_, m)) if m >= n => best,
            _ => Some((p, n)),
        }) else {
            break;
        };
        if n < 2 {
            break;
        }
        let (left, right) = (pair.0.to_string(), pair.1.to_string());
        drop(counts);
        for (syms, _) in &mut words {
            merge_in_place(syms, &left, &right);
        }
        let joined = format!("{left}{right}");
        if known.insert(joined.clone()) {
            symbols.push(joined);
        }
        merges.push((left, right));
    }

    let mut vocab = vec![BLANK.to_string(), UNK.to_string()];
    vocab.extend(symbols);
    vocab.push(SOS_EOS.to_string());
    Ok(SubwordModel::from_parts(merges, vocab))
}

impl SubwordModel {
    fn from_parts(merges: Vec<(String, String)>, vocab: Vec<String>) -> Self {
        let ids = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        SubwordModel {
            merges,
            vocab,
            ids,
            ranks,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn sos_eos(&self) -> usize {
        self.vocab.len() - 1
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Result<&str, SubwordError> {
        self.vocab.get(id).map(String::as_str).ok_or(SubwordError::IdOutOfRange {
            id,
            size: self.vocab.len(),
        })
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<usize>) {
        let mut syms = split_word(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())))
                .min();
            let Some(&rank) = best else { break };
            let (l, r) = &self.merges[rank];
            merge_in_place(&mut syms, l, r);
        }
        out.extend(syms.iter().map(|s| self.id(s).unwrap_or(UNK_ID)));
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// Subword pieces of `text`, space-separated.
    pub fn pieces(&self, text: &str) -> String {
        self.encode(text)
            .iter()
            .map(|&i| self.vocab[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Joins pieces into words. Blank and sos/eos are dropped; unk is
    /// rendered as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Result<String, SubwordError> {
        let mut text = String::new();
        for &id in ids {
            let tok = self.token(id)?;
            if id == BLANK_ID || id == self.sos_eos() {
                continue;
            }
            text.push_str(tok);
        }
        Ok(text
            .split(MARKER)
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" "))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("BPE v1 {}\n", self.vocab.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        for (i, t) in self.vocab.iter().enumerate() {
            let _ = writeln!(s, "{t} {i}");
        }
        s
    }

    pub fn from_text(body: &str) -> Result<Self, SubwordError> {
        let lines: Vec<&str> = body.lines().collect();
        let parse = |lineno: usize, msg: &str| SubwordError::Parse {
            lineno,
            msg: msg.to_string(),
        };
        let header = lines.first().ok_or_else(|| parse(1, "empty file"))?;
        let size: usize = header
            .strip_prefix("BPE v1 ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| parse(1, "expected `BPE v1 <vocab_size>`"))?;
        if lines.len() < 1 + size {
            return Err(parse(lines.len(), "truncated vocabulary"));
        }
        let split = lines.len() - size;
        let mut merges = Vec::new();
        for (i, line) in lines[1..split].iter().enumerate() {
            let (l, r) = line.split_once(' ').ok_or_else(|| parse(i + 2, "expected `<left> <right>`"))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let mut vocab = Vec::with_capacity(size);
        for (i, line) in lines[split..].iter().enumerate() {
            let lineno = split + i + 1;
            let (tok, id) = line.rsplit_once(' ').ok_or_else(|| parse(lineno, "expected `<token> <id>`"))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(parse(lineno, "ids must be dense and ordered"));
            }
            vocab.push(tok.to_string());
        }
        Ok(SubwordModel::from_parts(merges, vocab))
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SubwordError> {
        SubwordModel::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn most_frequent_pair_first() {
        let m = bpe_learn(&["aaab aaab aaab"], 100).unwrap();
        // pair counts: (▁,a)=3, (a,a)=6, (a,b)=3
        assert_eq!(m.merges()[0], ("a".into(), "a".into()));
    }

    #[test]
    fn ties_break_lexicographically() {
        let m = bpe_learn(&["ab ab cd cd"], 100).unwrap();
        // (▁,a) (a,b) (▁,c) (c,d) all occur twice
        assert_eq!(m.merges()[0], ("a".into(), "b".into()));
    }

    #[test]
    fn too_small() {
        assert_eq!(
            bpe_learn(&["abc"], 6),
            Err(SubwordError::VocabTooSmall { requested: 6, minimum: 7 })
        );
        assert!(bpe_learn(&["abc"], 7).is_ok());
    }

    #[test]
    fn single_character_corpus() {
        let m = bpe_learn(&["a"], 10).unwrap();
        let ids = m.encode("a");
        assert_eq!(m.decode(&ids).unwrap(), "a");
        assert_eq!(m.token(0).unwrap(), BLANK);
        assert_eq!(m.token(m.sos_eos()).unwrap(), SOS_EOS);
    }

    #[test]
    fn empty_and_unknown() {
        let m = bpe_learn(&["hello world"], 30).unwrap();
        assert!(m.encode("").is_empty());
        assert_eq!(m.decode(&[]).unwrap(), "");
        assert!(m.encode("hexz").contains(&UNK_ID));
        assert_eq!(
            m.decode(&[m.vocab_size()]),
            Err(SubwordError::IdOutOfRange {
                id: m.vocab_size(),
                size: m.vocab_size()
            })
        );
    }

    #[test]
    fn file_round_trip() {
        let m = bpe_learn(&["the cat sat on the mat", "the dog"], 40).unwrap();
        let text = m.to_text();
        assert!(text.starts_with(&format!("BPE v1 {}\n", m.vocab_size())));
        assert_eq!(SubwordModel::from_text(&text).unwrap(), m);
        assert!(SubwordModel::from_text("BPE v2 3\n").is_err());
    }

    #[test]
    fn specials_survive_decode() {
        let m = bpe_learn(&["ab"], 20).unwrap();
        let mut ids = vec![m.sos_eos(), BLANK_ID];
        ids.extend(m.encode("ab ba"));
        ids.push(m.sos_eos());
        assert_eq!(m.decode(&ids).unwrap(), "ab ba");
        assert_eq!(m.decode(&[m.id(MARKER).unwrap(), UNK_ID]).unwrap(), "<unk>");
    }

    fn corpus() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::collection::vec("[a-f']{1,6}", 1..6).prop_map(|w| w.join(" ")), 1..12)
    }

    proptest! {
        #[test]
        fn training_corpus_round_trips(lines in corpus(), extra in 0usize..60) {
            let m = bpe_learn(&lines, 11 + extra).unwrap();
            for l in &lines {
                let ids = m.encode(l);
                prop_assert!(!ids.contains(&UNK_ID));
                prop_assert_eq!(&m.decode(&ids).unwrap(), &l.split_whitespace().collect::<Vec<_>>().join(" "));
                prop_assert_eq!(m.encode(&m.decode(&ids).unwrap()), ids);
            }
        }

        #[test]
        fn learning_is_deterministic(lines in corpus()) {
            let a = bpe_learn(&lines, 40).unwrap().to_text();
            let b = bpe_learn(&lines, 40).unwrap().to_text();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn joint_vocabulary_covers_both_sides(src in corpus(), tgt in prop::collection::vec("[A-Z][g-k]{0,5} [g-k.]{1,4}", 1..8)) {
            let joint: Vec<String> = src.iter().chain(&tgt).cloned().collect();
            let m = bpe_learn(&joint, 60).unwrap();
            for l in &joint {
                prop_assert!(!m.encode(l).contains(&UNK_ID));
            }
        }

        #[test]
        fn vocab_ids_are_dense_and_merges_in_vocab(lines in corpus()) {
            let m = bpe_learn(&lines, 50).unwrap();
            prop_assert!(m.vocab_size() <= 50);
            for i in 0..m.vocab_size() {
                prop_assert_eq!(m.id(m.token(i).unwrap()), Some(i));
            }
            for (l, r) in m.merges() {
                let joined = format!("{l}{r}");
                prop_assert!(m.id(&joined).is_some());
            }
        }
    }
}
