//! Dataset JSON files and length-bucketed batching.
//!
//! `output[0]` is always the model's primary target. `output[1]`, when
//! present, is the source transcript (lc.rm): the CTC target of the ASR
//! auxiliary branch, the encoder input of the MT auxiliary branch, and the
//! encoder input of text-only (MT) datasets, which have no `input` entries.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusTable, Treatment};
use crate::fmat::{self, FeatsIndex, FmatError, StoredMatrix};
use crate::subword::SubwordModel;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("no features for utterance {0}")]
    MissingFeature(String),
    #[error("no {treatment} text for utterance {utt_id}")]
    MissingText { utt_id: String, treatment: Treatment },
    #[error("utterance {utt_id} ({frames} frames, {tokens} tokens) exceeds the batch limits")]
    UtteranceTooLong { utt_id: String, frames: usize, tokens: usize },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Feature(#[from] FmatError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputInfo {
    pub name: String,
    /// `<archive path>:<byte offset>`
    pub feat: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputInfo {
    pub name: String,
    pub text: String,
    /// Subword pieces, space-separated.
    pub token: String,
    /// Token ids, space-separated.
    pub tokenid: String,
    /// `[length, vocab size]`
    pub shape: [usize; 2],
}

impl OutputInfo {
    pub fn ids(&self) -> Vec<usize> {
        self.tokenid
            .split_whitespace()
            .map(|t| t.parse().expect("token ids are validated on load"))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub utt_id: String,
    pub input: Vec<InputInfo>,
    pub output: Vec<OutputInfo>,
    pub spk_id: String,
    pub lang: String,
}

impl DatasetEntry {
    /// Encoder length in the unit the encoder consumes: frames for speech,
    /// source tokens for text.
    pub fn source_len(&self) -> usize {
        match (self.input.first(), self.output.get(1)) {
            (Some(i), _) => i.shape[0],
            (None, Some(o)) => o.len(),
            (None, None) => 0,
        }
    }

    pub fn target_len(&self) -> usize {
        self.output.first().map_or(0, OutputInfo::len)
    }

    pub fn load_features(&self) -> Result<StoredMatrix, ManifestError> {
        let info = self.input.first().ok_or_else(|| ManifestError::MissingFeature(self.utt_id.clone()))?;
        let (path, offset) = split_ref(&info.feat)?;
        Ok(fmat::read_at(&path, offset)?)
    }
}

fn split_ref(r: &str) -> Result<(PathBuf, u64), ManifestError> {
    let (p, off) = r
        .rsplit_once(':')
        .ok_or_else(|| ManifestError::Malformed(format!("bad feature reference {r:?}")))?;
    let off = off
        .parse()
        .map_err(|_| ManifestError::Malformed(format!("bad feature offset in {r:?}")))?;
    Ok((PathBuf::from(p), off))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub utts: BTreeMap<String, DatasetEntry>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    utts: BTreeMap<String, DatasetEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utts.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&DatasetEntry> {
        self.utts.get(utt_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.utts.values()
    }

    /// Pretty JSON with sorted keys and a trailing newline.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(DatasetFile { utts: self.utts.clone() }).expect("dataset is serializable");
        let mut s = serde_json::to_string_pretty(&value).expect("value is serializable");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let file: DatasetFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        for e in file.utts.values() {
            for o in &e.output {
                let ids: Result<Vec<usize>, _> = o.tokenid.split_whitespace().map(str::parse::<usize>).collect();
                match ids {
                    Ok(ids) if ids.len() == o.shape[0] && ids.iter().all(|&i| i < o.shape[1]) => {}
                    _ => return Err(ManifestError::Malformed(format!("{}: bad tokenid in {}", e.utt_id, o.name))),
                }
            }
        }
        Ok(Dataset { utts: file.utts })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// One `output` entry to produce for every utterance.
#[derive(Debug, Clone, Copy)]
pub struct OutputSpec<'a> {
    pub name: &'a str,
    pub side: Side,
    pub treatment: Treatment,
    pub model: &'a SubwordModel,
}

/// Binds features and encoded texts for every record of `corpus`.
/// `feats` is `None` for text-only datasets.
pub fn dump_dataset(
    corpus: &CorpusTable,
    feats: Option<&FeatsIndex>,
    outputs: &[OutputSpec<'_>],
) -> Result<Dataset, ManifestError> {
    let mut utts = BTreeMap::new();
    for rec in corpus.records() {
        let input = match feats {
            Some(index) => {
                let e = index
                    .entries
                    .get(&rec.utt_id)
                    .ok_or_else(|| ManifestError::MissingFeature(rec.utt_id.clone()))?;
                vec![InputInfo {
                    name: "input1".into(),
                    feat: e.reference(),
                    shape: [e.rows, e.cols],
                }]
            }
            None => Vec::new(),
        };
        let mut out = Vec::with_capacity(outputs.len());
        for spec in outputs {
            let texts = match spec.side {
                Side::Source => &rec.src_text,
                Side::Target => &rec.tgt_text,
            };
            let text = texts.get(&spec.treatment).ok_or_else(|| ManifestError::MissingText {
                utt_id: rec.utt_id.clone(),
                treatment: spec.treatment,
            })?;
            let ids = spec.model.encode(text);
            out.push(OutputInfo {
                name: spec.name.to_string(),
                text: text.clone(),
                token: spec.model.pieces(text),
                tokenid: ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
                shape: [ids.len(), spec.model.vocab_size()],
            });
        }
        let lang = match outputs.first().map(|o| o.side) {
            Some(Side::Target) => corpus.tgt_lang.clone().unwrap_or_default(),
            _ => corpus.src_lang.clone(),
        };
        utts.insert(
            rec.utt_id.clone(),
            DatasetEntry {
                utt_id: rec.utt_id.clone(),
                input,
                output: out,
                spk_id: rec.spk_id.clone(),
                lang,
            },
        );
    }
    Ok(Dataset { utts })
}

/// Utterance ids of one minibatch with their unpadded lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub utt_ids: Vec<String>,
    pub source_lens: Vec<usize>,
    pub target_lens: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.utt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utt_ids.is_empty()
    }

    pub fn max_source_len(&self) -> usize {
        self.source_lens.iter().copied().max().unwrap_or(0)
    }

    /// `mask[b][t]` is true for valid source positions.
    pub fn source_mask(&self) -> Vec<Vec<bool>> {
        let t = self.max_source_len();
        self.source_lens.iter().map(|&l| (0..t).map(|i| i < l).collect()).collect()
    }
}

/// Sorts by source length (longest first, then id) and fills batches
/// greedily under both budgets.
pub fn make_batches(dataset: &Dataset, max_frames_in: usize, max_tokens_out: usize) -> Result<Vec<Batch>, ManifestError> {
    let mut order: Vec<&DatasetEntry> = dataset.entries().collect();
    order.sort_by(|a, b| b.source_len().cmp(&a.source_len()).then_with(|| a.utt_id.cmp(&b.utt_id)));
    let mut batches = Vec::new();
    let mut cur = Batch {
        utt_ids: Vec::new(),
        source_lens: Vec::new(),
        target_lens: Vec::new(),
    };
    let (mut frames, mut tokens) = (0usize, 0usize);
    for e in order {
        let (s, t) = (e.source_len(), e.target_len());
        if s > max_frames_in || t > max_tokens_out {
            return Err(ManifestError::UtteranceTooLong {
                utt_id: e.utt_id.clone(),
                frames: s,
                tokens: t,
            });
        }
        if !cur.is_empty() && (frames + s > max_frames_in || tokens + t > max_tokens_out) {
            batches.push(std::mem::replace(
                &mut cur,
                Batch {
                    utt_ids: Vec::new(),
                    source_lens: Vec::new(),
                    target_lens: Vec::new(),
                },
            ));
            frames = 0;
            tokens = 0;
        }
        frames += s;
        tokens += t;
        cur.utt_ids.push(e.utt_id.clone());
        cur.source_lens.push(s);
        cur.target_lens.push(t);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{normalize, UtteranceRecord};
    use crate::fmat::ArchiveWriter;
    use crate::subword::bpe_learn;
    use proptest::prelude::*;

    fn corpus() -> CorpusTable {
        let recs = [("u1", "Hello there.", "Hallo da."), ("u2", "Good day!", "Guten Tag!"), ("u3", "Yes", "Ja")]
            .iter()
            .map(|(id, s, t)| UtteranceRecord {
                utt_id: id.to_string(),
                spk_id: "spk".into(),
                audio: None,
                src_text: normalize(s),
                tgt_text: normalize(t),
            })
            .collect();
        CorpusTable::new("en", Some("de"), recs).unwrap()
    }

    fn fixture(dir: &Path) -> (CorpusTable, FeatsIndex, SubwordModel) {
        let c = corpus();
        let mut w = ArchiveWriter::create(&dir.join("feats.ark")).unwrap();
        for (i, r) in c.records().iter().enumerate() {
            let rows = 5 + 3 * i;
            w.append(&r.utt_id, rows, 4, &vec![i as f32; rows * 4]).unwrap();
        }
        let idx = w.finish().unwrap();
        let lines: Vec<String> = c
            .records()
            .iter()
            .flat_map(|r| [r.src_text[&Treatment::LcRm].clone(), r.tgt_text[&Treatment::Tc].clone()])
            .collect();
        let bpe = bpe_learn(&lines, 60).unwrap();
        (c, idx, bpe)
    }

    #[test]
    fn dump_shapes_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let (c, idx, bpe) = fixture(dir.path());
        let specs = [
            OutputSpec { name: "target1", side: Side::Target, treatment: Treatment::Tc, model: &bpe },
            OutputSpec { name: "target2", side: Side::Source, treatment: Treatment::LcRm, model: &bpe },
        ];
        let ds = dump_dataset(&c, Some(&idx), &specs).unwrap();
        assert_eq!(ds.len(), 3);
        for e in ds.entries() {
            let m = e.load_features().unwrap();
            assert_eq!(e.input[0].shape, [m.rows, m.cols]);
            assert_eq!(e.output[0].ids().len(), e.output[0].shape[0]);
            assert_eq!(e.output[0].shape[1], bpe.vocab_size());
            assert_eq!(bpe.decode(&e.output[0].ids()).unwrap(), e.output[0].text);
        }
        assert_eq!(ds.get("u2").unwrap().output[1].text, "good day");
        let p = dir.path().join("data.json");
        ds.save(&p).unwrap();
        let first = fs::read(&p).unwrap();
        dump_dataset(&c, Some(&idx), &specs).unwrap().save(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
        assert_eq!(Dataset::load(&p).unwrap(), ds);
        let text = String::from_utf8(first).unwrap();
        assert!(text.starts_with("{\n  \"utts\": {\n    \"u1\": {\n      \"input\""));
    }

    #[test]
    fn missing_feature() {
        let dir = tempfile::tempdir().unwrap();
        let (c, mut idx, bpe) = fixture(dir.path());
        idx.entries.remove("u3");
        let specs = [OutputSpec { name: "target1", side: Side::Target, treatment: Treatment::Tc, model: &bpe }];
        assert!(matches!(dump_dataset(&c, Some(&idx), &specs), Err(ManifestError::MissingFeature(u)) if u == "u3"));
    }

    fn synthetic(lens: &[(usize, usize)]) -> Dataset {
        let mut utts = BTreeMap::new();
        for (i, &(s, t)) in lens.iter().enumerate() {
            let id = format!("utt{i:03}");
            utts.insert(
                id.clone(),
                DatasetEntry {
                    utt_id: id,
                    input: vec![InputInfo { name: "input1".into(), feat: "x:0".into(), shape: [s, 83] }],
                    output: vec![OutputInfo {
                        name: "target1".into(),
                        text: String::new(),
                        token: String::new(),
                        tokenid: vec!["2"; t].join(" "),
                        shape: [t, 10],
                    }],
                    spk_id: "s".into(),
                    lang: "en".into(),
                },
            );
        }
        Dataset { utts }
    }

    #[test]
    fn batching_extremes() {
        let ds = synthetic(&[(10, 3), (30, 2), (20, 5)]);
        let all = make_batches(&ds, usize::MAX, usize::MAX).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].source_lens, vec![30, 20, 10]);
        assert_eq!(all[0].source_mask()[2], [vec![true; 10], vec![false; 20]].concat());
        let single = make_batches(&ds, 30, 5).unwrap();
        assert_eq!(single.len(), 3);
        assert!(matches!(make_batches(&ds, 29, 100), Err(ManifestError::UtteranceTooLong { .. })));
    }

    proptest! {
        #[test]
        fn batches_partition_dataset(lens in prop::collection::vec((1usize..100, 1usize..20), 1..40), fi in 100usize..500, to in 20usize..80) {
            let ds = synthetic(&lens);
            let b = make_batches(&ds, fi, to).unwrap();
            let mut seen: Vec<String> = b.iter().flat_map(|b| b.utt_ids.clone()).collect();
            seen.sort();
            let want: Vec<String> = ds.utts.keys().cloned().collect();
            prop_assert_eq!(seen, want);
            for batch in &b {
                prop_assert!(batch.source_lens.iter().sum::<usize>() <= fi);
                prop_assert!(batch.target_lens.iter().sum::<usize>() <= to);
            }
            prop_assert_eq!(make_batches(&ds, fi, to).unwrap(), b);
        }
    }
}
