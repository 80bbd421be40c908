use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{DecodeError, DecodeInput, Decoder, Result, ScoreParts};
use crate::manifest::{Dataset, DatasetEntry};
use crate::network::Task;
use crate::subword::SubwordModel;

pub const HYP_FILE: &str = "hyp.trn";
pub const NBEST_FILE: &str = "nbest.json";

#[derive(Serialize)]
struct NBestEntry<'a> {
    text: &'a str,
    score: f64,
    parts: ScoreParts,
}

/// Features (speech tasks) or source token ids (MT) of one entry.
pub enum EntryInput {
    Speech { feats: Vec<f64>, frames: usize, dim: usize },
    Text(Vec<usize>),
}

impl EntryInput {
    pub fn as_input(&self) -> DecodeInput<'_> {
        match self {
            EntryInput::Speech { feats, frames, dim } => DecodeInput::Speech {
                feats,
                frames: *frames,
                dim: *dim,
            },
            EntryInput::Text(ids) => DecodeInput::Text(ids),
        }
    }
}

pub fn entry_input(entry: &DatasetEntry, task: Task) -> Result<EntryInput> {
    if task == Task::Mt {
        let src = entry
            .output
            .get(1)
            .ok_or_else(|| DecodeError::WrongInput(format!("{} has no source transcript", entry.utt_id)))?;
        return Ok(EntryInput::Text(src.ids()));
    }
    let m = entry.load_features()?;
    Ok(EntryInput::Speech {
        feats: m.data.iter().map(|&x| f64::from(x)).collect(),
        frames: m.rows,
        dim: m.cols,
    })
}

/// Decodes every entry in dataset order. Writes `hyp.trn` (`<utt_id>
/// <text>` per line) and the n-best sidecar into `out_dir`; returns the
/// 1-best `(utt_id, text)` pairs.
pub fn decode_dataset(decoder: &Decoder, dataset: &Dataset, bpe: &SubwordModel, out_dir: &Path) -> Result<Vec<(String, String)>> {
    fs::create_dir_all(out_dir)?;
    let mut hyps = Vec::with_capacity(dataset.len());
    let mut trn = String::new();
    let mut nbest_texts: BTreeMap<String, Vec<(String, f64, ScoreParts)>> = BTreeMap::new();
    for entry in dataset.entries() {
        let input = entry_input(entry, decoder.task())?;
        let nbest = decoder.search(input.as_input())?;
        let mut list = Vec::with_capacity(nbest.len());
        for h in &nbest {
            list.push((bpe.decode(&h.tokens)?, h.score, h.parts));
        }
        let best = list.first().map(|(t, _, _)| t.clone()).unwrap_or_default();
        log::debug!("{} {}", entry.utt_id, best);
        trn.push_str(&entry.utt_id);
        trn.push(' ');
        trn.push_str(&best);
        trn.push('\n');
        hyps.push((entry.utt_id.clone(), best));
        nbest_texts.insert(entry.utt_id.clone(), list);
    }
    let sidecar: BTreeMap<&str, Vec<NBestEntry<'_>>> = nbest_texts
        .iter()
        .map(|(k, v)| {
            (
                k.as_str(),
                v.iter()
                    .map(|(text, score, parts)| NBestEntry {
                        text,
                        score: *score,
                        parts: *parts,
                    })
                    .collect(),
            )
        })
        .collect();
    fs::write(out_dir.join(HYP_FILE), trn)?;
    let mut json = serde_json::to_string_pretty(&sidecar).expect("n-best lists serialize");
    json.push('\n');
    fs::write(out_dir.join(NBEST_FILE), json)?;
    Ok(hyps)
}
