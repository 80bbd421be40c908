//! Kaldi-style data directories and text normalization.
//!
//! Text goes through a Moses-like tokenizer with a small, fixed rule set and
//! is then rendered in three casing/punctuation treatments: `tc` (as given),
//! `lc` (lowercased) and `lc.rm` (lowercased, punctuation-only tokens
//! removed, apostrophe-bearing tokens kept).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("duplicate utterance id {0}")]
    DuplicateUttId(String),
    #[error("{file}:{lineno}: malformed line")]
    MalformedLine { file: PathBuf, lineno: usize },
    #[error("{file} has no entry for utterance {utt_id}")]
    MissingEntry { file: PathBuf, utt_id: String },
    #[error("unknown text treatment {0:?}")]
    UnknownTreatment(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Treatment {
    #[serde(rename = "tc")]
    Tc,
    #[serde(rename = "lc")]
    Lc,
    #[serde(rename = "lc.rm")]
    LcRm,
}

impl Treatment {
    pub const ALL: [Treatment; 3] = [Treatment::Tc, Treatment::Lc, Treatment::LcRm];

    pub fn as_str(self) -> &'static str {
        match self {
            Treatment::Tc => "tc",
            Treatment::Lc => "lc",
            Treatment::LcRm => "lc.rm",
        }
    }
}

impl fmt::Display for Treatment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Treatment {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tc" => Ok(Treatment::Tc),
            "lc" => Ok(Treatment::Lc),
            "lc.rm" => Ok(Treatment::LcRm),
            other => Err(CorpusError::UnknownTreatment(other.to_string())),
        }
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Splits `text` into space-separated tokens.
///
/// Rules: split on whitespace; every leading or trailing ASCII punctuation
/// character becomes its own token; inside a word, each apostrophe starts a
/// new token (`don't` → `don 't`).
pub fn tokenize(text: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        while start < chars.len() && is_punct(chars[start]) {
            start += 1;
        }
        let mut end = chars.len();
        while end > start && is_punct(chars[end - 1]) {
            end -= 1;
        }
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        let core = &chars[start..end];
        let mut piece = String::new();
        for &c in core {
            if c == '\'' && !piece.is_empty() {
                out.push(std::mem::take(&mut piece));
            }
            piece.push(c);
        }
        if !piece.is_empty() {
            out.push(piece);
        }
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out.join(" ")
}

/// Renders tokenized text in one of the three treatments.
pub fn apply_treatment(tokens: &str, treatment: Treatment) -> String {
    match treatment {
        Treatment::Tc => tokens.split_whitespace().collect::<Vec<_>>().join(" "),
        Treatment::Lc => tokens
            .split_whitespace()
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
            .join(" "),
        Treatment::LcRm => tokens
            .split_whitespace()
            .filter(|t| !t.chars().all(is_punct))
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
            .join(" "),
    }
}

/// All three treatments of raw `text`.
pub fn normalize(text: &str) -> BTreeMap<Treatment, String> {
    let tok = tokenize(text);
    Treatment::ALL.iter().map(|&t| (t, apply_treatment(&tok, t))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioRef {
    pub path: PathBuf,
    /// `(start_sec, end_sec)` within the recording.
    pub segment: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub spk_id: String,
    pub audio: Option<AudioRef>,
    pub src_text: BTreeMap<Treatment, String>,
    pub tgt_text: BTreeMap<Treatment, String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusTable {
    pub src_lang: String,
    pub tgt_lang: Option<String>,
    records: Vec<UtteranceRecord>,
}

impl CorpusTable {
    /// Builds a table sorted by utterance id.
    pub fn new(src_lang: &str, tgt_lang: Option<&str>, mut records: Vec<UtteranceRecord>) -> Result<Self, CorpusError> {
        records.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        for pair in records.windows(2) {
            if pair[0].utt_id == pair[1].utt_id {
                return Err(CorpusError::DuplicateUttId(pair[0].utt_id.clone()));
            }
        }
        Ok(CorpusTable {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.map(str::to_string),
            records,
        })
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.records
            .binary_search_by(|r| r.utt_id.as_str().cmp(utt_id))
            .ok()
            .map(|i| &self.records[i])
    }

    /// Writes the table as a data directory; inverse of [`load_data_dir`].
    pub fn write_data_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let mut wav = String::new();
        let mut segments = String::new();
        let mut utt2spk = String::new();
        let mut texts: BTreeMap<String, String> = BTreeMap::new();
        for r in &self.records {
            if let Some(a) = &r.audio {
                match a.segment {
                    Some((s, e)) => {
                        wav.push_str(&format!("{} {}\n", r.utt_id, a.path.display()));
                        segments.push_str(&format!("{} {} {} {}\n", r.utt_id, r.utt_id, s, e));
                    }
                    None => wav.push_str(&format!("{} {}\n", r.utt_id, a.path.display())),
                }
            }
            utt2spk.push_str(&format!("{} {}\n", r.utt_id, r.spk_id));
            for (t, s) in &r.src_text {
                texts.entry(format!("text.{t}")).or_default().push_str(&line(&r.utt_id, s));
            }
            if let Some(lang) = &self.tgt_lang {
                for (t, s) in &r.tgt_text {
                    texts.entry(format!("text.{t}.{lang}")).or_default().push_str(&line(&r.utt_id, s));
                }
            }
        }
        if !wav.is_empty() {
            write_file(&dir.join("wav.scp"), &wav)?;
        }
        if !segments.is_empty() {
            write_file(&dir.join("segments"), &segments)?;
        }
        write_file(&dir.join("utt2spk"), &utt2spk)?;
        for (name, body) in texts {
            write_file(&dir.join(name), &body)?;
        }
        Ok(())
    }
}

fn line(utt: &str, text: &str) -> String {
    if text.is_empty() {
        format!("{utt}\n")
    } else {
        format!("{utt} {text}\n")
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

/// Parses `<utt_id> <rest>` lines. `min_fields` counts the id.
fn read_table(path: &Path, min_fields: usize) -> Result<Vec<(String, String)>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let body = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, raw) in body.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let (id, rest) = match raw.split_once(' ') {
            Some((id, rest)) => (id, rest.trim()),
            None => (raw.trim(), ""),
        };
        let fields = 1 + rest.split_whitespace().count();
        if id.is_empty() || fields < min_fields {
            return Err(CorpusError::MalformedLine {
                file: path.to_path_buf(),
                lineno: i + 1,
            });
        }
        rows.push((id.to_string(), rest.to_string()));
    }
    Ok(rows)
}

fn read_map(path: &Path, min_fields: usize) -> Result<HashMap<String, String>, CorpusError> {
    let mut map = HashMap::new();
    for (id, rest) in read_table(path, min_fields)? {
        if map.insert(id.clone(), rest).is_some() {
            return Err(CorpusError::DuplicateUttId(id));
        }
    }
    Ok(map)
}

/// Target language suffix from a `text.tc.<lang>` file, if any.
fn detect_tgt_lang(dir: &Path) -> Result<Option<String>, CorpusError> {
    let mut langs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(lang) = name.strip_prefix("text.tc.") {
            langs.push(lang.to_string());
        }
    }
    langs.sort();
    Ok(langs.into_iter().next())
}

/// Loads a data directory. One record per line of `text.tc`; `utt2spk` must
/// cover every utterance, `wav.scp` is required unless `text_only`.
pub fn load_data_dir(dir: &Path, src_lang: &str) -> Result<CorpusTable, CorpusError> {
    load_data_dir_with(dir, src_lang, false)
}

/// Like [`load_data_dir`]; `text_only` permits a missing `wav.scp` (MT data).
pub fn load_data_dir_with(dir: &Path, src_lang: &str, text_only: bool) -> Result<CorpusTable, CorpusError> {
    let tc_path = dir.join("text.tc");
    let utts = read_table(&tc_path, 1)?;
    let mut seen = HashSet::new();
    for (id, _) in &utts {
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateUttId(id.clone()));
        }
    }
    let wav_path = dir.join("wav.scp");
    let wavs = if text_only && !wav_path.exists() {
        None
    } else {
        Some(read_map(&wav_path, 2)?)
    };
    let spk_path = dir.join("utt2spk");
    let spk = read_map(&spk_path, 2)?;
    let seg_path = dir.join("segments");
    let segments = if seg_path.exists() {
        Some(read_map(&seg_path, 4)?)
    } else {
        None
    };
    let lc = read_map(&dir.join("text.lc"), 1)?;
    let lcrm = read_map(&dir.join("text.lc.rm"), 1)?;
    let tgt_lang = detect_tgt_lang(dir)?;
    let tgt = match &tgt_lang {
        Some(lang) => Some(
            Treatment::ALL
                .iter()
                .map(|t| Ok((*t, read_map(&dir.join(format!("text.{t}.{lang}")), 1)?)))
                .collect::<Result<Vec<_>, CorpusError>>()?,
        ),
        None => None,
    };

    let missing = |file: &Path, id: &str| CorpusError::MissingEntry {
        file: file.to_path_buf(),
        utt_id: id.to_string(),
    };
    let mut records = Vec::with_capacity(utts.len());
    for (id, tc) in utts {
        let spk_id = spk.get(&id).ok_or_else(|| missing(&spk_path, &id))?.clone();
        let audio = match &wavs {
            Some(w) => {
                let path = PathBuf::from(w.get(&id).ok_or_else(|| missing(&wav_path, &id))?);
                let segment = match &segments {
                    Some(s) => match s.get(&id) {
                        Some(fields) => Some(parse_segment(fields).ok_or_else(|| CorpusError::MalformedLine {
                            file: seg_path.clone(),
                            lineno: 0,
                        })?),
                        None => None,
                    },
                    None => None,
                };
                Some(AudioRef { path, segment })
            }
            None => None,
        };
        let mut src_text = BTreeMap::new();
        src_text.insert(Treatment::Tc, tc);
        src_text.insert(
            Treatment::Lc,
            lc.get(&id).ok_or_else(|| missing(&dir.join("text.lc"), &id))?.clone(),
        );
        src_text.insert(
            Treatment::LcRm,
            lcrm.get(&id).ok_or_else(|| missing(&dir.join("text.lc.rm"), &id))?.clone(),
        );
        let mut tgt_text = BTreeMap::new();
        if let (Some(tables), Some(lang)) = (&tgt, &tgt_lang) {
            for (t, table) in tables {
                let file = dir.join(format!("text.{t}.{lang}"));
                tgt_text.insert(*t, table.get(&id).ok_or_else(|| missing(&file, &id))?.clone());
            }
        }
        records.push(UtteranceRecord {
            utt_id: id,
            spk_id,
            audio,
            src_text,
            tgt_text,
        });
    }
    CorpusTable::new(src_lang, tgt_lang.as_deref(), records)
}

/// Loads a directory holding raw (untokenized) text: `text` for the source
/// side and `text.<tgt_lang>` for the target side. Every line is tokenized
/// and rendered in all three treatments.
pub fn load_raw_data_dir(dir: &Path, src_lang: &str, tgt_lang: Option<&str>, text_only: bool) -> Result<CorpusTable, CorpusError> {
    let src_path = dir.join("text");
    let utts = read_table(&src_path, 1)?;
    let tgt_path = tgt_lang.map(|l| dir.join(format!("text.{l}")));
    let tgt = match &tgt_path {
        Some(p) => Some(read_map(p, 1)?),
        None => None,
    };
    let wav_path = dir.join("wav.scp");
    let wavs = if text_only { None } else { Some(read_map(&wav_path, 2)?) };
    let spk_path = dir.join("utt2spk");
    let spk = read_map(&spk_path, 2)?;
    let seg_path = dir.join("segments");
    let segments = if seg_path.exists() && !text_only {
        Some(read_map(&seg_path, 4)?)
    } else {
        None
    };
    let missing = |file: &Path, id: &str| CorpusError::MissingEntry {
        file: file.to_path_buf(),
        utt_id: id.to_string(),
    };
    let mut records = Vec::with_capacity(utts.len());
    for (id, raw) in utts {
        let spk_id = spk.get(&id).ok_or_else(|| missing(&spk_path, &id))?.clone();
        let audio = match &wavs {
            Some(w) => {
                let path = PathBuf::from(w.get(&id).ok_or_else(|| missing(&wav_path, &id))?);
                let segment = match segments.as_ref().and_then(|s| s.get(&id)) {
                    Some(fields) => Some(parse_segment(fields).ok_or_else(|| CorpusError::MalformedLine {
                        file: seg_path.clone(),
                        lineno: 0,
                    })?),
                    None => None,
                };
                Some(AudioRef { path, segment })
            }
            None => None,
        };
        let tgt_text = match (&tgt, &tgt_path) {
            (Some(t), Some(p)) => normalize(t.get(&id).ok_or_else(|| missing(p, &id))?),
            _ => BTreeMap::new(),
        };
        records.push(UtteranceRecord {
            utt_id: id,
            spk_id,
            audio,
            src_text: normalize(&raw),
            tgt_text,
        });
    }
    CorpusTable::new(src_lang, tgt_lang, records)
}

fn parse_segment(fields: &str) -> Option<(f64, f64)> {
    let parts: Vec<&str> = fields.split_whitespace().collect();
    let start: f64 = parts.get(1)?.parse().ok()?;
    let end: f64 = parts.get(2)?.parse().ok()?;
    (0.0 <= start && start < end).then_some((start, end))
}
