//! Toy parallel corpus with tone-chord "speech".
//!
//! Each source word is rendered as 0.2 s of a fixed three-tone chord. The
//! target language maps every word one-to-one and moves adjectives behind
//! the noun they precede.

use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::audio::write_wav;
use crate::rng::{derive, seeded};

use super::{PipelineError, Result};

pub const SAMPLE_RATE: u32 = 16000;
pub const WORD_SEC: f64 = 0.2;
pub const WORD_SAMPLES: usize = 3200;
pub const SRC_LANG: &str = "en";
pub const TGT_LANG: &str = "fr";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordClass {
    Det,
    Adj,
    Noun,
    Verb,
}

/// `(source, target, class)`; the position in this table selects the chord.
pub const LEXICON: [(&str, &str, WordClass); 30] = [
    ("the", "le", WordClass::Det),
    ("a", "un", WordClass::Det),
    ("this", "ce", WordClass::Det),
    ("my", "mon", WordClass::Det),
    ("your", "ton", WordClass::Det),
    ("red", "rouge", WordClass::Adj),
    ("big", "grand", WordClass::Adj),
    ("old", "vieux", WordClass::Adj),
    ("small", "petit", WordClass::Adj),
    ("green", "vert", WordClass::Adj),
    ("happy", "heureux", WordClass::Adj),
    ("cold", "froid", WordClass::Adj),
    ("dark", "sombre", WordClass::Adj),
    ("quiet", "calme", WordClass::Adj),
    ("fast", "rapide", WordClass::Adj),
    ("cat", "chat", WordClass::Noun),
    ("dog", "chien", WordClass::Noun),
    ("bird", "oiseau", WordClass::Noun),
    ("house", "maison", WordClass::Noun),
    ("tree", "arbre", WordClass::Noun),
    ("car", "voiture", WordClass::Noun),
    ("river", "riviere", WordClass::Noun),
    ("child", "enfant", WordClass::Noun),
    ("book", "livre", WordClass::Noun),
    ("stone", "pierre", WordClass::Noun),
    ("sleeps", "dort", WordClass::Verb),
    ("runs", "court", WordClass::Verb),
    ("falls", "tombe", WordClass::Verb),
    ("waits", "attend", WordClass::Verb),
    ("shines", "brille", WordClass::Verb),
];

const GRID: usize = 16;
const GRID_LO_HZ: f64 = 200.0;
const GRID_HI_HZ: f64 = 4000.0;
const AMPLITUDE: f64 = 0.3;
const NOISE: f64 = 0.003;
const FADE_SAMPLES: usize = 80;
const SPEAKERS: usize = 4;
const ENDINGS: [&str; 3] = [".", "!", "?"];

fn word_index(word: &str) -> Option<usize> {
    LEXICON.iter().position(|(w, _, _)| *w == word)
}

/// Tone grid, evenly spaced on the mel scale.
fn grid() -> [f64; GRID] {
    let lo = crate::frontend::hz_to_mel(GRID_LO_HZ);
    let hi = crate::frontend::hz_to_mel(GRID_HI_HZ);
    std::array::from_fn(|k| crate::frontend::mel_to_hz(lo + (hi - lo) * k as f64 / (GRID - 1) as f64))
}

/// The `i`-th 3-combination of `0..GRID` in lexicographic order.
fn combination(mut i: usize) -> [usize; 3] {
    let mut out = [0; 3];
    let mut start = 0;
    for (slot, o) in out.iter_mut().enumerate() {
        let left = 2 - slot;
        let mut c = start;
        loop {
            let n = binomial(GRID - c - 1, left);
            if i < n {
                break;
            }
            i -= n;
            c += 1;
        }
        *o = c;
        start = c + 1;
    }
    out
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, j| acc * (n - j) / (j + 1))
}

/// Chord frequencies (Hz) of lexicon entry `w`.
pub fn chord(w: usize) -> [f64; 3] {
    let g = grid();
    combination(w * 17).map(|k| g[k])
}

/// Target words for source words: one-to-one lookup, then every adjective
/// directly followed by a noun swaps places with it.
pub fn translate_words(src: &[&str]) -> Option<Vec<&'static str>> {
    let idx: Vec<usize> = src.iter().map(|w| word_index(w)).collect::<Option<_>>()?;
    let mut out: Vec<usize> = Vec::with_capacity(idx.len());
    let mut i = 0;
    while i < idx.len() {
        if i + 1 < idx.len() && LEXICON[idx[i]].2 == WordClass::Adj && LEXICON[idx[i + 1]].2 == WordClass::Noun {
            out.push(idx[i + 1]);
            out.push(idx[i]);
            i += 2;
        } else {
            out.push(idx[i]);
            i += 1;
        }
    }
    Some(out.into_iter().map(|k| LEXICON[k].1).collect())
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence(words: &[&str], ending: &str) -> String {
    let mut s = words
        .iter()
        .enumerate()
        .map(|(i, w)| if i == 0 { capitalize(w) } else { w.to_string() })
        .collect::<Vec<_>>()
        .join(" ");
    s.push_str(ending);
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtt {
    pub utt_id: String,
    pub spk_id: String,
    pub words: Vec<&'static str>,
    /// Raw source sentence, cased and punctuated.
    pub src: String,
    /// Raw target sentence.
    pub tgt: String,
}

fn pick<R: rand::Rng>(rng: &mut R, class: WordClass) -> &'static str {
    let pool: Vec<&'static str> = LEXICON.iter().filter(|e| e.2 == class).map(|e| e.0).collect();
    pool[rng.gen_range(0..pool.len())]
}

/// Sentences `det [adj] noun verb`, optionally followed by a second clause.
pub fn synthetic_utterances(seed: u64, n_utts: usize) -> Vec<SyntheticUtt> {
    let mut rng = seeded(derive(seed, "synthetic"));
    (0..n_utts)
        .map(|i| {
            let mut words = Vec::new();
            let clauses = if rng.gen_bool(0.2) { 2 } else { 1 };
            for _ in 0..clauses {
                words.push(pick(&mut rng, WordClass::Det));
                if rng.gen_bool(0.6) {
                    words.push(pick(&mut rng, WordClass::Adj));
                }
                words.push(pick(&mut rng, WordClass::Noun));
                words.push(pick(&mut rng, WordClass::Verb));
            }
            let ending = ENDINGS[rng.gen_range(0..ENDINGS.len())];
            let spk = i % SPEAKERS + 1;
            let tgt_words = translate_words(&words).expect("generated words are in the lexicon");
            SyntheticUtt {
                utt_id: format!("spk{spk}-{i:05}"),
                spk_id: format!("spk{spk}"),
                src: sentence(&words, ending),
                tgt: sentence(&tgt_words, ending),
                words,
            }
        })
        .collect()
}

/// Waveform of a word sequence, `WORD_SAMPLES` per word.
pub fn render(words: &[&str], noise_seed: u64) -> Vec<f64> {
    let mut rng = seeded(noise_seed);
    let sr = f64::from(SAMPLE_RATE);
    let mut wave = Vec::with_capacity(words.len() * WORD_SAMPLES);
    for w in words {
        let freqs = chord(word_index(w).expect("word in lexicon"));
        for n in 0..WORD_SAMPLES {
            let t = n as f64 / sr;
            let edge = n.min(WORD_SAMPLES - 1 - n);
            let env = if edge < FADE_SAMPLES {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / FADE_SAMPLES as f64).cos()
            } else {
                1.0
            };
            let tone: f64 = freqs.iter().map(|f| (2.0 * std::f64::consts::PI * f * t).sin()).sum::<f64>() / 3.0;
            wave.push(AMPLITUDE * env * tone + NOISE * rng.gen_range(-1.0..1.0));
        }
    }
    wave
}

/// Writes `n_utts` utterances under `out`: `wav/<utt>.wav` plus a raw data
/// directory (`wav.scp`, `utt2spk`, `text`, `text.<tgt_lang>`) whose audio
/// paths are relative to `out`.
pub fn make_synthetic_corpus(seed: u64, n_utts: usize, out: &Path) -> Result<Vec<SyntheticUtt>> {
    if n_utts == 0 {
        return Err(PipelineError::InvalidConfig("synthetic corpus needs at least one utterance".into()));
    }
    let utts = synthetic_utterances(seed, n_utts);
    fs::create_dir_all(out.join("wav"))?;
    let (mut scp, mut spk, mut src, mut tgt) = (String::new(), String::new(), String::new(), String::new());
    for u in &utts {
        let rel = format!("wav/{}.wav", u.utt_id);
        write_wav(&out.join(&rel), &render(&u.words, derive(seed, &u.utt_id)), SAMPLE_RATE)?;
        scp.push_str(&format!("{} {rel}\n", u.utt_id));
        spk.push_str(&format!("{} {}\n", u.utt_id, u.spk_id));
        src.push_str(&format!("{} {}\n", u.utt_id, u.src));
        tgt.push_str(&format!("{} {}\n", u.utt_id, u.tgt));
    }
    fs::write(out.join("wav.scp"), scp)?;
    fs::write(out.join("utt2spk"), spk)?;
    fs::write(out.join("text"), src)?;
    fs::write(out.join(format!("text.{TGT_LANG}")), tgt)?;
    Ok(utts)
}
