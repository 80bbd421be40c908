//! Recipe orchestration: stages 0–6 over one experiment directory.
//!
//! ```text
//! <exp_dir>/conf/config.json
//! <exp_dir>/data/<set>/              prepared data directories
//! <exp_dir>/data/lang/bpe.model
//! <exp_dir>/dump/<set>/              feats.ark, feats.scp, data.json
//! <exp_dir>/dump/train_sp/cmvn.fmat
//! <exp_dir>/exp/lm/                  LM checkpoints (asr)
//! <exp_dir>/exp/train/               checkpoints, train.log, model.avg.ckpt
//! <exp_dir>/exp/decode_<set>/        hyp.trn, nbest.json, score.json
//! <exp_dir>/exp/cascade_<set>/       asr/, hyp.trn, score.json
//! <exp_dir>/.stage<N>.done
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::AudioError;
use crate::augment::SpecAugmentConfig;
use crate::corpus::{CorpusError, Treatment};
use crate::decoder::{DecodeConfig, DecodeError};
use crate::evalkit::EvalError;
use crate::fmat::FmatError;
use crate::frontend::{FrontendConfig, FrontendError};
use crate::manifest::ManifestError;
use crate::network::{ModelConfig, NetworkError, Task};
use crate::subword::SubwordError;
use crate::trainer::{TrainConfig, TrainError};

mod cascade;
mod stages;
mod synthetic;

pub use cascade::{cascade_eval, check_compatible, translate_transcripts};
pub use stages::{dataset_refs, speed_tag};
pub use synthetic::{
    chord, make_synthetic_corpus, render, synthetic_utterances, translate_words, SyntheticUtt, WordClass, LEXICON, SAMPLE_RATE,
    SRC_LANG, TGT_LANG, WORD_SAMPLES, WORD_SEC,
};

pub const LAST_STAGE: usize = 6;
pub const SCORE_FILE: &str = "score.json";
pub const TRAIN_SET: &str = "train";
pub const TRAIN_SP_SET: &str = "train_sp";
const RESERVED_SETS: [&str; 3] = [TRAIN_SET, TRAIN_SP_SET, "lang"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} failed: {cause}")]
    StageFailed {
        stage: usize,
        #[source]
        cause: Box<PipelineError>,
    },
    #[error("invalid stage range: {0}")]
    InvalidStageRange(String),
    #[error("treatment mismatch: {0}")]
    TreatmentMismatch(String),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Features(#[from] FmatError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    Asr,
    Mt,
    St,
}

impl Recipe {
    pub fn task(self) -> Task {
        match self {
            Recipe::Asr => Task::Asr,
            Recipe::Mt => Task::Mt,
            Recipe::St => Task::St,
        }
    }

    pub fn has_speech(self) -> bool {
        self != Recipe::Mt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Training data directory (prepared or raw).
    pub train: PathBuf,
    /// Evaluation sets decoded in stage 5, by name.
    #[serde(default)]
    pub eval: BTreeMap<String, PathBuf>,
    #[serde(default = "default_src_lang")]
    pub src_lang: String,
    #[serde(default)]
    pub tgt_lang: Option<String>,
}

fn default_src_lang() -> String {
    "en".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreatmentConfig {
    pub src: Treatment,
    pub tgt: Treatment,
}

impl Default for TreatmentConfig {
    fn default() -> Self {
        TreatmentConfig {
            src: Treatment::LcRm,
            tgt: Treatment::Tc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub speed_factors: Vec<f64>,
    pub spec_augment: Option<SpecAugmentConfig>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            speed_factors: vec![0.9, 1.0, 1.1],
            spec_augment: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubwordConfig {
    pub vocab_size: usize,
}

impl Default for SubwordConfig {
    fn default() -> Self {
        SubwordConfig { vocab_size: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LmConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSource {
    /// A checkpoint file, or an experiment directory (its averaged model).
    pub ckpt: PathBuf,
    pub scope: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TransferConfig {
    pub asr: Option<TransferSource>,
    pub mt: Option<TransferSource>,
}

/// Per-epoch decoding of one evaluation set during stage 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub set: String,
    #[serde(default = "one")]
    pub beam_size: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub asr_exp: PathBuf,
    pub mt_exp: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRange {
    pub start: usize,
    pub stop: usize,
}

impl Default for StageRange {
    fn default() -> Self {
        StageRange {
            start: 0,
            stop: LAST_STAGE,
        }
    }
}

impl StageRange {
    pub fn contains(&self, n: usize) -> bool {
        (self.start..=self.stop).contains(&n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub exp_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub treatment: TreatmentConfig,
    #[serde(default)]
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub subword: SubwordConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Stage 3 (asr only).
    #[serde(default)]
    pub lm: Option<LmConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    /// Number of final epoch checkpoints averaged in stage 5.
    #[serde(default = "default_average_last")]
    pub average_last: usize,
    #[serde(default)]
    pub lowercase_bleu: bool,
    #[serde(default)]
    pub validation: Option<ValidationConfig>,
    #[serde(default)]
    pub transfer: TransferConfig,
    /// Stage 6.
    #[serde(default)]
    pub cascade: Option<CascadeConfig>,
    #[serde(default)]
    pub stages: StageRange,
}

fn default_average_last() -> usize {
    5
}

impl ExperimentConfig {
    pub fn new(recipe: Recipe, exp_dir: &Path, train: &Path) -> ExperimentConfig {
        ExperimentConfig {
            recipe,
            exp_dir: exp_dir.to_path_buf(),
            data: DataConfig {
                train: train.to_path_buf(),
                eval: BTreeMap::new(),
                src_lang: default_src_lang(),
                tgt_lang: None,
            },
            treatment: TreatmentConfig::default(),
            frontend: FrontendConfig::default(),
            augment: AugmentConfig::default(),
            subword: SubwordConfig::default(),
            model: ModelConfig::default(),
            lm: None,
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            average_last: default_average_last(),
            lowercase_bleu: false,
            validation: None,
            transfer: TransferConfig::default(),
            cascade: None,
            stages: StageRange::default(),
        }
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Whether stage `n` has any work for this configuration.
    pub fn stage_applies(&self, n: usize) -> bool {
        match n {
            1 => self.recipe.has_speech(),
            3 => self.recipe == Recipe::Asr && self.lm.is_some(),
            6 => self.cascade.is_some(),
            n => n <= LAST_STAGE,
        }
    }

    fn check_stage_bound(&self, n: usize) -> Result<()> {
        if n > LAST_STAGE {
            return Err(PipelineError::InvalidStageRange(format!("stage {n} is beyond {LAST_STAGE}")));
        }
        if n == 3 && self.recipe != Recipe::Asr {
            return Err(PipelineError::InvalidStageRange("stage 3 (LM training) exists only in the asr recipe".into()));
        }
        if n == 6 && self.cascade.is_none() {
            return Err(PipelineError::InvalidStageRange("stage 6 needs a cascade section".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let StageRange { start, stop } = self.stages;
        if start > stop {
            return Err(PipelineError::InvalidStageRange(format!("start {start} > stop {stop}")));
        }
        self.check_stage_bound(start)?;
        // a range may run through stage 6 without a cascade section
        if stop != LAST_STAGE || self.cascade.is_some() {
            self.check_stage_bound(stop)?;
        }
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.recipe != Recipe::Asr && self.data.tgt_lang.is_none() {
            return bad("mt and st recipes need data.tgt_lang".into());
        }
        for name in self.data.eval.keys() {
            if RESERVED_SETS.contains(&name.as_str()) || name.is_empty() || name.contains(['/', '\\', ' ']) {
                return bad(format!("{name:?} cannot name an evaluation set"));
            }
        }
        if let Some(v) = &self.validation {
            if !self.data.eval.contains_key(&v.set) {
                return bad(format!("validation set {:?} is not an evaluation set", v.set));
            }
            if v.beam_size == 0 {
                return bad("validation beam_size must be ≥ 1".into());
            }
        }
        if self.augment.speed_factors.is_empty() || self.augment.speed_factors.iter().any(|f| !(*f > 0.0)) {
            return bad("speed factors must be positive and nonempty".into());
        }
        if self.average_last == 0 {
            return bad("average_last must be ≥ 1".into());
        }
        if self.train.keep_last_k != 0 && self.train.keep_last_k < self.average_last.min(self.train.epochs) {
            return bad("train.keep_last_k is smaller than the averaging window".into());
        }
        if self.decode.lm_weight != 0.0 && (self.recipe != Recipe::Asr || self.lm.is_none()) {
            return bad("decode.lm_weight needs an asr recipe with an lm section".into());
        }
        self.frontend.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        Ok(())
    }
}

/// Paths inside one experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Layout {
        Layout { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("conf").join("config.json")
    }

    pub fn data(&self, set: &str) -> PathBuf {
        self.root.join("data").join(set)
    }

    pub fn bpe_model(&self) -> PathBuf {
        self.root.join("data").join("lang").join("bpe.model")
    }

    pub fn dump(&self, set: &str) -> PathBuf {
        self.root.join("dump").join(set)
    }

    pub fn dataset(&self, set: &str) -> PathBuf {
        self.dump(set).join("data.json")
    }

    pub fn feats_index(&self, set: &str) -> PathBuf {
        self.dump(set).join("feats.scp")
    }

    pub fn feats_archive(&self, set: &str) -> PathBuf {
        self.dump(set).join("feats.ark")
    }

    pub fn cmvn(&self) -> PathBuf {
        self.dump(TRAIN_SP_SET).join("cmvn.fmat")
    }

    pub fn lm_dataset(&self) -> PathBuf {
        self.dump(TRAIN_SET).join("lm.json")
    }

    pub fn lm_dir(&self) -> PathBuf {
        self.root.join("exp").join("lm")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("exp").join("train")
    }

    pub fn averaged_model(&self) -> PathBuf {
        self.train_dir().join("model.avg.ckpt")
    }

    pub fn validation_log(&self) -> PathBuf {
        self.train_dir().join("valid.log")
    }

    pub fn transfer_report(&self) -> PathBuf {
        self.train_dir().join("transfer.json")
    }

    pub fn decode_dir(&self, set: &str) -> PathBuf {
        self.root.join("exp").join(format!("decode_{set}"))
    }

    pub fn cascade_dir(&self, set: &str) -> PathBuf {
        self.root.join("exp").join(format!("cascade_{set}"))
    }

    pub fn marker(&self, n: usize) -> PathBuf {
        self.root.join(format!(".stage{n}.done"))
    }

    /// Set holding the training features and dataset.
    pub fn train_set(recipe: Recipe) -> &'static str {
        if recipe.has_speech() {
            TRAIN_SP_SET
        } else {
            TRAIN_SET
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunReport {
    pub exp_dir: PathBuf,
    pub ran: Vec<usize>,
    pub skipped: Vec<usize>,
}

fn sha_hex(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(h: &mut Sha256, path: &Path) -> Result<()> {
    h.update(path.to_string_lossy().as_bytes());
    if path.is_file() {
        h.update(fs::read(path)?);
    }
    Ok(())
}

/// Regular files directly inside `dir` plus every wav listed in `wav.scp`.
fn hash_data_dir(h: &mut Sha256, dir: &Path) -> Result<()> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    for p in names.iter().filter(|p| p.is_file()) {
        hash_file(h, p)?;
    }
    if let Ok(scp) = fs::read_to_string(dir.join("wav.scp")) {
        for line in scp.lines() {
            if let Some((_, p)) = line.split_once(' ') {
                hash_file(h, &stages::resolve(dir, Path::new(p.trim())))?;
            }
        }
    }
    Ok(())
}

/// Input hash of stage `n`: the previous stage's hash, the config sections
/// the stage reads and the external files it consumes.
fn stage_hash(cfg: &ExperimentConfig, n: usize, prev: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(format!("stage{n}").as_bytes());
    let section = match n {
        0 => serde_json::to_string(&(&cfg.recipe, &cfg.data))?,
        1 => serde_json::to_string(&(&cfg.frontend, &cfg.augment.speed_factors))?,
        2 => serde_json::to_string(&(&cfg.treatment, &cfg.subword))?,
        3 => serde_json::to_string(&cfg.lm)?,
        4 => serde_json::to_string(&(&cfg.model, &cfg.train, &cfg.augment.spec_augment, &cfg.transfer, &cfg.validation))?,
        5 => serde_json::to_string(&(&cfg.decode, cfg.average_last, cfg.lowercase_bleu))?,
        _ => serde_json::to_string(&cfg.cascade)?,
    };
    h.update(section.as_bytes());
    match n {
        0 => {
            hash_data_dir(&mut h, &cfg.data.train)?;
            for dir in cfg.data.eval.values() {
                hash_data_dir(&mut h, dir)?;
            }
        }
        4 => {
            for src in [&cfg.transfer.asr, &cfg.transfer.mt].into_iter().flatten() {
                hash_file(&mut h, &stages::resolve_checkpoint(&src.ckpt))?;
            }
        }
        6 => {
            if let Some(c) = &cfg.cascade {
                for exp in [&c.asr_exp, &c.mt_exp] {
                    hash_file(&mut h, &Layout::new(exp).averaged_model())?;
                    hash_file(&mut h, &Layout::new(exp).bpe_model())?;
                }
            }
        }
        _ => {}
    }
    Ok(sha_hex(h))
}

/// Runs the configured stage range. Stages whose done-marker matches their
/// input hash are skipped.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.exp_dir)?;
    let mut cfg = cfg.clone();
    cfg.exp_dir = cfg.exp_dir.canonicalize()?;
    let layout = Layout::new(&cfg.exp_dir);
    fs::create_dir_all(layout.config().parent().expect("conf dir"))?;
    let stored = ExperimentConfig {
        stages: StageRange::default(),
        ..cfg.clone()
    };
    fs::write(layout.config(), stored.to_json())?;

    let mut report = RunReport {
        exp_dir: cfg.exp_dir.clone(),
        ..RunReport::default()
    };
    let mut prev = String::new();
    let failed = |n: usize| move |e: PipelineError| PipelineError::StageFailed {
        stage: n,
        cause: Box::new(e),
    };
    for n in 0..=cfg.stages.stop {
        let hash = stage_hash(&cfg, n, &prev).map_err(failed(n))?;
        prev.clone_from(&hash);
        if !cfg.stages.contains(n) || !cfg.stage_applies(n) {
            continue;
        }
        let marker = layout.marker(n);
        if fs::read_to_string(&marker).is_ok_and(|m| m.trim() == hash) {
            log::info!("stage {n}: up to date");
            report.skipped.push(n);
            continue;
        }
        log::info!("stage {n}: running");
        let _ = fs::remove_file(&marker);
        stages::run_stage(&cfg, &layout, n).map_err(failed(n))?;
        fs::write(&marker, format!("{hash}\n"))?;
        report.ran.push(n);
    }
    Ok(report)
}

/// Runs exactly one stage, honouring done-markers.
pub fn run_single(cfg: &ExperimentConfig, stage: usize) -> Result<RunReport> {
    run(&ExperimentConfig {
        stages: StageRange { start: stage, stop: stage },
        ..cfg.clone()
    })
}

fn with_layout(cfg: &ExperimentConfig, f: fn(&ExperimentConfig, &Layout) -> Result<()>) -> Result<()> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.exp_dir = cfg.exp_dir.canonicalize()?;
    let layout = Layout::new(&cfg.exp_dir);
    f(&cfg, &layout)
}

/// Averages the final epoch checkpoints (first part of stage 5).
pub fn average_stage(cfg: &ExperimentConfig) -> Result<()> {
    with_layout(cfg, stages::average)
}

/// Decodes every evaluation set with the averaged model, without scoring.
pub fn decode_stage(cfg: &ExperimentConfig) -> Result<()> {
    with_layout(cfg, stages::decode)
}

/// Scores existing `hyp.trn` files of every evaluation set.
pub fn score_stage(cfg: &ExperimentConfig) -> Result<()> {
    with_layout(cfg, stages::score)
}

/// Files a completed run of stages `0..=stop` leaves under `exp_dir`,
/// relative to it.
pub fn expected_artifacts(cfg: &ExperimentConfig, stop: usize) -> Vec<PathBuf> {
    let l = Layout::new(Path::new(""));
    let mut out = vec![l.config()];
    let sets: Vec<&str> = std::iter::once(TRAIN_SET).chain(cfg.data.eval.keys().map(String::as_str)).collect();
    let applies = |n: usize| n <= stop && cfg.stage_applies(n);
    if applies(0) {
        out.push(l.marker(0));
        for s in &sets {
            let d = l.data(s);
            out.push(d.join("utt2spk"));
            for t in Treatment::ALL {
                out.push(d.join(format!("text.{t}")));
                if let Some(lang) = &cfg.data.tgt_lang {
                    out.push(d.join(format!("text.{t}.{lang}")));
                }
            }
            if cfg.recipe.has_speech() {
                out.push(d.join("wav.scp"));
            }
        }
    }
    let feat_sets: Vec<&str> = std::iter::once(TRAIN_SP_SET).chain(cfg.data.eval.keys().map(String::as_str)).collect();
    if applies(1) {
        out.push(l.marker(1));
        out.push(l.cmvn());
        for s in &feat_sets {
            out.push(l.feats_archive(s));
            out.push(l.feats_index(s));
        }
    }
    if applies(2) {
        out.push(l.marker(2));
        out.push(l.bpe_model());
        out.push(l.dataset(Layout::train_set(cfg.recipe)));
        for s in cfg.data.eval.keys() {
            out.push(l.dataset(s));
        }
    }
    if applies(3) {
        out.push(l.marker(3));
        out.push(l.lm_dataset());
        let lm = cfg.lm.as_ref().expect("stage 3 applies only with an lm section");
        out.push(l.lm_dir().join(crate::trainer::TRAIN_LOG));
        out.extend(kept_epochs(&lm.train).map(|e| crate::trainer::checkpoint_path(&l.lm_dir(), e)));
    }
    if applies(4) {
        out.push(l.marker(4));
        out.push(l.train_dir().join(crate::trainer::TRAIN_LOG));
        out.extend(kept_epochs(&cfg.train).map(|e| crate::trainer::checkpoint_path(&l.train_dir(), e)));
        if cfg.validation.is_some() {
            out.push(l.validation_log());
        }
        if cfg.transfer.asr.is_some() || cfg.transfer.mt.is_some() {
            out.push(l.transfer_report());
        }
    }
    if applies(5) {
        out.push(l.marker(5));
        out.push(l.averaged_model());
        for s in cfg.data.eval.keys() {
            let d = l.decode_dir(s);
            out.extend([d.join(crate::decoder::HYP_FILE), d.join(crate::decoder::NBEST_FILE), d.join(SCORE_FILE)]);
        }
    }
    if applies(6) {
        out.push(l.marker(6));
        for s in cfg.data.eval.keys() {
            let d = l.cascade_dir(s);
            out.extend([
                d.join("asr").join(crate::decoder::HYP_FILE),
                d.join("asr").join(crate::decoder::NBEST_FILE),
                d.join(crate::decoder::HYP_FILE),
                d.join(SCORE_FILE),
            ]);
        }
    }
    out.sort();
    out
}

fn kept_epochs(t: &TrainConfig) -> impl Iterator<Item = usize> {
    let first = if t.keep_last_k == 0 {
        1
    } else {
        t.epochs.saturating_sub(t.keep_last_k) + 1
    };
    first..=t.epochs
}
