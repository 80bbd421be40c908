use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::decoder::{decode_dataset, DecodeInput, Decoder, HYP_FILE};
use crate::evalkit::{score_hypotheses, BleuReport};
use crate::manifest::Dataset;
use crate::network::load_checkpoint;
use crate::subword::{SubwordModel, MARKER};

use super::stages::{dataset_refs, decoder_for};
use super::{ExperimentConfig, Layout, PipelineError, Recipe, Result, SCORE_FILE};

fn load_exp(dir: &Path, want: Recipe) -> Result<(ExperimentConfig, Layout, SubwordModel)> {
    let layout = Layout::new(dir);
    let cfg = ExperimentConfig::load(&layout.config())?;
    if cfg.recipe != want {
        return Err(PipelineError::InvalidConfig(format!(
            "{} holds a {:?} experiment, expected {want:?}",
            dir.display(),
            cfg.recipe
        )));
    }
    let bpe = SubwordModel::load(&layout.bpe_model())?;
    Ok((cfg, layout, bpe))
}

fn symbols(bpe: &SubwordModel) -> BTreeSet<char> {
    (0..bpe.vocab_size())
        .filter_map(|i| bpe.token(i).ok())
        .filter(|t| !t.starts_with('<'))
        .flat_map(|t| t.trim_start_matches(MARKER).chars().collect::<Vec<_>>())
        .collect()
}

/// ASR output must be in the text treatment the MT model reads, and every
/// character the ASR model can emit must be known to the MT subword model.
pub fn check_compatible(asr: &ExperimentConfig, asr_bpe: &SubwordModel, mt: &ExperimentConfig, mt_bpe: &SubwordModel) -> Result<()> {
    if asr.treatment.src != mt.treatment.src {
        return Err(PipelineError::TreatmentMismatch(format!(
            "ASR emits {} text but MT reads {}",
            asr.treatment.src, mt.treatment.src
        )));
    }
    let missing: String = symbols(asr_bpe).difference(&symbols(mt_bpe)).collect();
    if !missing.is_empty() {
        return Err(PipelineError::TreatmentMismatch(format!(
            "MT subword model cannot encode ASR symbols {missing:?}"
        )));
    }
    Ok(())
}

/// Translates `(utt_id, source text)` pairs with the averaged MT model of
/// `mt_exp`.
pub fn translate_transcripts(mt_exp: &Path, transcripts: &[(String, String)]) -> Result<Vec<(String, String)>> {
    let (cfg, layout, bpe) = load_exp(mt_exp, Recipe::Mt)?;
    let model = load_checkpoint(&layout.averaged_model())?;
    let decoder = Decoder::new(&[&model], None, &cfg.decode)?;
    transcripts
        .iter()
        .map(|(id, text)| {
            let ids = bpe.encode(text);
            let best = decoder.search(DecodeInput::Text(&ids))?;
            Ok((id.clone(), bpe.decode(&best[0].tokens)?))
        })
        .collect()
}

/// Decodes evaluation set `set` with the ASR experiment, translates the
/// 1-best transcripts with the MT experiment and scores against the MT
/// experiment's references. Writes `asr/`, `hyp.trn` and `score.json`
/// under `out_dir`.
pub fn cascade_eval(asr_exp: &Path, mt_exp: &Path, set: &str, lowercase: bool, out_dir: &Path) -> Result<BleuReport> {
    let (asr_cfg, asr_layout, asr_bpe) = load_exp(asr_exp, Recipe::Asr)?;
    let (mt_cfg, mt_layout, mt_bpe) = load_exp(mt_exp, Recipe::Mt)?;
    check_compatible(&asr_cfg, &asr_bpe, &mt_cfg, &mt_bpe)?;

    let asr_ds = Dataset::load(&asr_layout.dataset(set))?;
    let mt_ds = Dataset::load(&mt_layout.dataset(set))?;
    let (model, lm) = decoder_for(&asr_cfg, &asr_layout)?;
    let decoder = Decoder::new(&[&model], lm.as_ref(), &asr_cfg.decode)?;
    let transcripts = decode_dataset(&decoder, &asr_ds, &asr_bpe, &out_dir.join("asr"))?;

    let hyps = translate_transcripts(mt_exp, &transcripts)?;
    let mut trn = String::new();
    for (id, text) in &hyps {
        trn.push_str(&format!("{id} {text}\n"));
    }
    fs::write(out_dir.join(HYP_FILE), trn)?;
    let report = score_hypotheses(&hyps, &dataset_refs(&mt_ds), lowercase, false)?;
    report.save(&out_dir.join(SCORE_FILE))?;
    Ok(report.bleu)
}
