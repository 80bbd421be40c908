use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::audio::{read_wav, segment};
use crate::augment::speed_perturb;
use crate::corpus::{load_data_dir_with, load_raw_data_dir, CorpusTable, UtteranceRecord};
use crate::decoder::{decode_dataset, entry_input, DecodeConfig, Decoder, EntryInput, HYP_FILE};
use crate::evalkit::{corpus_bleu, read_trn, score_hypotheses};
use crate::fmat::{self, ArchiveWriter, FeatsIndex};
use crate::frontend::{compute_cmvn, Cmvn, FeatureExtractor, FeatureMatrix};
use crate::manifest::{dump_dataset, Dataset, OutputSpec, Side};
use crate::network::{load_checkpoint, save_checkpoint, Model, Task};
use crate::subword::{bpe_learn, SubwordModel};
use crate::trainer::{self, average_checkpoints, checkpoint_path, transfer_from_checkpoint, TrainError};

use super::{ExperimentConfig, Layout, PipelineError, Recipe, Result, SCORE_FILE, TRAIN_SET, TRAIN_SP_SET};

pub(crate) fn run_stage(cfg: &ExperimentConfig, layout: &Layout, n: usize) -> Result<()> {
    match n {
        0 => prepare(cfg, layout),
        1 => features(cfg, layout),
        2 => dump(cfg, layout),
        3 => train_lm(cfg, layout),
        4 => train_model(cfg, layout),
        5 => average_decode_score(cfg, layout),
        6 => cascade(cfg, layout),
        _ => unreachable!("stage range is validated"),
    }
}

/// `p` if absolute, else `p` under `base`.
pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// A checkpoint file, or the averaged model of an experiment directory.
pub(crate) fn resolve_checkpoint(p: &Path) -> PathBuf {
    if p.is_dir() {
        Layout::new(p).averaged_model()
    } else {
        p.to_path_buf()
    }
}

fn eval_sets(cfg: &ExperimentConfig) -> impl Iterator<Item = (&str, &Path)> {
    cfg.data.eval.iter().map(|(k, v)| (k.as_str(), v.as_path()))
}

fn prepare(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let text_only = !cfg.recipe.has_speech();
    let sets = std::iter::once((TRAIN_SET, cfg.data.train.as_path())).chain(eval_sets(cfg));
    for (name, input) in sets {
        let input = input.canonicalize()?;
        let table = if input.join("text.tc").exists() {
            load_data_dir_with(&input, &cfg.data.src_lang, text_only)?
        } else {
            load_raw_data_dir(&input, &cfg.data.src_lang, cfg.data.tgt_lang.as_deref(), text_only)?
        };
        if let Some(lang) = &cfg.data.tgt_lang {
            if table.tgt_lang.as_deref() != Some(lang.as_str()) {
                return Err(PipelineError::InvalidConfig(format!("{} has no {lang} target text", input.display())));
            }
        }
        let records = table
            .records()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if text_only {
                    r.audio = None;
                } else if let Some(a) = &mut r.audio {
                    a.path = resolve(&input, &a.path);
                }
                r
            })
            .collect();
        let table = CorpusTable::new(&table.src_lang, table.tgt_lang.as_deref(), records)?;
        let out = layout.data(name);
        if out.exists() {
            fs::remove_dir_all(&out)?;
        }
        table.write_data_dir(&out)?;
        log::info!("prepared {name}: {} utterances", table.len());
    }
    Ok(())
}

fn load_set(cfg: &ExperimentConfig, layout: &Layout, set: &str) -> Result<CorpusTable> {
    Ok(load_data_dir_with(&layout.data(set), &cfg.data.src_lang, !cfg.recipe.has_speech())?)
}

/// Utterance-id prefix of a speed-perturbed copy; empty for factor 1.
pub fn speed_tag(factor: f64) -> String {
    if factor == 1.0 {
        String::new()
    } else {
        format!("sp{factor}-")
    }
}

/// Every record once per speed factor, ids prefixed by [`speed_tag`].
fn perturbed(table: &CorpusTable, factors: &[f64]) -> Result<(CorpusTable, Vec<f64>)> {
    let mut rows: Vec<(UtteranceRecord, f64)> = Vec::new();
    for &f in factors {
        for r in table.records() {
            let mut r = r.clone();
            r.utt_id = format!("{}{}", speed_tag(f), r.utt_id);
            rows.push((r, f));
        }
    }
    rows.sort_by(|a, b| a.0.utt_id.cmp(&b.0.utt_id));
    let factors_of = rows.iter().map(|(_, f)| *f).collect();
    let table = CorpusTable::new(&table.src_lang, table.tgt_lang.as_deref(), rows.into_iter().map(|(r, _)| r).collect())?;
    Ok((table, factors_of))
}

fn extract_all(cfg: &ExperimentConfig, table: &CorpusTable, factors: &[f64]) -> Result<Vec<FeatureMatrix<f64>>> {
    let extractor = FeatureExtractor::<f64>::new(&cfg.frontend)?;
    let sr = cfg.frontend.sample_rate_hz;
    table
        .records()
        .par_iter()
        .zip(factors.par_iter())
        .map(|(r, &f)| {
            let audio = r
                .audio
                .as_ref()
                .ok_or_else(|| PipelineError::InvalidConfig(format!("{} has no audio", r.utt_id)))?;
            let wave = read_wav(&audio.path, sr)?;
            let wave = match audio.segment {
                Some((s, e)) => segment(&wave, sr, s, e).to_vec(),
                None => wave,
            };
            let wave = if f == 1.0 { wave } else { speed_perturb(&wave, f) };
            if cfg.frontend.num_frames(wave.len()) == 0 {
                return Err(PipelineError::InvalidConfig(format!("{} is shorter than one frame", r.utt_id)));
            }
            Ok(extractor.extract(&r.utt_id, &wave, None)?)
        })
        .collect()
}

fn write_features(layout: &Layout, set: &str, feats: &[FeatureMatrix<f64>], cmvn: &Cmvn) -> Result<()> {
    fs::create_dir_all(layout.dump(set))?;
    let mut ark = ArchiveWriter::create(&layout.feats_archive(set))?;
    for m in feats {
        let mut v = m.values.clone();
        cmvn.apply(&mut v)?;
        let data: Vec<f32> = v.data.iter().map(|&x| x as f32).collect();
        ark.append(&m.utt_id, v.rows, v.cols, &data)?;
    }
    ark.finish()?.write(&layout.feats_index(set))?;
    Ok(())
}

fn features(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let train = load_set(cfg, layout, TRAIN_SET)?;
    let (sp, factors) = perturbed(&train, &cfg.augment.speed_factors)?;
    let feats = extract_all(cfg, &sp, &factors)?;
    let cmvn = compute_cmvn(&feats)?;
    fs::create_dir_all(layout.dump(TRAIN_SP_SET))?;
    fmat::write_file(&layout.cmvn(), 2, cmvn.dim(), &cmvn.to_rows())?;
    write_features(layout, TRAIN_SP_SET, &feats, &cmvn)?;
    log::info!("features: {} training utterances", feats.len());
    for (name, _) in eval_sets(cfg) {
        let table = load_set(cfg, layout, name)?;
        let ones = vec![1.0; table.len()];
        let feats = extract_all(cfg, &table, &ones)?;
        write_features(layout, name, &feats, &cmvn)?;
    }
    Ok(())
}

fn output_specs<'a>(cfg: &ExperimentConfig, bpe: &'a SubwordModel) -> Vec<OutputSpec<'a>> {
    let src = OutputSpec {
        name: "source",
        side: Side::Source,
        treatment: cfg.treatment.src,
        model: bpe,
    };
    match cfg.recipe {
        Recipe::Asr => vec![src],
        Recipe::Mt | Recipe::St => vec![
            OutputSpec {
                name: "target",
                side: Side::Target,
                treatment: cfg.treatment.tgt,
                model: bpe,
            },
            src,
        ],
    }
}

fn dump(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let train = load_set(cfg, layout, TRAIN_SET)?;
    let mut lines: Vec<&str> = train.records().iter().map(|r| r.src_text[&cfg.treatment.src].as_str()).collect();
    if cfg.recipe != Recipe::Asr {
        lines.extend(train.records().iter().map(|r| r.tgt_text[&cfg.treatment.tgt].as_str()));
    }
    let bpe = bpe_learn(&lines, cfg.subword.vocab_size)?;
    fs::create_dir_all(layout.bpe_model().parent().expect("lang dir"))?;
    bpe.save(&layout.bpe_model())?;
    log::info!("bpe: {} units, {} merges", bpe.vocab_size(), bpe.merges().len());

    let outputs = output_specs(cfg, &bpe);
    let train_set = Layout::train_set(cfg.recipe);
    let mut sets: Vec<(&str, CorpusTable)> = vec![(
        train_set,
        if cfg.recipe.has_speech() {
            perturbed(&train, &cfg.augment.speed_factors)?.0
        } else {
            train
        },
    )];
    for (name, _) in eval_sets(cfg) {
        sets.push((name, load_set(cfg, layout, name)?));
    }
    for (name, table) in sets {
        let index = if cfg.recipe.has_speech() {
            Some(FeatsIndex::read(&layout.feats_index(name))?)
        } else {
            None
        };
        fs::create_dir_all(layout.dump(name))?;
        dump_dataset(&table, index.as_ref(), &outputs)?.save(&layout.dataset(name))?;
    }
    Ok(())
}

fn train_lm(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let lm = cfg.lm.as_ref().expect("stage 3 runs only with an lm section");
    let bpe = SubwordModel::load(&layout.bpe_model())?;
    let table = load_set(cfg, layout, TRAIN_SET)?;
    let spec = OutputSpec {
        name: "source",
        side: Side::Source,
        treatment: cfg.treatment.src,
        model: &bpe,
    };
    let ds = dump_dataset(&table, None, &[spec])?;
    fs::create_dir_all(layout.dump(TRAIN_SET))?;
    ds.save(&layout.lm_dataset())?;
    let mut mc = lm.model.clone();
    mc.task = Task::Lm;
    mc.vocab_size = bpe.vocab_size();
    let mut model = Model::new(mc)?;
    trainer::train(&mut model, &ds, &lm.train, &layout.lm_dir(), &mut |_, _| Ok(()))?;
    Ok(())
}

fn model_config(cfg: &ExperimentConfig, bpe: &SubwordModel) -> crate::network::ModelConfig {
    let mut mc = cfg.model.clone();
    mc.task = cfg.recipe.task();
    mc.vocab_size = bpe.vocab_size();
    mc.src_vocab_size = bpe.vocab_size();
    mc.feat_dim = cfg.frontend.feat_dim();
    mc
}

/// Reference texts (`output[0]`) keyed by utterance id.
pub fn dataset_refs(ds: &Dataset) -> BTreeMap<String, Vec<String>> {
    ds.entries()
        .map(|e| (e.utt_id.clone(), e.output.first().map(|o| vec![o.text.clone()]).unwrap_or_default()))
        .collect()
}

fn train_model(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let bpe = SubwordModel::load(&layout.bpe_model())?;
    let ds = Dataset::load(&layout.dataset(Layout::train_set(cfg.recipe)))?;
    let mut model = Model::new(model_config(cfg, &bpe))?;
    let dir = layout.train_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;

    let mut reports = Vec::new();
    for src in [&cfg.transfer.asr, &cfg.transfer.mt].into_iter().flatten() {
        let r = transfer_from_checkpoint(&mut model, &resolve_checkpoint(&src.ckpt), &src.scope)?;
        log::info!("transfer {}: {} tensors copied", r.scope, r.copied.len());
        reports.push(r);
    }
    if !reports.is_empty() {
        let mut s = serde_json::to_string_pretty(&reports)?;
        s.push('\n');
        fs::write(layout.transfer_report(), s)?;
    }

    let mut tc = cfg.train.clone();
    if cfg.augment.spec_augment.is_some() {
        tc.spec_augment.clone_from(&cfg.augment.spec_augment);
    }

    let validation = match &cfg.validation {
        Some(v) => {
            let vds = Dataset::load(&layout.dataset(&v.set))?;
            let inputs = vds
                .entries()
                .map(|e| Ok((e.utt_id.clone(), entry_input(e, model.config.task)?)))
                .collect::<Result<Vec<(String, EntryInput)>>>()?;
            let dc = DecodeConfig {
                beam_size: v.beam_size,
                nbest: 1,
                lm_weight: 0.0,
                ..cfg.decode.clone()
            };
            Some((inputs, dataset_refs(&vds), dc, BufWriter::new(File::create(layout.validation_log())?)))
        }
        None => None,
    };
    let mut validation = validation;
    let mut failure = None;
    let mut on_epoch = |epoch: usize, m: &Model| -> std::result::Result<(), TrainError> {
        let Some((inputs, refs, dc, log)) = validation.as_mut() else {
            return Ok(());
        };
        let (hyp_len, bleu) = match validate(m, inputs, refs, dc, &bpe, cfg.lowercase_bleu) {
            Ok(v) => v,
            Err(e) => {
                let msg = e.to_string();
                failure = Some(e);
                return Err(std::io::Error::other(format!("validation failed: {msg}")).into());
            }
        };
        log::info!("epoch {epoch}: validation BLEU {bleu:.2}");
        writeln!(log, "{}", serde_json::json!({"epoch": epoch, "bleu": bleu, "hyp_len": hyp_len}))?;
        log.flush()?;
        Ok(())
    };
    let trained = trainer::train(&mut model, &ds, &tc, &dir, &mut on_epoch);
    if let Some(e) = failure {
        return Err(e);
    }
    trained?;
    Ok(())
}

fn validate(
    model: &Model,
    inputs: &[(String, EntryInput)],
    refs: &BTreeMap<String, Vec<String>>,
    dc: &DecodeConfig,
    bpe: &SubwordModel,
    lowercase: bool,
) -> Result<(usize, f64)> {
    let decoder = Decoder::new(&[model], None, dc)?;
    let mut hyps = Vec::with_capacity(inputs.len());
    let mut rs = Vec::with_capacity(inputs.len());
    for (id, input) in inputs {
        let best = decoder.search(input.as_input())?;
        hyps.push(bpe.decode(&best[0].tokens)?);
        rs.push(refs[id].clone());
    }
    let r = corpus_bleu(&hyps, &rs, lowercase)?;
    Ok((r.hyp_len, r.bleu))
}

fn load_lm(cfg: &ExperimentConfig, layout: &Layout) -> Result<Option<Model>> {
    match &cfg.lm {
        Some(lm) if cfg.decode.lm_weight != 0.0 => Ok(Some(load_checkpoint(&checkpoint_path(&layout.lm_dir(), lm.train.epochs))?)),
        _ => Ok(None),
    }
}

pub(crate) fn decoder_for(cfg: &ExperimentConfig, layout: &Layout) -> Result<(Model, Option<Model>)> {
    Ok((load_checkpoint(&layout.averaged_model())?, load_lm(cfg, layout)?))
}

pub(crate) fn average(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let last = cfg.train.epochs;
    let first = last.saturating_sub(cfg.average_last) + 1;
    let paths: Vec<PathBuf> = (first..=last).map(|e| checkpoint_path(&layout.train_dir(), e)).collect();
    let avg = average_checkpoints(&paths)?;
    save_checkpoint(&avg, &layout.averaged_model())?;
    log::info!("averaged epochs {first}..={last}");
    Ok(())
}

pub(crate) fn decode(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let bpe = SubwordModel::load(&layout.bpe_model())?;
    let (model, lm) = decoder_for(cfg, layout)?;
    let decoder = Decoder::new(&[&model], lm.as_ref(), &cfg.decode)?;
    for (name, _) in eval_sets(cfg) {
        let ds = Dataset::load(&layout.dataset(name))?;
        decode_dataset(&decoder, &ds, &bpe, &layout.decode_dir(name))?;
    }
    Ok(())
}

pub(crate) fn score(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    for (name, _) in eval_sets(cfg) {
        let ds = Dataset::load(&layout.dataset(name))?;
        let out = layout.decode_dir(name);
        let hyps = read_trn(&out.join(HYP_FILE))?;
        let report = score_hypotheses(&hyps, &dataset_refs(&ds), cfg.lowercase_bleu, cfg.recipe == Recipe::Asr)?;
        report.save(&out.join(SCORE_FILE))?;
        log::info!("{name}: BLEU {:.2}", report.bleu.bleu);
    }
    Ok(())
}

fn average_decode_score(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    average(cfg, layout)?;
    decode(cfg, layout)?;
    score(cfg, layout)
}

fn cascade(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let c = cfg.cascade.as_ref().expect("stage 6 runs only with a cascade section");
    for (name, _) in eval_sets(cfg) {
        let r = super::cascade_eval(&c.asr_exp, &c.mt_exp, name, cfg.lowercase_bleu, &layout.cascade_dir(name))?;
        log::info!("{name}: cascade BLEU {:.2}", r.bleu);
    }
    Ok(())
}
