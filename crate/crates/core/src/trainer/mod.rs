//! Optimization loop, learning-rate schedule, checkpoint series, model
//! averaging and transfer initialization.

mod average;
mod optim;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{spec_augment, SpecAugmentConfig};
use crate::frontend::{FeatureMatrix, Matrix};
use crate::manifest::{make_batches, Dataset, ManifestError};
use crate::network::{save_checkpoint, Model, Mode, NetworkError, Task};
use crate::objectives::{task_loss, BatchData, LossWeights, ObjectiveError};
use crate::rng::{derive, derive_index, seeded};

pub use average::{average_checkpoints, average_models, transfer_from_checkpoint, transfer_init, TransferReport};
pub use optim::{adam_step, clip_grad_norm, global_norm, noam_lr, AdamConfig, AdamState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, iteration {iteration} (utterances {utt_ids:?})")]
    NonFiniteLoss {
        epoch: usize,
        iteration: u64,
        utt_ids: Vec<String>,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("incompatible checkpoints: {0}")]
    IncompatibleCheckpoints(String),
    #[error("no parameter under scope {0:?} could be transferred")]
    EmptyTransfer(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub max_frames_in: usize,
    pub max_tokens_out: usize,
    pub adam: AdamConfig,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Older epoch checkpoints are deleted; 0 keeps all.
    pub keep_last_k: usize,
    pub weights: LossWeights,
    pub spec_augment: Option<SpecAugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            max_frames_in: 4000,
            max_tokens_out: 400,
            adam: AdamConfig::default(),
            warmup_steps: 200,
            lr_scale: 1.0,
            grad_clip: 5.0,
            seed: 1,
            keep_last_k: 5,
            weights: LossWeights::default(),
            spec_augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be ≥ 1");
        }
        if self.max_frames_in == 0 || self.max_tokens_out == 0 {
            return bad("batch budgets must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Example {
    feats: Option<Matrix<f64>>,
    target: Vec<usize>,
    source: Option<Vec<usize>>,
}

/// Dataset held in memory: features (if any) and token ids per utterance.
#[derive(Debug, Clone)]
pub struct TrainData {
    examples: BTreeMap<String, Example>,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset, with_features: bool) -> Result<TrainData> {
        let mut examples = BTreeMap::new();
        for e in ds.entries() {
            let feats = if with_features {
                let m = e.load_features()?;
                Some(Matrix {
                    rows: m.rows,
                    cols: m.cols,
                    data: m.data.iter().map(|&x| f64::from(x)).collect(),
                })
            } else {
                None
            };
            let target = e.output.first().map(|o| o.ids()).unwrap_or_default();
            let source = e.output.get(1).map(|o| o.ids());
            examples.insert(e.utt_id.clone(), Example { feats, target, source });
        }
        Ok(TrainData { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Pads the listed utterances into one batch. With `augment`, every
    /// utterance is masked with a seed derived from its id and `salt`.
    pub fn batch(&self, utt_ids: &[String], augment: Option<&SpecAugmentConfig>, salt: u64) -> BatchData {
        let ex: Vec<&Example> = utt_ids.iter().map(|u| &self.examples[u]).collect();
        let feats = if ex.iter().all(|e| e.feats.is_some()) && !ex.is_empty() {
            let t = ex.iter().map(|e| e.feats.as_ref().map_or(0, |m| m.rows)).max().unwrap_or(0);
            let d = ex[0].feats.as_ref().map_or(0, |m| m.cols);
            let mut data = vec![0.0; ex.len() * t * d];
            for (b, (e, id)) in ex.iter().zip(utt_ids).enumerate() {
                let m = e.feats.as_ref().expect("checked above");
                let masked;
                let m = match augment {
                    Some(cfg) => {
                        let cfg = SpecAugmentConfig {
                            seed: derive_index(derive(cfg.seed, id), "spec_augment", salt),
                            ..cfg.clone()
                        };
                        masked = spec_augment(&FeatureMatrix::new(id.clone(), 0.01, m.clone()), &cfg).values;
                        &masked
                    }
                    None => m,
                };
                data[b * t * d..b * t * d + m.data.len()].copy_from_slice(&m.data);
            }
            Some((data, [ex.len(), t, d]))
        } else {
            None
        };
        BatchData {
            utt_ids: utt_ids.to_vec(),
            feat_lens: ex.iter().map(|e| e.feats.as_ref().map_or(0, |m| m.rows)).collect(),
            feats,
            targets: ex.iter().map(|e| e.target.clone()).collect(),
            sources: ex.iter().map(|e| e.source.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub iterations: usize,
    pub mean_loss: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub epochs: Vec<EpochSummary>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch{epoch}.ckpt"))
}

pub const TRAIN_LOG: &str = "train.log";

/// Trains `model` in place with the objective of its task. Writes
/// `epoch<N>.ckpt` after each epoch and one JSON line per iteration to
/// `train.log` in `out_dir`. `on_epoch` runs after each checkpoint.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let with_features = model.config.has_speech_encoder();
    let data = TrainData::from_dataset(dataset, with_features)?;
    let frame_budget = if with_features || model.config.task == Task::Mt {
        cfg.max_frames_in
    } else {
        usize::MAX
    };
    let batches = make_batches(dataset, frame_budget, cfg.max_tokens_out)?;
    fs::create_dir_all(out_dir)?;
    let mut log = BufWriter::new(File::create(out_dir.join(TRAIN_LOG))?);
    let augment = if with_features { cfg.spec_augment.as_ref() } else { None };

    let mut state = AdamState::default();
    let mut report = TrainReport {
        steps: 0,
        epochs: Vec::new(),
    };
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut seeded(derive_index(cfg.seed, "epoch", epoch as u64)));
        let mut loss_sum = 0.0;

        let (tx, rx) = sync_channel::<BatchData>(2);
        std::thread::scope(|s| -> Result<()> {
            let data = &data;
            let batches = &batches;
            let order = &order;
            s.spawn(move || {
                for &i in order {
                    if tx.send(data.batch(&batches[i].utt_ids, augment, epoch as u64)).is_err() {
                        break;
                    }
                }
            });
            for batch in rx.iter() {
                report.steps += 1;
                let it = report.steps;
                let start = Instant::now();
                let bound = model.bind(true);
                let mode = Mode::train(derive_index(cfg.seed, "iteration", it));
                let loss = task_loss(&bound, &batch, &cfg.weights, &mode)?;
                let total = loss.breakdown.total;
                if !total.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        iteration: it,
                        utt_ids: batch.utt_ids,
                    });
                }
                loss.total.backward().map_err(NetworkError::Tensor)?;
                let mut grads = bound.grads();
                let parts = loss.breakdown.parts;
                drop(bound);
                let lr = noam_lr(it, model.config.d_model, cfg.warmup_steps, cfg.lr_scale);
                let norm = adam_step(&mut model.params, &mut grads, &mut state, lr, &cfg.adam, cfg.grad_clip);
                loss_sum += total;

                let mut line = serde_json::Map::new();
                line.insert("iteration".into(), it.into());
                line.insert("epoch".into(), epoch.into());
                line.insert("lr".into(), lr.into());
                line.insert("loss".into(), total.into());
                for (k, v) in &parts {
                    line.insert(k.clone(), (*v).into());
                }
                line.insert("grad_norm".into(), norm.into());
                line.insert("wall_ms".into(), (start.elapsed().as_millis() as u64).into());
                writeln!(log, "{}", serde_json::Value::Object(line))?;
            }
            Ok(())
        })?;
        log.flush()?;

        let path = checkpoint_path(out_dir, epoch);
        save_checkpoint(model, &path)?;
        if cfg.keep_last_k > 0 && epoch > cfg.keep_last_k {
            let old = checkpoint_path(out_dir, epoch - cfg.keep_last_k);
            if old.exists() {
                fs::remove_file(old)?;
            }
        }
        let summary = EpochSummary {
            epoch,
            iterations: batches.len(),
            mean_loss: loss_sum / batches.len().max(1) as f64,
            checkpoint: path,
        };
        log::info!("epoch {epoch}: mean loss {:.4}", summary.mean_loss);
        report.epochs.push(summary);
        on_epoch(epoch, model)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
