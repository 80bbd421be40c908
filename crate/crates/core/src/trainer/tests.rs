use std::collections::BTreeMap;

use rand::Rng as _;

use super::*;
use crate::fmat::ArchiveWriter;
use crate::manifest::{DatasetEntry, InputInfo, OutputInfo};
use crate::network::{load_checkpoint, ModelConfig, Param};

fn output(name: &str, ids: &[usize], v: usize) -> OutputInfo {
    let tokenid = ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    OutputInfo {
        name: name.into(),
        text: tokenid.clone(),
        token: tokenid.clone(),
        tokenid,
        shape: [ids.len(), v],
    }
}

/// Copy task: the target equals the source.
fn copy_dataset(n: usize, v: usize, seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let mut utts = BTreeMap::new();
    for i in 0..n {
        let len = rng.gen_range(2..=5);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(2..v - 1)).collect();
        let id = format!("utt{i:03}");
        utts.insert(
            id.clone(),
            DatasetEntry {
                utt_id: id,
                input: vec![],
                output: vec![output("target1", &ids, v), output("target2", &ids, v)],
                spk_id: "spk".into(),
                lang: "xx".into(),
            },
        );
    }
    Dataset { utts }
}

fn mt_config(v: usize, d: usize) -> ModelConfig {
    ModelConfig {
        task: Task::Mt,
        d_model: d,
        heads: 2,
        d_ff: 2 * d,
        enc_blocks: 1,
        dec_blocks: 1,
        vgg_channels: vec![2, 2],
        feat_dim: 6,
        vocab_size: v,
        src_vocab_size: v,
        mt_enc_blocks: 1,
        dropout: 0.0,
        lm_units: 8,
        lm_layers: 1,
        seed: 3,
    }
}

fn quiet() -> impl FnMut(usize, &Model) -> Result<()> {
    |_, _| Ok(())
}

#[test]
fn noam_schedule() {
    let lr: f64 = noam_lr(1, 64, 4000, 1.0);
    assert!((lr - 0.125 * 4000f64.powf(-1.5)).abs() < 1e-18);
    assert!((lr - 4.9411e-7).abs() < 1e-10);
    let w = 50;
    let at = noam_lr(w, 16, w, 2.0f64);
    assert!((at - 2.0 / 4.0 * (w as f64).powf(-0.5)).abs() < 1e-15);
    for s in 1..w {
        assert!(noam_lr(s, 16, w, 1.0f64) < noam_lr(s + 1, 16, w, 1.0f64));
    }
    for s in w..300 {
        assert!(noam_lr(s, 16, w, 1.0f64) > noam_lr(s + 1, 16, w, 1.0f64));
    }
    let single: f32 = noam_lr(10, 16, 50, 1.0f32);
    assert!((single as f64 - noam_lr(10, 16, 50, 1.0f64)).abs() < 1e-8);
}

fn params(vals: &[(&str, Vec<f64>)]) -> BTreeMap<String, Param> {
    vals.iter()
        .map(|(n, d)| (n.to_string(), Param { shape: vec![d.len()], data: d.clone() }))
        .collect()
}

#[test]
fn adam_first_step_and_clipping() {
    let cfg = AdamConfig::default();
    let mut p = params(&[("a", vec![1.0, -2.0]), ("b", vec![0.5])]);
    let before = p.clone();
    let mut zero: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![0.0, 0.0]), ("b".to_string(), vec![0.0])].into();
    let mut state = AdamState::default();
    adam_step(&mut p, &mut zero, &mut state, 0.1, &cfg, 5.0);
    assert_eq!(p, before);

    let g = [0.3, -0.02, 4.0];
    let mut grads: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![g[0], g[1]]), ("b".to_string(), vec![g[2]])].into();
    let mut state = AdamState::default();
    let lr = 0.01;
    let norm = adam_step(&mut p, &mut grads, &mut state, lr, &cfg, 5.0);
    assert!((norm - (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()).abs() < 1e-15);
    // one step from zero state: m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε)
    let expect = |x0: f64, gi: f64| x0 - lr * gi / (gi.abs() + cfg.eps);
    assert!((p["a"].data[0] - expect(1.0, g[0])).abs() < 1e-15);
    assert!((p["a"].data[1] - expect(-2.0, g[1])).abs() < 1e-15);
    assert!((p["b"].data[0] - expect(0.5, g[2])).abs() < 1e-15);

    let mut big: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![30.0, 40.0])].into();
    assert_eq!(clip_grad_norm(&mut big, 5.0), 50.0);
    assert!((global_norm(&big) - 5.0).abs() < 1e-12);
    assert!((big["a"][0] - 3.0).abs() < 1e-12);
    let mut small: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![0.3, 0.4])].into();
    clip_grad_norm(&mut small, 5.0);
    assert_eq!(small["a"], vec![0.3, 0.4]);
}

#[test]
fn averaging_identities() {
    let m = Model::new(mt_config(8, 8)).unwrap();
    assert_eq!(average_models(&[m.clone()]).unwrap(), m);
    assert_eq!(average_models(&[m.clone(), m.clone(), m.clone()]).unwrap(), m);
    let mut neg = m.clone();
    neg.params.values_mut().flat_map(|p| p.data.iter_mut()).for_each(|x| *x = -*x);
    let zero = average_models(&[m.clone(), neg.clone()]).unwrap();
    assert!(zero.params.values().flat_map(|p| &p.data).all(|&x| x == 0.0));

    let mut other = m.clone();
    other.config.seed = 99;
    let other = Model::new(other.config).unwrap();
    let ab = average_models(&[m.clone(), other.clone(), neg.clone()]).unwrap();
    let ba = average_models(&[neg.clone(), m.clone(), other.clone()]).unwrap();
    assert_eq!(ab, ba);
    let (x, y) = (&m.params["decoder.embed.weight"].data, &other.params["decoder.embed.weight"].data);
    let mid = &average_models(&[m.clone(), other.clone()]).unwrap().params["decoder.embed.weight"].data;
    for i in 0..x.len() {
        assert!((mid[i] - (x[i] + y[i]) / 2.0).abs() < 1e-15);
    }

    let lm = Model::new(ModelConfig {
        task: Task::Lm,
        ..mt_config(8, 8)
    })
    .unwrap();
    assert!(matches!(average_models(&[m, lm]), Err(TrainError::IncompatibleCheckpoints(_))));
    assert!(average_models(&[]).is_err());
}

#[test]
fn averaging_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::new(mt_config(8, 8)).unwrap();
    let paths: Vec<PathBuf> = (0..3).map(|i| dir.path().join(format!("e{i}.ckpt"))).collect();
    for p in &paths {
        save_checkpoint(&m, p).unwrap();
    }
    assert_eq!(average_checkpoints(&paths).unwrap(), m);
}

fn st_family() -> (Model, Model, Model) {
    let base = ModelConfig {
        vgg_channels: vec![2, 3],
        ..mt_config(9, 8)
    };
    let asr = Model::new(ModelConfig {
        task: Task::Asr,
        seed: 21,
        ..base.clone()
    })
    .unwrap();
    let mt = Model::new(ModelConfig {
        task: Task::Mt,
        seed: 22,
        ..base.clone()
    })
    .unwrap();
    let st = Model::new(ModelConfig {
        task: Task::St,
        seed: 23,
        ..base
    })
    .unwrap();
    (asr, mt, st)
}

#[test]
fn transfer_copies_only_the_scope() {
    let (asr, mt, st0) = st_family();
    let mut st = st0.clone();
    let enc = transfer_init(&mut st, &asr, "encoder.").unwrap();
    let dec = transfer_init(&mut st, &mt, "decoder.").unwrap();
    assert!(enc.absent.is_empty() && enc.shape_mismatch.is_empty());
    assert!(dec.absent.is_empty() && dec.shape_mismatch.is_empty());
    for (name, p) in &st.params {
        if name.starts_with("encoder.") {
            assert_eq!(p.data, asr.params[name].data, "{name}");
            assert!(enc.copied.contains(name));
        } else if name.starts_with("decoder.") {
            assert_eq!(p.data, mt.params[name].data, "{name}");
        } else {
            assert_eq!(p, &st0.params[name], "{name} changed");
        }
    }
    assert!(matches!(transfer_init(&mut st, &asr, "nonexistent."), Err(TrainError::EmptyTransfer(_))));
}

#[test]
fn transfer_reports_shape_mismatch() {
    let (asr, _, st0) = st_family();
    let mut st = st0.clone();
    let mut donor = asr.clone();
    donor.params.get_mut("encoder.input.bias").unwrap().shape = vec![1];
    donor.params.remove("encoder.final_norm.gamma");
    let r = transfer_init(&mut st, &donor, "encoder.").unwrap();
    assert_eq!(r.shape_mismatch, vec!["encoder.input.bias".to_string()]);
    assert_eq!(r.absent, vec!["encoder.final_norm.gamma".to_string()]);
    assert_eq!(st.params["encoder.input.bias"], st0.params["encoder.input.bias"]);
}

fn mt_train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        max_frames_in: 10_000,
        max_tokens_out: 10_000,
        warmup_steps: 10,
        lr_scale: 0.1,
        keep_last_k: 0,
        weights: LossWeights {
            label_smoothing: 0.0,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn one_batch_one_step_and_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = copy_dataset(6, 10, 1);
    let mut m = Model::new(mt_config(10, 8)).unwrap();
    let init = m.clone();
    let r = train(&mut m, &ds, &mt_train_cfg(1), dir.path(), &mut quiet()).unwrap();
    assert_eq!(r.steps, 1);
    assert_ne!(m, init);
    let log = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 1);
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["iteration", "epoch", "lr", "att", "grad_norm", "wall_ms"] {
        assert!(line.get(key).is_some(), "{key}");
    }
    assert_eq!(load_checkpoint(&checkpoint_path(dir.path(), 1)).unwrap(), m);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let ds = copy_dataset(12, 10, 2);
    let mut cfg = mt_train_cfg(3);
    cfg.max_tokens_out = 12;
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::new(ModelConfig {
            dropout: 0.1,
            ..mt_config(10, 8)
        })
        .unwrap();
        train(&mut m, &ds, &cfg, dir.path(), &mut quiet()).unwrap();
        (1..=3).map(|e| fs::read(checkpoint_path(dir.path(), e)).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn keeps_last_k_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ds = copy_dataset(4, 10, 3);
    let mut cfg = mt_train_cfg(4);
    cfg.keep_last_k = 2;
    let mut m = Model::new(mt_config(10, 8)).unwrap();
    let mut seen = Vec::new();
    train(&mut m, &ds, &cfg, dir.path(), &mut |e, _| {
        seen.push(e);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4]);
    let present: Vec<bool> = (1..=4).map(|e| checkpoint_path(dir.path(), e).exists()).collect();
    assert_eq!(present, vec![false, false, true, true]);
}

#[test]
fn overfit_loss_decreases_over_first_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = copy_dataset(20, 12, 4);
    let mut cfg = mt_train_cfg(5);
    cfg.max_tokens_out = 30;
    let mut m = Model::new(mt_config(12, 16)).unwrap();
    let r = train(&mut m, &ds, &cfg, dir.path(), &mut quiet()).unwrap();
    let losses: Vec<f64> = r.epochs.iter().map(|e| e.mean_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn copy_task_is_learnable() {
    let dir = tempfile::tempdir().unwrap();
    let ds = copy_dataset(50, 16, 5);
    let mut cfg = mt_train_cfg(200);
    cfg.max_tokens_out = 60;
    cfg.warmup_steps = 40;
    let mut m = Model::new(mt_config(16, 32)).unwrap();
    let mut reached = None;
    let r = train(&mut m, &ds, &cfg, dir.path(), &mut |_, _| Ok(())).unwrap();
    for e in &r.epochs {
        if e.mean_loss < 0.1 && reached.is_none() {
            reached = Some(e.epoch);
        }
    }
    assert!(reached.is_some(), "final loss {}", r.epochs.last().unwrap().mean_loss);
}

#[test]
fn speech_batches_pad_and_augment_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = ArchiveWriter::create(&dir.path().join("feats.fmat")).unwrap();
    let mut rng = seeded(7);
    for (id, rows) in [("a", 30), ("b", 20)] {
        let data: Vec<f32> = (0..rows * 6).map(|_| rng.gen_range(0.5..1.5)).collect();
        w.append(id, rows, 6, &data).unwrap();
    }
    let idx = w.finish().unwrap();
    let mut utts = BTreeMap::new();
    for (id, e) in &idx.entries {
        utts.insert(
            id.clone(),
            DatasetEntry {
                utt_id: id.clone(),
                input: vec![InputInfo {
                    name: "input1".into(),
                    feat: e.reference(),
                    shape: [e.rows, e.cols],
                }],
                output: vec![output("target1", &[2, 3], 9)],
                spk_id: "s".into(),
                lang: "xx".into(),
            },
        );
    }
    let data = TrainData::from_dataset(&Dataset { utts }, true).unwrap();
    let ids = vec!["a".to_string(), "b".to_string()];
    let plain = data.batch(&ids, None, 0);
    let (f, shape) = plain.feats.as_ref().unwrap();
    assert_eq!(*shape, [2, 30, 6]);
    assert_eq!(plain.feat_lens, vec![30, 20]);
    assert!(f[30 * 6 + 20 * 6..].iter().all(|&x| x == 0.0));
    assert!(plain.sources.is_none());

    let sa = SpecAugmentConfig {
        freq_width: 2,
        freq_masks: 1,
        time_width: 5,
        time_masks: 1,
        mask_value: 0.0,
        seed: 1,
    };
    let a1 = data.batch(&ids, Some(&sa), 1);
    assert_eq!(a1, data.batch(&ids, Some(&sa), 1));
    assert_ne!(a1, data.batch(&ids, Some(&sa), 2));
    let zeros = |b: &BatchData| b.feats.as_ref().unwrap().0[..30 * 6].iter().filter(|&&x| x == 0.0).count();
    assert!(zeros(&a1) > 0);
    assert_eq!(zeros(&plain), 0);
}

#[test]
fn config_validation() {
    assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { warmup_steps: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}
