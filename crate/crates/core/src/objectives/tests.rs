use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::autodiff::finite_diff_check_at;
use crate::network::{Model, ModelConfig};
use crate::rng::seeded;

fn log_softmax_rows(logits: &[f64], v: usize) -> Vec<f64> {
    logits
        .chunks(v)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter().map(move |x| x - z)
        })
        .collect()
}

fn random_log_probs(t: usize, v: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let logits: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    log_softmax_rows(&logits, v)
}

/// Sums every one of the V^T frame labelings that collapses to `target`.
fn brute_force_nll(lp: &[f64], t: usize, v: usize, target: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % v;
            c /= v;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if k != 0 && Some(k) != prev {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(i, &k)| lp[i * v + k]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn all_targets(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for k in 1..v {
                let mut q: Vec<usize> = p.clone();
                q.push(k);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn ctc_matches_brute_force_enumeration() {
    let mut checked = 0;
    for t in 1..=6 {
        for v in 2..=4 {
            let lp = random_log_probs(t, v, (t * 10 + v) as u64);
            for target in all_targets(v, 3) {
                match ctc_loss(&lp, t, v, &target, 0) {
                    Ok((loss, _)) => {
                        let oracle = brute_force_nll(&lp, t, v, &target);
                        assert!((loss - oracle).abs() <= 1e-9, "T={t} V={v} {target:?}: {loss} vs {oracle}");
                        checked += 1;
                    }
                    Err(ObjectiveError::InfeasibleTarget { .. }) => {
                        assert!(min_frames(&target) > t);
                        assert!(brute_force_nll(&lp, t, v, &target).is_infinite());
                    }
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
    assert_eq!(checked, 234);
}

#[test]
fn ctc_worked_examples() {
    let half = 0.5f64.ln();
    let (loss, _) = ctc_loss(&[half, half], 1, 2, &[1], 0).unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-12);
    let (loss, _) = ctc_loss(&[half; 4], 2, 2, &[1], 0).unwrap();
    assert!((loss + 0.75f64.ln()).abs() < 1e-12);
    assert!(matches!(
        ctc_loss(&[half; 4], 2, 2, &[1, 1], 0),
        Err(ObjectiveError::InfeasibleTarget { frames: 2, labels: 2 })
    ));
    assert!(ctc_loss(&[half; 6], 3, 2, &[1, 1], 0).is_ok());
    assert!(matches!(ctc_loss(&[half; 4], 2, 2, &[0], 0), Err(ObjectiveError::InvalidTarget(0))));
}

#[test]
fn ctc_single_precision_agrees() {
    let lp = random_log_probs(5, 4, 3);
    let lp32: Vec<f32> = lp.iter().map(|&x| x as f32).collect();
    let (a, _) = ctc_loss(&lp, 5, 4, &[1, 2], 0).unwrap();
    let (b, _) = ctc_loss(&lp32, 5, 4, &[1, 2], 0).unwrap();
    assert!((a - b as f64).abs() < 1e-4);
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    for (seed, (t, v, target)) in [(6, 4, vec![1, 2, 2]), (5, 3, vec![2]), (4, 4, vec![3, 1, 2]), (6, 2, vec![1, 1])]
        .into_iter()
        .enumerate()
    {
        let lp = random_log_probs(t, v, 100 + seed as u64);
        let (_, grad) = ctc_loss(&lp, t, v, &target, 0).unwrap();
        let h = 1e-6;
        for i in 0..lp.len() {
            let mut up = lp.clone();
            up[i] += h;
            let mut dn = lp.clone();
            dn[i] -= h;
            let fd = (ctc_loss(&up, t, v, &target, 0).unwrap().0 - ctc_loss(&dn, t, v, &target, 0).unwrap().0) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            assert!(rel <= 1e-4, "entry {i}: fd {fd} vs {}", grad[i]);
        }
    }
}

#[test]
fn ctc_batch_backpropagates_through_log_softmax() {
    let (b, t, v) = (2, 5, 4);
    let mut rng = seeded(9);
    let x: Vec<f64> = (0..b * t * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lens = [5, 3];
    let targets = vec![vec![1, 2], vec![3]];
    let f = |x: &Tensor| ctc_batch(&x.log_softmax(2).unwrap(), &lens, &targets).map_err(|e| match e {
        ObjectiveError::Network(NetworkError::Tensor(t)) => t,
        other => panic!("{other}"),
    });
    let err = finite_diff_check_at(f, &x, &[b, t, v], 1e-6).unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn smoothed_ce_reduces_to_nll_and_ln_v() {
    let mut rng = seeded(4);
    let v = 5;
    let logits: Vec<f64> = (0..2 * 3 * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let targets = vec![1, 4, IGNORE_ID, 0, 2, IGNORE_ID];
    let t = Tensor::from_vec(logits.clone(), &[2, 3, v]).unwrap();
    let (loss, count) = label_smoothed_ce(&t, &targets, 0.0).unwrap();
    assert_eq!(count, 4);
    let lp = log_softmax_rows(&logits, v);
    let nll: f64 = targets
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != IGNORE_ID)
        .map(|(p, &y)| -lp[p * v + y])
        .sum::<f64>()
        / 4.0;
    assert!((loss.item() - nll).abs() < 1e-12);

    let eps = 0.1;
    let (smoothed, _) = label_smoothed_ce(&t, &targets, eps).unwrap();
    let manual: f64 = targets
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != IGNORE_ID)
        .map(|(p, &y)| {
            let row = &lp[p * v..(p + 1) * v];
            let others: f64 = (0..v).filter(|&k| k != y).map(|k| row[k]).sum();
            -((1.0 - eps) * row[y] + eps / (v - 1) as f64 * others)
        })
        .sum::<f64>()
        / 4.0;
    assert!((smoothed.item() - manual).abs() < 1e-12);

    let flat = Tensor::zeros(&[2, 3, v]);
    for eps in [0.0, 0.1, 0.5, 1.0] {
        let (l, _) = label_smoothed_ce(&flat, &targets, eps).unwrap();
        assert!((l.item() - (v as f64).ln()).abs() < 1e-12);
    }
    let (l, n) = label_smoothed_ce(&flat, &[IGNORE_ID; 6], 0.1).unwrap();
    assert_eq!((l.item(), n), (0.0, 0));
}

#[test]
fn teacher_forcing_layout() {
    let (ys_in, ys_out) = teacher_forcing(&[vec![3, 4], vec![5]], 9);
    assert_eq!(ys_in, vec![vec![9, 3, 4], vec![9, 5]]);
    assert_eq!(ys_out, vec![3, 4, 9, 5, 9, IGNORE_ID]);
}

fn config(task: Task) -> ModelConfig {
    ModelConfig {
        task,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        enc_blocks: 1,
        dec_blocks: 1,
        vgg_channels: vec![2, 2],
        feat_dim: 6,
        vocab_size: 7,
        src_vocab_size: 7,
        mt_enc_blocks: 1,
        dropout: 0.0,
        lm_units: 6,
        lm_layers: 1,
        seed: 5,
    }
}

fn batch(seed: u64) -> BatchData {
    let mut rng = seeded(seed);
    let lens = vec![16, 12, 14];
    let (b, t, d) = (3, 16, 6);
    let mut feats = vec![0.0; b * t * d];
    for (i, &l) in lens.iter().enumerate() {
        for x in &mut feats[i * t * d..(i * t + l) * d] {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    BatchData {
        utt_ids: vec!["a".into(), "b".into(), "c".into()],
        feats: Some((feats, [b, t, d])),
        feat_lens: lens,
        targets: vec![vec![2, 3], vec![4], vec![5, 2, 2]],
        sources: Some(vec![vec![1, 3], vec![4, 5, 2], vec![3]]),
    }
}

fn permuted(b: &BatchData, order: &[usize]) -> BatchData {
    let [_, t, d] = b.feats.as_ref().unwrap().1;
    let src = &b.feats.as_ref().unwrap().0;
    let mut feats = Vec::new();
    for &i in order {
        feats.extend_from_slice(&src[i * t * d..(i + 1) * t * d]);
    }
    BatchData {
        utt_ids: order.iter().map(|&i| b.utt_ids[i].clone()).collect(),
        feats: Some((feats, [order.len(), t, d])),
        feat_lens: order.iter().map(|&i| b.feat_lens[i]).collect(),
        targets: order.iter().map(|&i| b.targets[i].clone()).collect(),
        sources: b.sources.as_ref().map(|s| order.iter().map(|&i| s[i].clone()).collect()),
    }
}

fn weights(ctc: f64, asr: f64, mt: f64) -> LossWeights {
    LossWeights {
        ctc,
        asr,
        mt,
        label_smoothing: 0.1,
    }
}

#[test]
fn hybrid_asr_recombines_parts() {
    let m = Model::new(config(Task::Asr)).unwrap();
    let b = m.bind(false);
    let data = batch(1);
    let full = hybrid_asr_loss(&b, &data, &weights(0.3, 0.0, 0.0), &Mode::eval()).unwrap().breakdown;
    let manual = 0.3 * full.parts["ctc"] + 0.7 * full.parts["att"];
    assert!((full.total - manual).abs() <= 1e-12);
    assert!(full.total.is_finite() && full.total > 0.0);

    let att = hybrid_asr_loss(&b, &data, &weights(0.0, 0.0, 0.0), &Mode::eval()).unwrap().breakdown;
    assert!(!att.parts.contains_key("ctc"));
    assert_eq!(att.total, full.parts["att"]);
    let ctc = hybrid_asr_loss(&b, &data, &weights(1.0, 0.0, 0.0), &Mode::eval()).unwrap().breakdown;
    assert!(!ctc.parts.contains_key("att"));
    assert_eq!(ctc.total, full.parts["ctc"]);
}

#[test]
fn st_mtl_branches_and_gradients() {
    let m = Model::new(config(Task::St)).unwrap();
    let data = batch(2);

    let b = m.bind(true);
    let only = st_mtl_loss(&b, &data, &weights(0.3, 0.0, 0.0), &Mode::eval()).unwrap();
    assert_eq!(only.breakdown.parts.keys().collect::<Vec<_>>(), vec!["st_ce"]);
    assert_eq!(only.breakdown.total, only.breakdown.parts["st_ce"]);
    only.total.backward().unwrap();
    let grads = b.grads();
    for (name, g) in &grads {
        if name.starts_with("ctc.") || name.starts_with("mt_encoder.") {
            assert!(g.iter().all(|&x| x == 0.0), "{name} got gradient");
        }
    }
    assert!(grads["decoder.embed.weight"].iter().any(|&x| x != 0.0));

    let b = m.bind(true);
    let all = st_mtl_loss(&b, &data, &weights(0.3, 0.3, 0.3), &Mode::eval()).unwrap();
    let p = &all.breakdown.parts;
    let manual = p["st_ce"] + 0.3 * p["asr_ctc"] + 0.3 * p["mt_ce"];
    assert!((all.breakdown.total - manual).abs() <= 1e-12);
    all.total.backward().unwrap();
    let grads = b.grads();
    assert!(grads["ctc.weight"].iter().any(|&x| x != 0.0));
    assert!(grads["mt_encoder.embed.weight"].iter().any(|&x| x != 0.0));

    let mut no_src = data.clone();
    no_src.sources = None;
    let b = m.bind(false);
    assert!(matches!(
        st_mtl_loss(&b, &no_src, &weights(0.3, 0.3, 0.0), &Mode::eval()),
        Err(ObjectiveError::MissingTranscript)
    ));
    assert!(st_mtl_loss(&b, &no_src, &weights(0.3, 0.0, 0.0), &Mode::eval()).is_ok());
}

#[test]
fn losses_are_permutation_invariant() {
    let data = batch(3);
    let perm = permuted(&data, &[2, 0, 1]);
    let w = weights(0.3, 0.3, 0.3);
    for task in [Task::Asr, Task::St, Task::Mt, Task::Lm] {
        let m = Model::new(config(task)).unwrap();
        let b = m.bind(false);
        let x = task_loss(&b, &data, &w, &Mode::eval()).unwrap().breakdown;
        let y = task_loss(&b, &perm, &w, &Mode::eval()).unwrap().breakdown;
        assert!(x.total.is_finite() && x.total >= 0.0);
        for (k, v) in &x.parts {
            assert!((v - y.parts[k]).abs() <= 1e-12, "{task:?} {k}: {v} vs {}", y.parts[k]);
        }
    }
}

#[test]
fn task_mismatch_is_rejected() {
    let m = Model::new(config(Task::Mt)).unwrap();
    let b = m.bind(false);
    assert!(matches!(
        hybrid_asr_loss(&b, &batch(1), &LossWeights::default(), &Mode::eval()),
        Err(ObjectiveError::WrongTask(Task::Mt))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ctc_is_nonnegative_and_gradient_sums_to_minus_one(seed in 0u64..10_000, t in 1usize..8, v in 2usize..5, len in 0usize..4) {
        let lp = random_log_probs(t, v, seed);
        let mut rng = seeded(seed ^ 0xabc);
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..v)).collect();
        prop_assume!(min_frames(&target) <= t);
        let (loss, grad) = ctc_loss(&lp, t, v, &target, 0).unwrap();
        prop_assert!(loss.is_finite() && loss >= -1e-12);
        for row in grad.chunks(v) {
            let s: f64 = row.iter().sum();
            prop_assert!((s + 1.0).abs() < 1e-9);
        }
    }
}
