//! End-to-end acceptance checks, one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng as _;
use serde_json::{json, Value};
use stforge_core::augment::speed_perturb;
use stforge_core::autodiff::Tensor;
use stforge_core::decoder::{beam_search, CtcPrefixScorer, DecodeConfig, DecodeInput, NBest};
use stforge_core::evalkit::corpus_bleu;
use stforge_core::frontend::{hz_to_mel, mel_filterbank, FeatureExtractor, FrontendConfig};
use stforge_core::network::{save_checkpoint, Bound, Mode, Model, ModelConfig, Task};
use stforge_core::objectives::ctc_loss;
use stforge_core::rng::seeded;
use stforge_core::trainer::{average_checkpoints, average_models, transfer_from_checkpoint};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_log_probs(t: usize, v: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - z));
    }
    out
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if k != blank && Some(k) != prev {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Probability mass of every collapsed label sequence, by enumerating all
/// `v^t` frame alignments.
fn enumerate_alignments(lp: &[f64], t: usize, v: usize) -> BTreeMap<Vec<usize>, f64> {
    let mut mass = BTreeMap::new();
    for code in 0..v.pow(t as u32) {
        let path: Vec<usize> = (0..t).map(|i| (code / v.pow(i as u32)) % v).collect();
        let p: f64 = path.iter().enumerate().map(|(i, &k)| lp[i * v + k]).sum::<f64>().exp();
        *mass.entry(collapse(&path, 0)).or_insert(0.0) += p;
    }
    mass
}

fn label_sequences(labels: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        let next: Vec<Vec<usize>> = frontier
            .iter()
            .flat_map(|p| {
                labels.iter().map(move |&k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(101);
    let (mut cases, mut worst_nll, mut worst_grad) = (0usize, 0.0f64, 0.0f64);
    let h = 3e-3;
    for t in 1..=6 {
        for v in 2..=4 {
            for _draw in 0..2 {
                let lp = random_log_probs(t, v, &mut rng);
                let mass = enumerate_alignments(&lp, t, v);
                let labels: Vec<usize> = (1..v).collect();
                for target in label_sequences(&labels, 3) {
                    cases += 1;
                    let brute = mass.get(&target).copied().unwrap_or(0.0);
                    match ctc_loss(&lp, t, v, &target, 0) {
                        Ok((nll, grad)) => {
                            ensure!(brute > 0.0, "T={t} V={v} {target:?}: loss {nll} for an unreachable target");
                            let d = (nll + brute.ln()).abs();
                            worst_nll = worst_nll.max(d);
                            ensure!(d <= 1e-9, "T={t} V={v} {target:?}: nll {nll} vs enumeration {}", -brute.ln());
                            let loss_at = |i: usize, x: f64| -> Result<f64, String> {
                                let mut probe = lp.clone();
                                probe[i] = x;
                                Ok(ctc_loss(&probe, t, v, &target, 0).map_err(|e| e.to_string())?.0)
                            };
                            for i in 0..lp.len() {
                                // fourth-order central stencil
                                let x = lp[i];
                                let numeric = (loss_at(i, x - 2.0 * h)? - 8.0 * loss_at(i, x - h)? + 8.0 * loss_at(i, x + h)?
                                    - loss_at(i, x + 2.0 * h)?)
                                    / (12.0 * h);
                                let rel = (grad[i] - numeric).abs() / (grad[i].abs() + 1e-8);
                                worst_grad = worst_grad.max(rel);
                                ensure!(rel <= 1e-4, "T={t} V={v} {target:?}: d/dlp[{i}] {} vs {numeric}", grad[i]);
                            }
                        }
                        Err(_) => ensure!(brute == 0.0, "T={t} V={v} {target:?}: rejected a reachable target"),
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("{cases} instances, max |Δnll| {worst_nll:.1e}, max grad rel err {worst_grad:.1e}, {secs:.1} s"))
}

fn criterion_2() -> Outcome {
    // V=3 symbols {blank, a, b}; the eos column only marks the closing step
    let (t, v, eos) = (4, 3, 3);
    let mut rng = seeded(202);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let real = random_log_probs(t, v, &mut rng);
        let mut lp = Vec::with_capacity(t * (v + 1));
        for row in real.chunks(v) {
            lp.extend_from_slice(row);
            lp.push(f64::NEG_INFINITY);
        }
        let len = rng.gen_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..v)).collect();
        let sc = CtcPrefixScorer::new(&lp, t, v + 1, 0, eos).map_err(|e| e.to_string())?;
        let mut state = sc.initial();
        let mut total = 0.0;
        for &y in target.iter().chain(std::iter::once(&eos)) {
            let (inc, next) = sc.score(&state, y).map_err(|e| e.to_string())?;
            total += inc;
            state = next;
        }
        match ctc_loss(&real, t, v, &target, 0) {
            Ok((nll, _)) => {
                let d = (total + nll).abs();
                worst = worst.max(d);
                ensure!(d <= 1e-9, "case {case} {target:?}: prefix sum {total} vs {}", -nll);
            }
            Err(_) => ensure!(total == f64::NEG_INFINITY, "case {case} {target:?}: infeasible target scored {total}"),
        }
    }
    Ok(format!("200 instances, max |Δ| {worst:.1e}"))
}

fn stforge(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        return Err(format!("stforge {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(stdout)
}

fn criterion_3() -> Outcome {
    let out = stforge(&["grad-check"])?;
    let mut ops = 0;
    let mut model = 0;
    let mut worst_op = 0.0f64;
    let mut worst_model = 0.0f64;
    for line in out.lines().filter(|l| l.contains("rel_err")) {
        let f: Vec<&str> = line.split_whitespace().collect();
        ensure!(f[0] == "ok", "{line}");
        let err: f64 = f[3].parse().map_err(|_| format!("unparsable line {line}"))?;
        if f[1].starts_with("model.") {
            model += 1;
            worst_model = worst_model.max(err);
            ensure!(err <= 1e-3, "{line}");
        } else {
            ops += 1;
            worst_op = worst_op.max(err);
            ensure!(err <= 1e-4, "{line}");
        }
    }
    ensure!(ops >= 30 && model > 0, "only {ops} op and {model} model checks reported");
    Ok(format!("{ops} op checks (max {worst_op:.1e}), {model} model checks (max {worst_model:.1e})"))
}

fn tiny_config(task: Task, v: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        task,
        d_model: 8,
        heads: 2,
        d_ff: 12,
        enc_blocks: 1,
        dec_blocks: 2,
        vgg_channels: vec![2, 2],
        feat_dim: 5,
        vocab_size: v,
        src_vocab_size: 6,
        mt_enc_blocks: 1,
        dropout: 0.0,
        lm_units: 6,
        lm_layers: 1,
        seed,
    }
}

/// Random model with spread-out output biases so that scores are distinct.
fn tiny_model(task: Task, v: usize, seed: u64) -> Model {
    let mut m = Model::new(tiny_config(task, v, seed)).expect("valid config");
    let mut rng = seeded(seed ^ 0xa5);
    for (name, p) in m.params.iter_mut() {
        if name.ends_with("output.bias") || name == "ctc.bias" {
            p.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.5..1.5));
        }
    }
    m
}

fn encode(b: &Bound, input: DecodeInput<'_>) -> (Tensor, Vec<usize>) {
    let eval = Mode::eval();
    match input {
        DecodeInput::Text(ids) => b.text_encoder_forward("encoder", &[ids.to_vec()], &eval).unwrap(),
        DecodeInput::Speech { feats, frames, dim } => b
            .speech_encoder_forward(&Tensor::from_vec(feats.to_vec(), &[1, frames, dim]).unwrap(), &[frames], &eval)
            .unwrap(),
    }
}

/// Teacher-forced log-probability of `y` then eos, from full forward passes.
fn attention_score(b: &Bound, input: DecodeInput<'_>, y: &[usize]) -> f64 {
    let (enc, lens) = encode(b, input);
    let eos = b.config.sos_eos();
    let ys_in: Vec<usize> = std::iter::once(eos).chain(y.iter().copied()).collect();
    let lp = b.decoder_forward(&enc, &lens, &[ys_in], &Mode::eval()).unwrap().log_softmax(2).unwrap().to_vec();
    let v = b.config.vocab_size;
    y.iter().chain(std::iter::once(&eos)).enumerate().map(|(i, &k)| lp[i * v + k]).sum()
}

fn lm_score(b: &Bound, y: &[usize]) -> f64 {
    let eos = b.config.sos_eos();
    let ys_in: Vec<usize> = std::iter::once(eos).chain(y.iter().copied()).collect();
    let lp = b.lm_forward(&[ys_in], &Mode::eval()).unwrap().log_softmax(2).unwrap().to_vec();
    let v = b.config.vocab_size;
    y.iter().chain(std::iter::once(&eos)).enumerate().map(|(i, &k)| lp[i * v + k]).sum()
}

fn ctc_score(b: &Bound, input: DecodeInput<'_>, y: &[usize]) -> f64 {
    let (enc, lens) = encode(b, input);
    let lp = b.ctc_log_probs(&enc).unwrap().to_vec();
    ctc_loss(&lp, lens[0], b.config.vocab_size, y, 0).map_or(f64::NEG_INFINITY, |(nll, _)| -nll)
}

fn best_of(seqs: &[Vec<usize>], score: impl Fn(&[usize]) -> f64) -> (Vec<usize>, f64) {
    seqs.iter()
        .map(|s| (s.clone(), score(s)))
        .fold((vec![], f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
}

fn bit_equal(a: &[NBest], b: &[NBest]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.tokens == y.tokens && x.score.to_bits() == y.score.to_bits())
}

fn criterion_4() -> Outcome {
    let v = 4;
    let seqs = label_sequences(&[1, 2], 3);
    let wide = DecodeConfig {
        beam_size: 64,
        max_len: Some(3),
        ctc_weight: 0.0,
        ..DecodeConfig::default()
    };
    let src = [3, 1, 4, 2];
    for seed in 0..4 {
        let m = tiny_model(Task::Mt, v, seed);
        let b = m.bind(false);
        let input = DecodeInput::Text(&src);
        let got = beam_search(&[&m], None, input, &wide).map_err(|e| e.to_string())?;
        let (y, s) = best_of(&seqs, |y| attention_score(&b, input, y));
        ensure!(got[0].tokens == y, "mt seed {seed}: beam {:?} vs exhaustive {y:?}", got[0].tokens);
        ensure!((got[0].score - s).abs() < 1e-9, "mt seed {seed}: score {} vs {s}", got[0].score);
    }
    let frames = 13;
    let mut rng = seeded(404);
    let feats: Vec<f64> = (0..frames * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let speech = DecodeInput::Speech { feats: &feats, frames, dim: 5 };
    let joint = DecodeConfig {
        ctc_weight: 0.4,
        lm_weight: 0.5,
        length_reward: 0.2,
        ..wide.clone()
    };
    for seed in 0..3 {
        let asr = tiny_model(Task::Asr, v, 10 + seed);
        let lm = tiny_model(Task::Lm, v, 20 + seed);
        let (b, bl) = (asr.bind(false), lm.bind(false));
        let got = beam_search(&[&asr], Some(&lm), speech, &joint).map_err(|e| e.to_string())?;
        let (y, s) = best_of(&seqs, |y| {
            0.6 * attention_score(&b, speech, y) + 0.4 * ctc_score(&b, speech, y) + 0.5 * lm_score(&bl, y) + 0.2 * (y.len() + 1) as f64
        });
        ensure!(got[0].tokens == y, "asr seed {seed}: beam {:?} vs exhaustive {y:?}", got[0].tokens);
        ensure!((got[0].score - s).abs() < 1e-9, "asr seed {seed}: score {} vs {s}", got[0].score);
    }

    let m = tiny_model(Task::Mt, 7, 30);
    let nbest = DecodeConfig {
        beam_size: 4,
        max_len: Some(5),
        nbest: 3,
        ..DecodeConfig::default()
    };
    let one = beam_search(&[&m], None, DecodeInput::Text(&src), &nbest).map_err(|e| e.to_string())?;
    let three = beam_search(&[&m, &m, &m], None, DecodeInput::Text(&src), &nbest).map_err(|e| e.to_string())?;
    ensure!(bit_equal(&one, &three), "identical ensemble differs from its member");
    let asr = tiny_model(Task::Asr, 6, 31);
    let c = DecodeConfig { ctc_weight: 0.3, ..nbest.clone() };
    let a1 = beam_search(&[&asr], None, speech, &c).map_err(|e| e.to_string())?;
    let a2 = beam_search(&[&asr, &asr], None, speech, &c).map_err(|e| e.to_string())?;
    ensure!(bit_equal(&a1, &a2), "identical asr ensemble differs from its member");

    let lm = tiny_model(Task::Lm, 6, 32);
    let fused = beam_search(&[&asr], Some(&lm), speech, &DecodeConfig { lm_weight: 0.0, ..c.clone() }).map_err(|e| e.to_string())?;
    ensure!(bit_equal(&a1, &fused), "lm_weight 0 changes the output");
    Ok("beam 64 = exhaustive on 7 models; ensemble and β=0 bit-exact".into())
}

const HYPS: [&str; 10] = [
    "the cat sat on the mat",
    "there is a dog in the garden",
    "i would like a cup of coffee please",
    "he went to the market yesterday",
    "we are going home now",
    "this is a very small house",
    "the weather is nice today",
    "she reads a book every night",
    "they play football in the park",
    "my brother works at the bank",
];
const REFS: [&str; 10] = [
    "the cat is sitting on the mat",
    "a dog is in the garden",
    "i would like a cup of tea please",
    "yesterday he went to the market",
    "we go home now",
    "this house is very small",
    "the weather is good today",
    "she reads a book each night",
    "they are playing football in the park",
    "my brother works in a bank",
];

fn criterion_5() -> Outcome {
    let single = |r: &[&str]| -> Vec<Vec<String>> { r.iter().map(|s| vec![s.to_string()]).collect() };
    let ident = corpus_bleu(&HYPS, &single(&HYPS), false).map_err(|e| e.to_string())?;
    ensure!(format!("{:.2}", ident.bleu) == "100.00", "identity scored {}", ident.bleu);
    let clip = corpus_bleu(&["the the the the"], &[vec!["the cat"]], false).map_err(|e| e.to_string())?;
    ensure!(clip.matches[0] == 1 && clip.totals[0] == 4, "unigram clipping {:?}/{:?}", clip.matches, clip.totals);
    ensure!(format!("{:.2}", clip.bleu) == "0.00", "clipping example scored {}", clip.bleu);
    // scored with sacrebleu 2.6.0, tokenize=none, no smoothing
    let ten = corpus_bleu(&HYPS, &single(&REFS), false).map_err(|e| e.to_string())?;
    ensure!((ten.bleu - 43.513).abs() <= 0.01, "10-sentence fixture scored {}", ten.bleu);

    let hyps = ["the cat sat on the mat", "he is going to the store", "it is raining very hard today", "please open the window"];
    let refs = vec![
        vec!["the cat is on the mat", "there is a cat on the mat", "a cat sat on the mat", "the cat sat on a mat"],
        vec!["he goes to the shop", "he is going to the store", "he walks to the market", "he heads to the shop"],
        vec!["it rains a lot today", "it is raining heavily today", "today it is raining very hard", "the rain is very hard today"],
        vec!["open the window please", "please open the window now", "could you open the window", "kindly open the window"],
    ];
    let four = corpus_bleu(&hyps, &refs, false).map_err(|e| e.to_string())?;
    ensure!(four.matches == [22, 18, 14, 9], "4-reference matches {:?}", four.matches);
    ensure!((four.bleu - 97.4004).abs() <= 0.01, "4-reference fixture scored {}", four.bleu);
    let first: Vec<Vec<&str>> = refs.iter().map(|r| vec![r[0]]).collect();
    let one = corpus_bleu(&hyps, &first, false).map_err(|e| e.to_string())?;
    ensure!(one.matches == [14, 6, 2, 0], "first-reference matches {:?}", one.matches);
    Ok(format!("identity {:.2}, clipping {:.2}, fixture {:.3}, 4-ref {:.3}", ident.bleu, clip.bleu, ten.bleu, four.bleu))
}

fn criterion_6() -> Outcome {
    let cfg = FrontendConfig::default();
    let fb = mel_filterbank::<f64>(&cfg).map_err(|e| e.to_string())?;
    let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let (first_center, last_center) = (lo + step, lo + cfg.n_mels as f64 * step);
    let mut interior = 0;
    let mut worst = 0.0f64;
    for k in 0..fb.cols {
        let m = hz_to_mel(k as f64 * f64::from(cfg.sample_rate_hz) / cfg.n_fft as f64);
        if m > first_center && m < last_center {
            let col: f64 = (0..fb.rows).map(|r| fb.get(r, k)).sum();
            worst = worst.max((col - 1.0).abs());
            interior += 1;
        }
    }
    ensure!(interior > 0 && worst <= 1e-6, "interior column sums deviate by {worst}");

    let mut rng = seeded(606);
    let wave: Vec<f64> = (0..16000)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 16000.0).sin() + rng.gen_range(-0.01..0.01))
        .collect();
    let feats = FeatureExtractor::<f64>::new(&cfg).and_then(|x| x.extract("one_second", &wave, None)).map_err(|e| e.to_string())?;
    ensure!((feats.frames(), feats.dim()) == (98, 83), "1 s of audio gave {}×{}", feats.frames(), feats.dim());
    let slow = speed_perturb(&wave, 0.9);
    ensure!(slow.len().abs_diff(17778) <= 1, "speed 0.9 gave {} samples", slow.len());
    Ok(format!("{interior} interior bins within {worst:.1e} of 1; (98, 83) features; {} samples at 0.9", slow.len()))
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = |task, seed| ModelConfig {
        feat_dim: 6,
        vocab_size: 9,
        src_vocab_size: 9,
        ..tiny_config(task, 9, seed)
    };
    let asr = Model::new(cfg(Task::Asr, 1)).map_err(|e| e.to_string())?;
    let mt = Model::new(cfg(Task::Mt, 2)).map_err(|e| e.to_string())?;
    let (asr_ckpt, mt_ckpt) = (dir.path().join("asr.ckpt"), dir.path().join("mt.ckpt"));
    save_checkpoint(&asr, &asr_ckpt).map_err(|e| e.to_string())?;
    save_checkpoint(&mt, &mt_ckpt).map_err(|e| e.to_string())?;
    let fresh = Model::new(cfg(Task::St, 3)).map_err(|e| e.to_string())?;
    let mut st = fresh.clone();
    let ra = transfer_from_checkpoint(&mut st, &asr_ckpt, "encoder.").map_err(|e| e.to_string())?;
    let rm = transfer_from_checkpoint(&mut st, &mt_ckpt, "decoder.").map_err(|e| e.to_string())?;
    ensure!(ra.shape_mismatch.is_empty() && rm.shape_mismatch.is_empty(), "shape mismatches");
    let bits = |d: &[f64]| d.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let (mut from_asr, mut from_mt, mut untouched) = (0, 0, 0);
    for (name, p) in &st.params {
        let donor = if name.starts_with("encoder.") {
            from_asr += 1;
            &asr.params[name]
        } else if name.starts_with("decoder.") {
            from_mt += 1;
            &mt.params[name]
        } else {
            untouched += 1;
            &fresh.params[name]
        };
        ensure!(bits(&p.data) == bits(&donor.data), "{name} differs from its expected source");
    }
    ensure!(from_asr > 0 && from_mt > 0 && untouched > 0, "scopes cover {from_asr}/{from_mt}/{untouched} tensors");
    ensure!(ra.copied.len() == from_asr && rm.copied.len() == from_mt, "transfer reports disagree with scopes");
    Ok(format!("{from_asr} encoder and {from_mt} decoder tensors bit-equal to donors, {untouched} untouched"))
}

fn write_config(path: &Path, cfg: &Value) -> Result<(), String> {
    fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).map_err(|e| e.to_string())
}

struct Recipes {
    corpus: PathBuf,
    root: PathBuf,
    speed_factors: Vec<f64>,
    asr_epochs: usize,
    mt_epochs: usize,
    st_epochs: usize,
}

impl Recipes {
    fn exp(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn config(&self, recipe: &str, name: &str, epochs: usize) -> Value {
        json!({
            "recipe": recipe,
            "exp_dir": self.exp(name),
            "data": {
                "train": self.corpus,
                "eval": {"dev": self.corpus},
                "src_lang": "en",
                "tgt_lang": if recipe == "asr" { Value::Null } else { json!("fr") },
            },
            "subword": {"vocab_size": 200},
            "augment": {"speed_factors": self.speed_factors},
            "model": {
                "d_model": 32, "heads": 4, "d_ff": 64, "enc_blocks": 2, "dec_blocks": 1,
                "mt_enc_blocks": 1, "vgg_channels": [4, 8], "dropout": 0.0
            },
            "train": {
                "epochs": epochs, "max_frames_in": 3000, "max_tokens_out": 300,
                "warmup_steps": 50, "lr_scale": 1.0, "keep_last_k": 0,
                "weights": {"ctc": 0.3, "asr": 0.3, "mt": 0.3, "label_smoothing": 0.0}
            },
            "decode": {"beam_size": 2},
            "average_last": 3,
        })
    }

    fn st_config(&self, name: &str, transfer: bool) -> Value {
        let mut c = self.config("st", name, self.st_epochs);
        c["train"]["lr_scale"] = json!(0.5);
        c["train"]["warmup_steps"] = json!(100);
        c["augment"]["spec_augment"] =
            json!({"freq_width": 8, "freq_masks": 1, "time_width": 5, "time_masks": 1, "mask_value": 0.0, "seed": 3});
        c["validation"] = json!({"set": "dev", "beam_size": 1});
        if transfer {
            c["transfer"] = json!({
                "asr": {"ckpt": self.exp("asr"), "scope": "encoder."},
                "mt": {"ckpt": self.exp("mt"), "scope": "decoder."},
            });
            c["cascade"] = json!({"asr_exp": self.exp("asr"), "mt_exp": self.exp("mt")});
        }
        c
    }

    fn run(&self, name: &str, cfg: &Value) -> Result<(), String> {
        let path = self.root.join(format!("{name}.json"));
        write_config(&path, cfg)?;
        stforge(&["run", "--config", path.to_str().unwrap()]).map(|_| ())
    }

    /// ASR, MT, then ST with transfer, multi-task loss, SpecAugment and a
    /// cascade comparison.
    fn run_chain(&self) -> Result<(), String> {
        self.run("asr", &self.config("asr", "asr", self.asr_epochs))?;
        self.run("mt", &self.config("mt", "mt", self.mt_epochs))?;
        self.run("st", &self.st_config("st", true))
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn first_epoch_at(valid_log: &Path, bleu: f64) -> Result<Option<u64>, String> {
    let text = fs::read_to_string(valid_log).map_err(|e| format!("{}: {e}", valid_log.display()))?;
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if v["bleu"].as_f64().unwrap_or(0.0) >= bleu {
            return Ok(v["epoch"].as_u64());
        }
    }
    Ok(None)
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let r = Recipes {
        corpus: dir.path().join("corpus"),
        root: dir.path().to_path_buf(),
        speed_factors: vec![1.0],
        asr_epochs: 20,
        mt_epochs: 60,
        st_epochs: 60,
    };
    let start = Instant::now();
    stforge(&["make-corpus", "--seed", "1", "--n", "200", "--out", r.corpus.to_str().unwrap()])?;
    r.run_chain()?;
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30 * 60), "recipes took {:.0} s", elapsed.as_secs_f64());

    let st = read_json(&r.exp("st").join("exp/decode_dev/score.json"))?;
    let bleu = st["bleu"]["bleu"].as_f64().ok_or("score.json lacks bleu")?;
    ensure!(bleu >= 90.0, "overfit ST BLEU {bleu:.2}");
    let cascade = read_json(&r.exp("st").join("exp/cascade_dev/score.json"))?;
    let cascade_bleu = cascade["bleu"]["bleu"].as_f64().ok_or("cascade score.json lacks a BleuReport")?;
    ensure!(cascade["bleu"]["precisions"].as_array().is_some_and(|p| p.len() == 4), "cascade report is incomplete");

    r.run("st_scratch", &r.st_config("st_scratch", false))?;
    let with = first_epoch_at(&r.exp("st").join("exp/train/valid.log"), 90.0)?;
    let without = first_epoch_at(&r.exp("st_scratch").join("exp/train/valid.log"), 90.0)?;
    let with = with.ok_or("transfer-initialized ST never reached BLEU 90")?;
    ensure!(without.map_or(true, |s| with <= s), "transfer needed {with} epochs, scratch {without:?}");
    Ok(format!(
        "recipes in {:.0} s; ST BLEU {bleu:.2}; cascade BLEU {cascade_bleu:.2}; BLEU 90 after {with} epochs with transfer vs {} from scratch",
        elapsed.as_secs_f64(),
        without.map_or("never".to_string(), |s| s.to_string())
    ))
}

fn collect_outputs(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            if p.is_dir() {
                stack.push(p);
            } else if name.ends_with(".ckpt") || name == "hyp.trn" || name == "score.json" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus");
    stforge(&["make-corpus", "--seed", "9", "--n", "24", "--out", corpus.to_str().unwrap()])?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        fs::create_dir_all(&root).map_err(|e| e.to_string())?;
        let r = Recipes {
            corpus: corpus.clone(),
            root: root.clone(),
            speed_factors: vec![0.9, 1.0, 1.1],
            asr_epochs: 3,
            mt_epochs: 3,
            st_epochs: 3,
        };
        r.run_chain()?;
        outputs.push(collect_outputs(&root));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    ensure!(a.keys().eq(b.keys()), "runs produced different file sets");
    for (p, bytes) in a {
        ensure!(bytes == &b[p], "{} differs between runs", p.display());
    }
    let ckpts = a.keys().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).count();
    ensure!(ckpts > 0 && a.len() > ckpts, "nothing to compare");
    Ok(format!("{} files byte-identical ({ckpts} checkpoints)", a.len()))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = tiny_model(Task::Asr, 7, 44);
    let bits = |m: &Model| m.params.values().flat_map(|p| p.data.iter().map(|x| x.to_bits())).collect::<Vec<_>>();
    let paths: Vec<PathBuf> = (0..4).map(|i| dir.path().join(format!("same{i}.ckpt"))).collect();
    for p in &paths {
        save_checkpoint(&m, p).map_err(|e| e.to_string())?;
    }
    let avg = average_checkpoints(&paths).map_err(|e| e.to_string())?;
    ensure!(bits(&avg) == bits(&m), "averaging identical checkpoints changed parameters");
    let avg3 = average_models(&[m.clone(), m.clone(), m.clone()]).map_err(|e| e.to_string())?;
    ensure!(bits(&avg3) == bits(&m), "averaging identical models changed parameters");

    let mut neg = m.clone();
    for p in neg.params.values_mut() {
        p.data.iter_mut().for_each(|x| *x = -*x);
    }
    let pair = [dir.path().join("pos.ckpt"), dir.path().join("neg.ckpt")];
    save_checkpoint(&m, &pair[0]).map_err(|e| e.to_string())?;
    save_checkpoint(&neg, &pair[1]).map_err(|e| e.to_string())?;
    let zero = average_checkpoints(&pair).map_err(|e| e.to_string())?;
    let n = bits(&zero).len();
    ensure!(bits(&zero).iter().all(|&b| b == 0), "{{θ, −θ}} did not average to +0.0");
    Ok(format!("identity over 4 checkpoints; {{θ, −θ}} → {n} zero parameters"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("CTC oracle equivalence", criterion_1),
        ("CTC prefix-score consistency", criterion_2),
        ("gradient suite", criterion_3),
        ("beam-search oracle", criterion_4),
        ("BLEU fixtures", criterion_5),
        ("frontend", criterion_6),
        ("transfer learning", criterion_7),
        ("end-to-end synthetic recipe", criterion_8),
        ("determinism", criterion_9),
        ("model averaging", criterion_10),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
