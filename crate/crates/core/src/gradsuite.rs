//! Finite-difference verification of every differentiable op and of a full
//! encoder–decoder loss.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_check_at, Conv2dSpec, PoolSpec, Result, Tensor, TensorError};
use crate::network::{Model, ModelConfig, Mode, Task};
use crate::objectives::{ctc_batch, hybrid_asr_loss, label_smoothed_ce, BatchData, LossWeights, ObjectiveError};
use crate::rng::seeded;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
const MODEL_STEP: f64 = 1e-5;
/// Coordinates probed per model parameter tensor (largest gradients first).
const PROBES_PER_TENSOR: usize = 3;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err <= self.tolerance
    }
}

fn random(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn constant(shape: &[usize], seed: u64) -> Tensor {
    Tensor::from_vec(random(numel(shape), seed, -1.0, 1.0), shape).expect("shape matches data")
}

/// `Σ w ⊙ y` with fixed random weights, so every output element matters.
fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    let w = Tensor::from_vec(random(y.numel(), seed ^ 0x5eed, -1.0, 1.0), y.shape())?;
    Ok(y.mul(&w)?.reduce_sum())
}

fn objective<T>(r: std::result::Result<T, ObjectiveError>) -> Result<T> {
    r.map_err(|e| TensorError::Invalid {
        op: "objective",
        msg: e.to_string(),
    })
}

struct OpCase {
    name: &'static str,
    shape: Vec<usize>,
    range: (f64, f64),
    f: Box<dyn Fn(&Tensor) -> Result<Tensor>>,
}

fn case(name: &'static str, shape: &[usize], f: impl Fn(&Tensor) -> Result<Tensor> + 'static) -> OpCase {
    OpCase {
        name,
        shape: shape.to_vec(),
        range: (-1.0, 1.0),
        f: Box::new(f),
    }
}

fn op_cases() -> Vec<OpCase> {
    let conv_w = constant(&[3, 2, 3, 3], 21);
    let conv_x = constant(&[2, 2, 5, 4], 22);
    let conv_b = constant(&[3], 23);
    let gamma = constant(&[5], 24);
    let beta = constant(&[5], 25);
    let ln_x = constant(&[3, 5], 26);
    let other = constant(&[3, 4], 27);
    let row = constant(&[1, 4], 28);
    let mat_b = constant(&[4, 2], 29);
    let pool = PoolSpec {
        kernel: (2, 2),
        stride: (2, 2),
        ceil_mode: true,
    };
    let padded = Conv2dSpec {
        stride: (1, 2),
        padding: (1, 1),
    };
    vec![
        case("add", &[3, 4], move |t| t.add(&other.clone())),
        case("add.broadcast", &[3, 4], {
            let row = row.clone();
            move |t| t.add(&row)
        }),
        case("sub", &[3, 4], {
            let row = row.clone();
            move |t| row.sub(t)
        }),
        case("sub.broadcast_rhs", &[1, 4], {
            let x = constant(&[3, 4], 33);
            move |t| x.sub(t)
        }),
        case("mul", &[3, 4], |t| t.mul(t)),
        case("mul.broadcast", &[1, 4], {
            let x = constant(&[3, 4], 34);
            move |t| x.mul(t)
        }),
        case("scale", &[3, 4], |t| Ok(t.scale(-1.7))),
        case("add_scalar", &[3, 4], |t| Ok(t.add_scalar(0.3).mul(t)?)),
        case("exp", &[3, 4], |t| Ok(t.exp())),
        OpCase {
            range: (0.5, 1.5),
            ..case("log", &[3, 4], |t| Ok(t.log()))
        },
        case("tanh", &[3, 4], |t| Ok(t.tanh())),
        case("sigmoid", &[3, 4], |t| Ok(t.sigmoid())),
        case("relu", &[3, 4], |t| Ok(t.relu())),
        case("matmul.lhs", &[3, 4], {
            let b = mat_b.clone();
            move |t| t.matmul(&b)
        }),
        case("matmul.rhs", &[4, 2], |t| constant(&[2, 3, 4], 35).matmul(t)),
        case("matmul.batched", &[2, 3, 4], |t| t.matmul(&constant(&[2, 4, 2], 36))),
        case("matmul_nt", &[2, 3, 4], |t| t.matmul_nt(&constant(&[2, 5, 4], 37))),
        case("matmul_nt.rhs", &[2, 5, 4], |t| constant(&[2, 3, 4], 38).matmul_nt(t)),
        case("softmax.last", &[3, 4], |t| t.softmax(1)),
        case("softmax.inner", &[3, 4, 2], |t| t.softmax(1)),
        case("log_softmax", &[3, 4], |t| t.log_softmax(1)),
        case("layer_norm.x", &[3, 5], {
            let (g, b) = (gamma.clone(), beta.clone());
            move |t| t.layer_norm(1, &g, &b, 1e-5)
        }),
        case("layer_norm.gamma", &[5], {
            let (x, b) = (ln_x.clone(), beta.clone());
            move |t| x.layer_norm(1, t, &b, 1e-5)
        }),
        case("layer_norm.beta", &[5], {
            let (x, g) = (ln_x.clone(), gamma.clone());
            move |t| x.layer_norm(1, &g, t, 1e-5)
        }),
        case("embedding", &[6, 3], |t| t.embedding(&[0, 5, 2, 2, 1, 0], &[2, 3])),
        case("conv2d.x", &[2, 2, 5, 4], {
            let (w, b) = (conv_w.clone(), conv_b.clone());
            move |t| t.conv2d(&w, Some(&b), padded)
        }),
        case("conv2d.weight", &[3, 2, 3, 3], {
            let (x, b) = (conv_x.clone(), conv_b.clone());
            move |t| x.conv2d(t, Some(&b), padded)
        }),
        case("conv2d.bias", &[3], {
            let (x, w) = (conv_x.clone(), conv_w.clone());
            move |t| x.conv2d(&w, Some(t), Conv2dSpec::default())
        }),
        case("max_pool2d", &[2, 2, 5, 3], move |t| t.max_pool2d(pool)),
        case("dropout", &[3, 4], |t| t.dropout(0.3, 77, true)),
        case("concat", &[2, 3], |t| Tensor::concat(&[t, &constant(&[2, 2], 39), t], 1)),
        case("slice", &[4, 3], |t| t.slice(0, 1, 3)),
        case("transpose", &[2, 3, 4], |t| t.transpose(0, 2)),
        case("reshape", &[2, 6], |t| t.reshape(&[3, 4])?.matmul(&constant(&[4, 2], 40))),
        case("reduce_sum", &[3, 4], |t| Ok(t.mul(t)?.reduce_sum())),
        case("reduce_mean", &[3, 4], |t| Ok(t.exp().reduce_mean())),
        case("sum_axis", &[3, 4, 2], |t| t.sum_axis(1)),
        case("mean_axis", &[3, 4, 2], |t| t.mean_axis(0)),
        case("label_smoothed_ce", &[2, 3, 5], |t| {
            Ok(objective(label_smoothed_ce(t, &[1, 4, 0, 2, usize::MAX, 3], 0.1))?.0)
        }),
        case("ctc", &[2, 6, 4], |t| objective(ctc_batch(&t.log_softmax(2)?, &[6, 4], &[vec![1, 2, 2], vec![3]]))),
    ]
}

/// Every op, one check each.
pub fn op_checks() -> Result<Vec<GradCheck>> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let x = random(numel(&c.shape), 1000 + i as u64, c.range.0, c.range.1);
            let f = &c.f;
            let err = finite_diff_check_at(|t| project(&f(t)?, i as u64), &x, &c.shape, STEP)?;
            Ok(GradCheck {
                name: c.name.to_string(),
                rel_err: err,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

fn model_config() -> ModelConfig {
    ModelConfig {
        task: Task::Asr,
        d_model: 8,
        heads: 2,
        d_ff: 12,
        enc_blocks: 2,
        dec_blocks: 2,
        vgg_channels: vec![2, 2],
        feat_dim: 6,
        vocab_size: 7,
        src_vocab_size: 0,
        dropout: 0.0,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn model_batch(cfg: &ModelConfig) -> BatchData {
    let (b, t) = (2, 13);
    BatchData {
        utt_ids: vec!["a".into(), "b".into()],
        feats: Some((random(b * t * cfg.feat_dim, 7, -1.0, 1.0), [b, t, cfg.feat_dim])),
        feat_lens: vec![13, 10],
        targets: vec![vec![2, 3, 4], vec![5, 2]],
        sources: None,
    }
}

/// Hybrid CTC/attention loss of a 2-block encoder, 2-block decoder model:
/// for every parameter tensor, the coordinates with the largest gradients.
pub fn model_checks() -> Result<Vec<GradCheck>> {
    let cfg = model_config();
    let model = Model::new(cfg.clone()).map_err(|e| TensorError::Invalid {
        op: "model",
        msg: e.to_string(),
    })?;
    let batch = model_batch(&cfg);
    let w = LossWeights {
        ctc: 0.3,
        label_smoothing: 0.1,
        ..LossWeights::default()
    };
    let loss_of = |bound: &crate::network::Bound| -> f64 {
        hybrid_asr_loss(bound, &batch, &w, &Mode::eval())
            .expect("loss of a valid batch")
            .total
            .item()
    };
    let bound = model.bind(true);
    hybrid_asr_loss(&bound, &batch, &w, &Mode::eval())
        .expect("loss of a valid batch")
        .total
        .backward()?;
    let grads = bound.grads();
    let mut out = Vec::with_capacity(model.params.len());
    for (name, p) in &model.params {
        let g = &grads[name];
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
        let mut worst: f64 = 0.0;
        for &i in order.iter().take(PROBES_PER_TENSOR) {
            let eval_at = |delta: f64| {
                let mut data = p.data.clone();
                data[i] += delta;
                let mut b = model.bind(false);
                b.set_param(name, Tensor::from_vec(data, &p.shape).expect("same shape"))
                    .expect("parameter exists");
                loss_of(&b)
            };
            let numeric = (eval_at(MODEL_STEP) - eval_at(-MODEL_STEP)) / (2.0 * MODEL_STEP);
            worst = worst.max((g[i] - numeric).abs() / (g[i].abs() + 1e-8));
        }
        out.push(GradCheck {
            name: format!("model.{name}"),
            rel_err: worst,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(out)
}

/// Op checks followed by model checks.
pub fn run_grad_suite() -> Result<Vec<GradCheck>> {
    let mut all = op_checks()?;
    all.extend(model_checks()?);
    Ok(all)
}
