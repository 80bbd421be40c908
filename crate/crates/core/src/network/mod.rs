//! Transformer and LSTM model assemblies.
//!
//! A [`Model`] is a configuration plus a table of named `f64` parameters.
//! Forward passes run on a [`Bound`] view that wraps every parameter in a
//! [`Tensor`]; binding with `trainable = true` makes the parameters graph
//! leaves so gradients can be read back by name after `backward`.
//!
//! Naming is shared across tasks so parameters can be moved between models
//! by name: the speech encoder of ASR and ST lives under `encoder.`, the
//! text encoder of MT also under `encoder.`, and every attention decoder
//! under `decoder.`.

mod checkpoint;
mod layers;
mod lm;
mod seq;

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};
use crate::rng::{derive, derive_index, seeded};

pub use checkpoint::{load_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use lm::LmState;
pub use seq::{DecoderCache, Memory};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model has no parameter {0}")]
    MissingParam(String),
    #[error("cache holds {cache} hypotheses, got {tokens} tokens")]
    CacheMismatch { cache: usize, tokens: usize },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    Mt,
    St,
    Lm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub task: Task,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Output channels of each VGG block (two 3×3 convolutions + 2×2 pool).
    pub vgg_channels: Vec<usize>,
    pub feat_dim: usize,
    /// Output vocabulary (decoder, CTC head, LM).
    pub vocab_size: usize,
    /// Input vocabulary of text encoders.
    pub src_vocab_size: usize,
    /// Blocks of the auxiliary text encoder of ST models.
    pub mt_enc_blocks: usize,
    pub dropout: f64,
    pub lm_units: usize,
    pub lm_layers: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            task: Task::Asr,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            enc_blocks: 4,
            dec_blocks: 2,
            vgg_channels: vec![64, 128],
            feat_dim: 83,
            vocab_size: 0,
            src_vocab_size: 0,
            mt_enc_blocks: 2,
            dropout: 0.1,
            lm_units: 64,
            lm_layers: 2,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetworkError::InvalidConfig(m.to_string()));
        if self.vocab_size < 3 {
            return bad("vocab_size must cover blank, unk and sos/eos");
        }
        if self.task == Task::Lm {
            if self.lm_units == 0 || self.lm_layers == 0 {
                return bad("LM needs lm_units ≥ 1 and lm_layers ≥ 1");
            }
            return Ok(());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return bad("enc_blocks and dec_blocks must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.has_speech_encoder() && (self.vgg_channels.is_empty() || self.vgg_channels.contains(&0) || self.feat_dim == 0) {
            return bad("speech encoders need nonzero vgg_channels and feat_dim");
        }
        if self.uses_text_encoder() && self.src_vocab_size < 3 {
            return bad("text encoders need src_vocab_size ≥ 3");
        }
        Ok(())
    }

    pub fn has_speech_encoder(&self) -> bool {
        matches!(self.task, Task::Asr | Task::St)
    }

    fn uses_text_encoder(&self) -> bool {
        matches!(self.task, Task::Mt | Task::St)
    }

    pub fn sos_eos(&self) -> usize {
        self.vocab_size - 1
    }

    /// Frequency bins left after the VGG pooling.
    pub fn pooled_feat_dim(&self) -> usize {
        self.vgg_channels.iter().fold(self.feat_dim, |f, _| f.div_ceil(2))
    }

    /// Encoder length for `frames` input frames.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        self.vgg_channels.iter().fold(frames, |t, _| t.div_ceil(2))
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
    /// LSTM bias: zero except 1.0 on the forget-gate slice of `units`.
    ForgetBias(usize),
}

struct Decl {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Decls(Vec<Decl>);

impl Decls {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(Decl { name, shape, init });
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{name}.weight"), vec![fan_in, fan_out], Init::Uniform((1.0 / fan_in as f64).sqrt()));
        self.push(format!("{name}.bias"), vec![fan_out], Init::Zeros);
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.push(format!("{name}.gamma"), vec![d], Init::Ones);
        self.push(format!("{name}.beta"), vec![d], Init::Zeros);
    }

    fn attention(&mut self, name: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), d, d);
        }
    }

    fn ffn(&mut self, name: &str, d: usize, d_ff: usize) {
        self.linear(&format!("{name}.fc1"), d, d_ff);
        self.linear(&format!("{name}.fc2"), d_ff, d);
    }

    fn encoder_blocks(&mut self, prefix: &str, n: usize, d: usize, d_ff: usize) {
        for i in 0..n {
            let b = format!("{prefix}.block{i}");
            self.norm(&format!("{b}.norm1"), d);
            self.attention(&format!("{b}.self_attn"), d);
            self.norm(&format!("{b}.norm2"), d);
            self.ffn(&format!("{b}.ffn"), d, d_ff);
        }
        self.norm(&format!("{prefix}.final_norm"), d);
    }

    fn embedding(&mut self, name: &str, vocab: usize, d: usize) {
        self.push(format!("{name}.weight"), vec![vocab, d], Init::Uniform((1.0 / d as f64).sqrt()));
    }
}

fn declarations(cfg: &ModelConfig) -> Vec<Decl> {
    let mut d = Decls::default();
    let (dm, ff) = (cfg.d_model, cfg.d_ff);
    if cfg.task == Task::Lm {
        let u = cfg.lm_units;
        d.embedding("lm.embed", cfg.vocab_size, u);
        for l in 0..cfg.lm_layers {
            d.push(format!("lm.lstm{l}.w_ih"), vec![u, 4 * u], Init::Uniform((1.0 / u as f64).sqrt()));
            d.push(format!("lm.lstm{l}.w_hh"), vec![u, 4 * u], Init::Uniform((1.0 / u as f64).sqrt()));
            d.push(format!("lm.lstm{l}.bias"), vec![4 * u], Init::ForgetBias(u));
        }
        d.linear("lm.output", u, cfg.vocab_size);
        return d.0;
    }
    if cfg.has_speech_encoder() {
        let mut c_in = 1;
        for (b, &c) in cfg.vgg_channels.iter().enumerate() {
            for (j, ci) in [c_in, c].into_iter().enumerate() {
                let fan_in = ci * 9;
                d.push(
                    format!("encoder.vgg.{b}.conv{j}.weight"),
                    vec![c, ci, 3, 3],
                    Init::Uniform((1.0 / fan_in as f64).sqrt()),
                );
                d.push(format!("encoder.vgg.{b}.conv{j}.bias"), vec![c], Init::Zeros);
            }
            c_in = c;
        }
        d.linear("encoder.input", c_in * cfg.pooled_feat_dim(), dm);
    } else {
        d.embedding("encoder.embed", cfg.src_vocab_size, dm);
    }
    d.encoder_blocks("encoder", cfg.enc_blocks, dm, ff);

    d.embedding("decoder.embed", cfg.vocab_size, dm);
    for i in 0..cfg.dec_blocks {
        let b = format!("decoder.block{i}");
        d.norm(&format!("{b}.norm1"), dm);
        d.attention(&format!("{b}.self_attn"), dm);
        d.norm(&format!("{b}.norm2"), dm);
        d.attention(&format!("{b}.src_attn"), dm);
        d.norm(&format!("{b}.norm3"), dm);
        d.ffn(&format!("{b}.ffn"), dm, ff);
    }
    d.norm("decoder.final_norm", dm);
    d.push("decoder.output.bias".into(), vec![cfg.vocab_size], Init::Zeros);

    if cfg.has_speech_encoder() {
        d.linear("ctc", dm, cfg.vocab_size);
    }
    if cfg.task == Task::St {
        d.embedding("mt_encoder.embed", cfg.src_vocab_size, dm);
        d.encoder_blocks("mt_encoder", cfg.mt_enc_blocks, dm, ff);
    }
    d.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Sorted by fully qualified name.
    pub params: BTreeMap<String, Param>,
}

impl Model {
    /// Freshly initialized model; every parameter draws from its own stream
    /// seeded by `config.seed` and its name.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for decl in declarations(&config) {
            let n: usize = decl.shape.iter().product();
            let data = match decl.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(a) => {
                    let mut rng = seeded(derive(config.seed, &decl.name));
                    (0..n).map(|_| rng.gen_range(-a..=a)).collect()
                }
                Init::ForgetBias(u) => (0..n).map(|i| if (u..2 * u).contains(&i) { 1.0 } else { 0.0 }).collect(),
            };
            params.insert(decl.name, Param { shape: decl.shape, data });
        }
        Ok(Model { config, params })
    }

    /// Model from an existing table, checked against the config's layout.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Param>) -> Result<Model> {
        config.validate()?;
        let decls = declarations(&config);
        if decls.len() != params.len() {
            return Err(NetworkError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                decls.len(),
                params.len()
            )));
        }
        for decl in decls {
            match params.get(&decl.name) {
                None => return Err(NetworkError::MissingParam(decl.name)),
                Some(p) if p.shape != decl.shape || p.data.len() != decl.shape.iter().product::<usize>() => {
                    return Err(NetworkError::InvalidConfig(format!(
                        "{} has shape {:?}, expected {:?}",
                        decl.name, p.shape, decl.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Model { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn bind(&self, trainable: bool) -> Bound {
        let tensors = self
            .params
            .iter()
            .map(|(name, p)| {
                let t = if trainable {
                    Tensor::param(p.data.clone(), &p.shape)
                } else {
                    Tensor::from_vec(p.data.clone(), &p.shape)
                };
                (name.clone(), t.expect("parameter shapes are validated"))
            })
            .collect();
        Bound {
            config: self.config.clone(),
            tensors,
        }
    }
}

/// Parameters of one model wrapped as tensors for a forward pass.
pub struct Bound {
    pub config: ModelConfig,
    tensors: HashMap<String, Tensor>,
}

impl Bound {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| NetworkError::MissingParam(name.to_string()))
    }

    /// Substitutes one parameter (same shape), e.g. to probe gradients.
    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.tensors.get_mut(name).ok_or_else(|| NetworkError::MissingParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(NetworkError::Tensor(TensorError::ShapeMismatch {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: t.shape().to_vec(),
            }));
        }
        *slot = t;
        Ok(())
    }

    /// Accumulated gradients by name; zeros for untouched parameters.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect()
    }
}

/// Training or evaluation behaviour of a forward pass. Each dropout site
/// gets its own seed derived from the pass seed and a running counter.
pub struct Mode {
    train: bool,
    seed: u64,
    counter: Cell<u64>,
}

impl Mode {
    pub fn eval() -> Mode {
        Mode {
            train: false,
            seed: 0,
            counter: Cell::new(0),
        }
    }

    pub fn train(seed: u64) -> Mode {
        Mode {
            train: true,
            seed,
            counter: Cell::new(0),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p == 0.0 {
            return Ok(x.clone());
        }
        let i = self.counter.get();
        self.counter.set(i + 1);
        Ok(x.dropout(p, derive_index(self.seed, "dropout", i), true)?)
    }
}

/// Right-pads `seqs` with `pad` into a flat `B×L` buffer.
pub fn pad_ids(seqs: &[Vec<usize>], pad: usize) -> (Vec<usize>, usize) {
    let l = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(seqs.len() * l);
    for s in seqs {
        out.extend_from_slice(s);
        out.extend(std::iter::repeat(pad).take(l - s.len()));
    }
    (out, l)
}
