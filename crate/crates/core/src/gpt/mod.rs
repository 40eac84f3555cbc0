//! Decoder-only transformer over token sequences framed by BOS/EOS.
//!
//! The same model serves passwords (vocabulary of 256 bytes plus the two
//! sentinels) and code sequences of a vector-quantized model (vocabulary of
//! codebook indices plus sentinels). The last two ids are always BOS and EOS.

mod infer;
mod sample;
mod train;

pub use infer::{
    brute_force_logprob, entropy_profile, log_prob, log_softmax, log_sum_exp, next_distribution,
    score_passwords, score_sequences, Decoder, SeqScore,
};
pub use sample::{
    pick_index, sample, sample_ids, sample_many, sample_range, sampling_distribution, SampleOpts,
};
pub use train::{
    batch_plan, run_training, train, train_sequences, LoopSpec, StepOutput, TrainReport,
};

use crate::nn::transformer::{self, DropoutCtx, StackSpec};
use crate::nn::{AdamWConfig, Graph, NnError, ParamSet, Scalar, Tensor, Var};
use crate::rng::StreamRng;
use crate::tokenizer::{TokenizerError, VOCAB_SIZE};

#[derive(Debug, thiserror::Error)]
pub enum GptError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("malformed prefix: {0}")]
    MalformedPrefix(String),
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),
    #[error("no training sequences")]
    EmptyTraining,
    #[error("invalid sampling options: {0}")]
    InvalidOpts(String),
}

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GptConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab: usize,
    /// Longest payload (without sentinels); the context holds `max_len + 2`.
    pub max_len: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub adamw: AdamWConfig,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for GptConfig {
    fn default() -> Self {
        GptConfig {
            d_model: 768,
            heads: 12,
            layers: 8,
            vocab: VOCAB_SIZE,
            max_len: 16,
            dropout: 0.1,
            batch_size: 256,
            epochs: 1,
            base_lr: 5e-5,
            adamw: AdamWConfig::default(),
            grad_clip: 1.0,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl GptConfig {
    pub fn context(&self) -> usize {
        self.max_len + 2
    }

    pub fn bos(&self) -> u32 {
        (self.vocab - 2) as u32
    }

    pub fn eos(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    pub fn stack(&self) -> StackSpec {
        StackSpec {
            prefix: "gpt".into(),
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<(), GptError> {
        let bad = |m: String| Err(GptError::Config(m));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.vocab < 3 {
            return bad(format!(
                "vocab {} leaves no room for symbols and sentinels",
                self.vocab
            ));
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!(
                "base_lr {} must be finite and non-negative",
                self.base_lr
            ));
        }
        Ok(())
    }

    /// Flat `key=value` view, in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let a = &self.adamw;
        [
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("vocab", self.vocab.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("beta1", a.beta1.to_string()),
            ("beta2", a.beta2.to_string()),
            ("adam_eps", a.eps.to_string()),
            ("weight_decay", a.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("init_std", self.init_std.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one field from its `to_kv` key. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<bool, String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.trim()
                .parse()
                .map_err(|_| format!("bad value {v:?} for {key}"))
        }
        match key {
            "d_model" => self.d_model = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "layers" => self.layers = p(key, value)?,
            "vocab" => self.vocab = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "base_lr" => self.base_lr = p(key, value)?,
            "beta1" => self.adamw.beta1 = p(key, value)?,
            "beta2" => self.adamw.beta2 = p(key, value)?,
            "adam_eps" => self.adamw.eps = p(key, value)?,
            "weight_decay" => self.adamw.weight_decay = p(key, value)?,
            "grad_clip" => self.grad_clip = p(key, value)?,
            "init_std" => self.init_std = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub(crate) fn loop_spec(&self) -> LoopSpec {
        LoopSpec {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            adamw: self.adamw,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GptModel {
    pub config: GptConfig,
    pub params: ParamSet<f32>,
}

/// `(name, shape)` of every parameter, in storage order.
pub fn param_shapes(cfg: &GptConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        ("wte".to_string(), vec![cfg.vocab, cfg.d_model]),
        ("wpe".to_string(), vec![cfg.context(), cfg.d_model]),
    ];
    out.extend(transformer::stack_shapes(&cfg.stack()));
    out.push(("lm_head.w".to_string(), vec![cfg.d_model, cfg.vocab]));
    out
}

impl GptModel {
    /// Fresh model with weights drawn from the config seed.
    pub fn init(config: GptConfig) -> Result<Self, GptError> {
        config.validate()?;
        let mut rng = StreamRng::stream(config.seed, 0x1a17);
        let std = config.init_std;
        let mut params = ParamSet::new();
        params.insert(
            "wte",
            transformer::normal_tensor(&[config.vocab, config.d_model], std, &mut rng),
        )?;
        params.insert(
            "wpe",
            transformer::normal_tensor(&[config.context(), config.d_model], std, &mut rng),
        )?;
        transformer::init_stack(&mut params, &config.stack(), std, &mut rng)?;
        params.insert(
            "lm_head.w",
            transformer::normal_tensor(&[config.d_model, config.vocab], std, &mut rng),
        )?;
        Ok(GptModel { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: GptConfig, params: ParamSet<f32>) -> Result<Self, GptError> {
        config.validate()?;
        check_shapes(&params, &param_shapes(&config))?;
        Ok(GptModel { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}

pub(crate) fn check_shapes(
    params: &ParamSet<f32>,
    shapes: &[(String, Vec<usize>)],
) -> Result<(), GptError> {
    if params.len() != shapes.len() {
        return Err(GptError::Config(format!(
            "expected {} parameter tensors, found {}",
            shapes.len(),
            params.len()
        )));
    }
    for (name, shape) in shapes {
        let t = params.get(name)?;
        if t.shape() != shape.as_slice() {
            return Err(GptError::Config(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Logits `[batch * seq, vocab]` for a padded batch of input ids.
pub fn forward_logits<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    cfg: &GptConfig,
    ids: &[usize],
    batch: usize,
    seq: usize,
    dropout: &mut DropoutCtx<'_>,
) -> Result<Var, GptError> {
    if seq > cfg.context() {
        return Err(GptError::Config(format!(
            "sequence of {seq} exceeds context {}",
            cfg.context()
        )));
    }
    let wte = g.param_named(params, "wte")?;
    let x = g.embedding(wte, ids)?;
    let wpe = g.param_named(params, "wpe")?;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let pos = g.embedding(wpe, &positions)?;
    let mut x = g.add(x, pos)?;
    if let Some((rate, rng)) = dropout {
        x = g.dropout(x, *rate, rng);
    }
    let h = transformer::stack_forward(g, params, &cfg.stack(), x, batch, seq, dropout)?;
    let head = g.param_named(params, "lm_head.w")?;
    Ok(g.matmul(h, head)?)
}

/// Teacher-forced next-token loss over a batch of framed sequences. Each
/// sequence is one row; rows are padded to the longest with ignored targets.
pub fn sequence_loss<F: Scalar>(
    params: &ParamSet<F>,
    cfg: &GptConfig,
    seqs: &[&[u32]],
    dropout: &mut DropoutCtx<'_>,
) -> Result<(Graph<F>, Var, usize), GptError> {
    let (ids, targets, batch, seq) = pack_batch(cfg, seqs)?;
    let mut g = Graph::new();
    let logits = forward_logits(&mut g, params, cfg, &ids, batch, seq, dropout)?;
    let count = targets.iter().filter(|t| t.is_some()).count();
    let loss = g.cross_entropy(logits, &targets)?;
    Ok((g, loss, count))
}

type Packed = (Vec<usize>, Vec<Option<usize>>, usize, usize);

pub(crate) fn pack_batch(cfg: &GptConfig, seqs: &[&[u32]]) -> Result<Packed, GptError> {
    let seq = seqs
        .iter()
        .map(|s| s.len())
        .max()
        .unwrap_or(0)
        .saturating_sub(1);
    if seqs.is_empty() || seq == 0 {
        return Err(GptError::MalformedSequence("empty batch".into()));
    }
    let eos = cfg.eos() as usize;
    let mut ids = Vec::with_capacity(seqs.len() * seq);
    let mut targets = Vec::with_capacity(seqs.len() * seq);
    for s in seqs {
        if s.len() < 2 || s.len() > cfg.context() {
            return Err(GptError::MalformedSequence(format!(
                "sequence of {} tokens for context {}",
                s.len(),
                cfg.context()
            )));
        }
        if let Some(&bad) = s.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(GptError::MalformedSequence(format!(
                "token {bad} outside vocabulary {}",
                cfg.vocab
            )));
        }
        for t in 0..seq {
            if t + 1 < s.len() {
                ids.push(s[t] as usize);
                targets.push(Some(s[t + 1] as usize));
            } else {
                ids.push(eos);
                targets.push(None);
            }
        }
    }
    Ok((ids, targets, seqs.len(), seq))
}

pub(crate) fn lm_head_rows(h: &[f32], d: usize, head: &Tensor<f32>, out: &mut [f32]) {
    transformer::linear_rows(h, d, head, None, out);
}
