//! Vector-quantized password transformer.
//!
//! A bidirectional encoder maps each token of a framed password to a small
//! latent, which is snapped to the nearest codebook entry. A causal decoder
//! reads the quantized latents and predicts, at position `i`, token `i + 1`.
//! Generation samples code sequences from a separate autoregressive model
//! over codebook indices and decodes them greedily; the encoder is then
//! unused.
//!
//! Parameter names:
//!
//! | name                 | shape            |
//! |----------------------|------------------|
//! | `enc.wte`            | `[258, d]`       |
//! | `enc.wpe`, `dec.wpe` | `[max_len+2, d]` |
//! | `enc.*`, `dec.*`     | transformer stacks |
//! | `down.w` / `down.b`  | `[d, k]` / `[k]` |
//! | `up.w` / `up.b`      | `[k, d]` / `[d]` |
//! | `lm_head.w`          | `[d, 258]`       |

use std::collections::BTreeMap;

use crate::corpus::{Corpus, TrainingView};
use crate::gpt::{
    self, run_training, sample_ids, GptConfig, GptError, GptModel, LoopSpec, SampleOpts,
    StepOutput, TrainReport,
};
use crate::nn::transformer::{self, DropoutCtx, StackSpec};
use crate::nn::{AdamWConfig, Graph, NnError, ParamSet, Tensor, Var};
use crate::rng::StreamRng;
use crate::tokenizer::{encode, BOS, EOS, VOCAB_SIZE};

#[derive(Debug, thiserror::Error)]
pub enum VqtError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gpt(#[from] GptError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqtConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    /// Weight of the commitment term.
    pub commitment: f64,
    pub ema_decay: f64,
    /// Additive smoothing of EMA cluster sizes.
    pub ema_eps: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub adamw: AdamWConfig,
    pub grad_clip: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for VqtConfig {
    fn default() -> Self {
        VqtConfig {
            d_model: 768,
            heads: 12,
            enc_layers: 8,
            dec_layers: 8,
            max_len: 16,
            latent_dim: 10,
            codebook_size: 300,
            commitment: 0.25,
            ema_decay: 0.99,
            ema_eps: 1e-5,
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

impl VqtConfig {
    pub fn context(&self) -> usize {
        self.max_len + 2
    }

    fn stack(&self, prefix: &str, layers: usize, causal: bool) -> StackSpec {
        StackSpec {
            prefix: prefix.into(),
            d_model: self.d_model,
            heads: self.heads,
            layers,
            causal,
        }
    }

    pub fn encoder(&self) -> StackSpec {
        self.stack("enc", self.enc_layers, false)
    }

    pub fn decoder(&self) -> StackSpec {
        self.stack("dec", self.dec_layers, true)
    }

    pub fn validate(&self) -> Result<(), VqtError> {
        let bad = |m: String| Err(VqtError::Config(m));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.codebook_size < 2 || self.latent_dim == 0 {
            return bad("codebook needs at least 2 entries of positive dimension".into());
        }
        if self.max_len == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("max_len, epochs and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(0.0..1.0).contains(&self.dropout) {
            return bad("ema_decay and dropout must lie in [0, 1)".into());
        }
        if self.commitment < 0.0 || self.ema_eps < 0.0 {
            return bad("commitment and ema_eps must be non-negative".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let a = &self.adamw;
        [
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("max_len", self.max_len.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("commitment", self.commitment.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("ema_eps", self.ema_eps.to_string()),
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

    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<bool, String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.trim()
                .parse()
                .map_err(|_| format!("bad value {v:?} for {key}"))
        }
        match key {
            "d_model" => self.d_model = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "enc_layers" => self.enc_layers = p(key, value)?,
            "dec_layers" => self.dec_layers = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "latent_dim" => self.latent_dim = p(key, value)?,
            "codebook_size" => self.codebook_size = p(key, value)?,
            "commitment" => self.commitment = p(key, value)?,
            "ema_decay" => self.ema_decay = p(key, value)?,
            "ema_eps" => self.ema_eps = p(key, value)?,
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
}

/// Codebook entries with the running statistics of the EMA k-means update.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `[N, k]`
    pub entries: Tensor<f32>,
    /// `[N]` smoothed assignment counts.
    pub ema_count: Tensor<f32>,
    /// `[N, k]` smoothed sums of assigned latents.
    pub ema_sum: Tensor<f32>,
}

impl Codebook {
    pub fn from_entries(entries: Tensor<f32>) -> Self {
        let n = entries.rows();
        Codebook {
            ema_count: Tensor::filled(&[n], 1.0),
            ema_sum: entries.clone(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    /// Nearest entry by Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, z: &[f32]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.len() {
            let d: f64 = self
                .entries
                .row(k)
                .iter()
                .zip(z)
                .map(|(&e, &v)| {
                    let t = e as f64 - v as f64;
                    t * t
                })
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Codes for every row of a `[rows, k]` latent buffer.
    pub fn quantize(&self, latents: &[f32]) -> Vec<usize> {
        latents
            .chunks_exact(self.dim())
            .map(|z| self.nearest(z).0)
            .collect()
    }

    /// `[rows, k]` tensor of the entries at `codes`.
    pub fn lookup(&self, codes: &[usize]) -> Tensor<f32> {
        let k = self.dim();
        let mut data = Vec::with_capacity(codes.len() * k);
        for &c in codes {
            data.extend_from_slice(self.entries.row(c));
        }
        Tensor::from_vec(&[codes.len(), k], data).expect("consistent shape")
    }

    /// One EMA k-means step from a batch of latents and their assignments.
    pub fn ema_update(&mut self, latents: &[f32], codes: &[usize], decay: f64, eps: f64) {
        let (n, k) = (self.len(), self.dim());
        let mut counts = vec![0f64; n];
        let mut sums = vec![0f64; n * k];
        for (z, &c) in latents.chunks_exact(k).zip(codes) {
            counts[c] += 1.0;
            for (s, &v) in sums[c * k..(c + 1) * k].iter_mut().zip(z) {
                *s += v as f64;
            }
        }
        let ema_c = self.ema_count.data_mut();
        for (e, &c) in ema_c.iter_mut().zip(&counts) {
            *e = (decay * *e as f64 + (1.0 - decay) * c) as f32;
        }
        let ema_s = self.ema_sum.data_mut();
        for (e, &s) in ema_s.iter_mut().zip(&sums) {
            *e = (decay * *e as f64 + (1.0 - decay) * s) as f32;
        }
        let total: f64 = self.ema_count.data().iter().map(|&c| c as f64).sum();
        let entries = self.entries.data_mut();
        for c in 0..n {
            let size = (self.ema_count.data()[c] as f64 + eps) / (total + n as f64 * eps) * total;
            if size > 0.0 {
                for j in 0..k {
                    entries[c * k + j] = (self.ema_sum.data()[c * k + j] as f64 / size) as f32;
                }
            }
        }
    }
}

/// Unused-entry statistics of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeadCodeReport {
    pub unused: usize,
    pub total: usize,
}

impl DeadCodeReport {
    pub fn from_usage(usage: &[u64]) -> Self {
        DeadCodeReport {
            unused: usage.iter().filter(|&&u| u == 0).count(),
            total: usage.len(),
        }
    }

    pub fn fraction(&self) -> f64 {
        self.unused as f64 / self.total.max(1) as f64
    }

    /// Half or more of the codebook went unused.
    pub fn fires(&self) -> bool {
        2 * self.unused >= self.total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqtModel {
    pub config: VqtConfig,
    pub params: ParamSet<f32>,
    pub codebook: Codebook,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VqtTrainReport {
    pub train: TrainReport,
    pub dead_codes: Vec<DeadCodeReport>,
}

pub fn param_shapes(cfg: &VqtConfig) -> Vec<(String, Vec<usize>)> {
    let (d, k, ctx) = (cfg.d_model, cfg.latent_dim, cfg.context());
    let mut out = vec![
        ("enc.wte".to_string(), vec![VOCAB_SIZE, d]),
        ("enc.wpe".to_string(), vec![ctx, d]),
    ];
    out.extend(transformer::stack_shapes(&cfg.encoder()));
    out.push(("down.w".into(), vec![d, k]));
    out.push(("down.b".into(), vec![k]));
    out.push(("up.w".into(), vec![k, d]));
    out.push(("up.b".into(), vec![d]));
    out.push(("dec.wpe".into(), vec![ctx, d]));
    out.extend(transformer::stack_shapes(&cfg.decoder()));
    out.push(("lm_head.w".into(), vec![d, VOCAB_SIZE]));
    out
}

impl VqtModel {
    /// Fresh parameters; the codebook starts as unit-scale noise until the
    /// trainer reseeds it from encoder latents.
    pub fn init(config: VqtConfig) -> Result<Self, VqtError> {
        config.validate()?;
        let mut rng = StreamRng::stream(config.seed, 0x7a17);
        let (d, k, ctx, std) = (
            config.d_model,
            config.latent_dim,
            config.context(),
            config.init_std,
        );
        let mut p = ParamSet::new();
        p.insert(
            "enc.wte",
            transformer::normal_tensor(&[VOCAB_SIZE, d], std, &mut rng),
        )?;
        p.insert(
            "enc.wpe",
            transformer::normal_tensor(&[ctx, d], std, &mut rng),
        )?;
        transformer::init_stack(&mut p, &config.encoder(), std, &mut rng)?;
        p.insert("down.w", transformer::normal_tensor(&[d, k], std, &mut rng))?;
        p.insert("down.b", Tensor::zeros(&[k]))?;
        p.insert("up.w", transformer::normal_tensor(&[k, d], std, &mut rng))?;
        p.insert("up.b", Tensor::zeros(&[d]))?;
        p.insert(
            "dec.wpe",
            transformer::normal_tensor(&[ctx, d], std, &mut rng),
        )?;
        transformer::init_stack(&mut p, &config.decoder(), std, &mut rng)?;
        p.insert(
            "lm_head.w",
            transformer::normal_tensor(&[d, VOCAB_SIZE], std, &mut rng),
        )?;
        let codebook = Codebook::from_entries(transformer::normal_tensor(
            &[config.codebook_size, k],
            1.0,
            &mut rng,
        ));
        Ok(VqtModel {
            config,
            params: p,
            codebook,
        })
    }

    pub fn from_parts(
        config: VqtConfig,
        params: ParamSet<f32>,
        codebook: Codebook,
    ) -> Result<Self, VqtError> {
        config.validate()?;
        gpt::check_shapes(&params, &param_shapes(&config))?;
        let (n, k) = (config.codebook_size, config.latent_dim);
        if codebook.entries.shape() != [n, k]
            || codebook.ema_sum.shape() != [n, k]
            || codebook.ema_count.shape() != [n]
        {
            return Err(VqtError::Config(format!(
                "codebook shapes do not match {n} x {k}"
            )));
        }
        Ok(VqtModel {
            config,
            params,
            codebook,
        })
    }

    fn check_seq(&self, seqs: &[&[u32]]) -> Result<usize, VqtError> {
        let len = seqs.first().map(|s| s.len()).unwrap_or(0);
        if len < 2 || len > self.config.context() || seqs.iter().any(|s| s.len() != len) {
            return Err(VqtError::Config(
                "encoder batches need equal-length framed sequences".into(),
            ));
        }
        Ok(len)
    }
}

fn positions(batch: usize, seq: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| 0..seq).collect()
}

/// Encoder latents `[batch * seq, k]` for equal-length framed sequences.
fn encode_latents(
    g: &mut Graph<f32>,
    params: &ParamSet<f32>,
    cfg: &VqtConfig,
    ids: &[usize],
    batch: usize,
    seq: usize,
    dropout: &mut DropoutCtx<'_>,
) -> Result<Var, VqtError> {
    let wte = g.param_named(params, "enc.wte")?;
    let x = g.embedding(wte, ids)?;
    let wpe = g.param_named(params, "enc.wpe")?;
    let pos = g.embedding(wpe, &positions(batch, seq))?;
    let mut x = g.add(x, pos)?;
    if let Some((rate, rng)) = dropout {
        x = g.dropout(x, *rate, rng);
    }
    let h = transformer::stack_forward(g, params, &cfg.encoder(), x, batch, seq, dropout)?;
    let (w, b) = (
        g.param_named(params, "down.w")?,
        g.param_named(params, "down.b")?,
    );
    Ok(g.linear(h, w, Some(b))?)
}

/// Decoder logits `[batch * seq, 258]` from quantized latents.
fn decode_logits(
    g: &mut Graph<f32>,
    params: &ParamSet<f32>,
    cfg: &VqtConfig,
    zq: Var,
    batch: usize,
    seq: usize,
    dropout: &mut DropoutCtx<'_>,
) -> Result<Var, VqtError> {
    let (w, b) = (
        g.param_named(params, "up.w")?,
        g.param_named(params, "up.b")?,
    );
    let u = g.linear(zq, w, Some(b))?;
    let wpe = g.param_named(params, "dec.wpe")?;
    let pos = g.embedding(wpe, &positions(batch, seq))?;
    let mut x = g.add(u, pos)?;
    if let Some((rate, rng)) = dropout {
        x = g.dropout(x, *rate, rng);
    }
    let h = transformer::stack_forward(g, params, &cfg.decoder(), x, batch, seq, dropout)?;
    let head = g.param_named(params, "lm_head.w")?;
    Ok(g.matmul(h, head)?)
}

/// Training loss graph for one bucket of equal-length sequences. Returns
/// the graph, the loss node, the latents, their codes and the number of
/// predicted tokens.
pub struct VqtForward {
    pub graph: Graph<f32>,
    pub loss: Var,
    pub latents: Vec<f32>,
    pub codes: Vec<usize>,
    pub tokens: usize,
    pub latent_var: Var,
}

pub fn vqt_loss(
    params: &ParamSet<f32>,
    codebook: &Codebook,
    cfg: &VqtConfig,
    seqs: &[&[u32]],
    dropout: &mut DropoutCtx<'_>,
) -> Result<VqtForward, VqtError> {
    let seq = seqs.first().map(|s| s.len()).unwrap_or(0);
    if seq < 2 || seqs.iter().any(|s| s.len() != seq) {
        return Err(VqtError::Config(
            "loss batches need equal-length framed sequences".into(),
        ));
    }
    let batch = seqs.len();
    let ids: Vec<usize> = seqs
        .iter()
        .flat_map(|s| s.iter().map(|&t| t as usize))
        .collect();
    let mut g = Graph::new();
    let z = encode_latents(&mut g, params, cfg, &ids, batch, seq, dropout)?;
    let latents = g.value(z).data().to_vec();
    let codes = codebook.quantize(&latents);
    let q = codebook.lookup(&codes);
    let zq = g.straight_through(z, q.clone())?;
    let commit = g.sq_dist_mean(z, q)?;
    let logits = decode_logits(&mut g, params, cfg, zq, batch, seq, dropout)?;
    let targets: Vec<Option<usize>> = seqs
        .iter()
        .flat_map(|s| (0..seq).map(move |i| s.get(i + 1).map(|&t| t as usize)))
        .collect();
    let tokens = targets.iter().filter(|t| t.is_some()).count();
    let ce = g.cross_entropy(logits, &targets)?;
    let commit = g.scale(commit, cfg.commitment as f32);
    let loss = g.add(ce, commit)?;
    Ok(VqtForward {
        graph: g,
        loss,
        latents,
        codes,
        tokens,
        latent_var: z,
    })
}

/// Batches of equal-length sequences: each length bucket is shuffled and
/// chunked, then the batch order is shuffled.
pub fn bucketed_plan(
    lengths: &[usize],
    batch_size: usize,
    epoch: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in lengths.iter().enumerate() {
        buckets.entry(l).or_default().push(i);
    }
    let mut rng = StreamRng::stream(seed, 0xb0c4_0000 + epoch as u64);
    let mut batches = Vec::new();
    for (_, mut idx) in buckets {
        rng.shuffle(&mut idx);
        batches.extend(idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

fn encode_corpus(
    corpus: &Corpus,
    max_len: usize,
    view: TrainingView,
) -> Result<Vec<Vec<u32>>, VqtError> {
    Ok(corpus
        .view(view)
        .into_iter()
        .map(|pw| encode(pw, max_len).map(|t| t.into_ids()))
        .collect::<Result<Vec<_>, _>>()?)
}

/// Seeds the codebook from latents of the first planned batch: distinct
/// rows when there are enough, otherwise draws with replacement plus a
/// little jitter.
fn seed_codebook(
    model: &mut VqtModel,
    first: &[&[u32]],
    rng: &mut StreamRng,
) -> Result<(), VqtError> {
    let cfg = &model.config;
    let seq = model.check_seq(first)?;
    let ids: Vec<usize> = first
        .iter()
        .flat_map(|s| s.iter().map(|&t| t as usize))
        .collect();
    let mut g = Graph::new();
    let z = encode_latents(
        &mut g,
        &model.params,
        cfg,
        &ids,
        first.len(),
        seq,
        &mut None,
    )?;
    let lat = g.value(z);
    let (rows, k, n) = (lat.rows(), cfg.latent_dim, cfg.codebook_size);
    let mut data = Vec::with_capacity(n * k);
    if rows >= n {
        let mut order: Vec<usize> = (0..rows).collect();
        rng.shuffle(&mut order);
        for &r in &order[..n] {
            data.extend_from_slice(lat.row(r));
        }
    } else {
        let scale =
            (lat.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / lat.len() as f64).sqrt();
        for _ in 0..n {
            let r = rng.below(rows as u64) as usize;
            for &v in lat.row(r) {
                data.push(v + (rng.normal() * 1e-2 * scale.max(1e-6)) as f32);
            }
        }
    }
    model.codebook = Codebook::from_entries(Tensor::from_vec(&[n, k], data)?);
    Ok(())
}

/// Trains a fresh model on a corpus view.
pub fn train_vqt(
    corpus: &Corpus,
    cfg: &VqtConfig,
    view: TrainingView,
) -> Result<(VqtModel, VqtTrainReport), VqtError> {
    if corpus.max_len > cfg.max_len {
        return Err(VqtError::Config(format!(
            "corpus max_len {} exceeds model max_len {}",
            corpus.max_len, cfg.max_len
        )));
    }
    let seqs = encode_corpus(corpus, cfg.max_len, view)?;
    let mut model = VqtModel::init(cfg.clone())?;
    let report = train_vqt_sequences(&mut model, &seqs)?;
    Ok((model, report))
}

/// Trains `model` in place on framed byte sequences.
pub fn train_vqt_sequences(
    model: &mut VqtModel,
    seqs: &[Vec<u32>],
) -> Result<VqtTrainReport, VqtError> {
    if seqs.is_empty() {
        return Err(GptError::EmptyTraining.into());
    }
    let cfg = model.config.clone();
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let plans: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
        .map(|e| bucketed_plan(&lengths, cfg.batch_size, e, cfg.seed))
        .collect();
    {
        let first: Vec<&[u32]> = plans[0][0].iter().map(|&i| seqs[i].as_slice()).collect();
        let mut rng = StreamRng::stream(cfg.seed, 0xc0de_b00c);
        seed_codebook(model, &first, &mut rng)?;
    }
    let spec = LoopSpec {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        base_lr: cfg.base_lr,
        adamw: cfg.adamw,
        grad_clip: cfg.grad_clip,
        seed: cfg.seed,
    };
    let steps_per_epoch: Vec<u64> = plans.iter().map(|p| p.len() as u64).collect();
    let n_codes = cfg.codebook_size;
    let mut usage = vec![0u64; n_codes];
    let mut dead = Vec::new();
    let mut epoch = 0usize;
    let mut epoch_end = steps_per_epoch[0];
    let codebook = &mut model.codebook;
    let train = run_training::<VqtError>(
        &mut model.params,
        &spec,
        &plans,
        |params, batch, step| {
            let rows: Vec<&[u32]> = batch.iter().map(|&i| seqs[i].as_slice()).collect();
            let mut rng = StreamRng::stream(cfg.seed, 0xd40f_0000_0000 + step);
            let mut drop = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut rng));
            let mut f = vqt_loss(params, codebook, &cfg, &rows, &mut drop)?;
            let loss = f.graph.value(f.loss).item() as f64;
            let grads = f.graph.backward(f.loss, params)?;
            for &c in &f.codes {
                usage[c] += 1;
            }
            codebook.ema_update(&f.latents, &f.codes, cfg.ema_decay, cfg.ema_eps);
            if step + 1 == epoch_end {
                let r = DeadCodeReport::from_usage(&usage);
                if r.fires() {
                    log::warn!(
                        "dead codebook: {} of {} entries unused in epoch {}",
                        r.unused,
                        r.total,
                        epoch + 1
                    );
                }
                dead.push(r);
                usage.iter_mut().for_each(|u| *u = 0);
                epoch += 1;
                if epoch < steps_per_epoch.len() {
                    epoch_end += steps_per_epoch[epoch];
                }
            }
            Ok(StepOutput {
                loss,
                tokens: f.tokens,
                grads,
            })
        },
        |_, _| {},
    )?;
    if model.codebook.entries.data().iter().any(|v| !v.is_finite()) {
        return Err(GptError::NonFiniteLoss {
            step: train.steps,
            loss: f64::NAN,
        }
        .into());
    }
    Ok(VqtTrainReport {
        train,
        dead_codes: dead,
    })
}

fn framed(model: &VqtModel, password: &[u8]) -> Result<Vec<u32>, VqtError> {
    Ok(encode(password, model.config.max_len)?.into_ids())
}

/// Code indices for equal-length framed sequences, `[batch][seq]`.
pub fn encode_code_batch(model: &VqtModel, seqs: &[&[u32]]) -> Result<Vec<Vec<u32>>, VqtError> {
    let seq = model.check_seq(seqs)?;
    let ids: Vec<usize> = seqs
        .iter()
        .flat_map(|s| s.iter().map(|&t| t as usize))
        .collect();
    let mut g = Graph::new();
    let z = encode_latents(
        &mut g,
        &model.params,
        &model.config,
        &ids,
        seqs.len(),
        seq,
        &mut None,
    )?;
    let codes = model.codebook.quantize(g.value(z).data());
    Ok(codes
        .chunks(seq)
        .map(|c| c.iter().map(|&x| x as u32).collect())
        .collect())
}

/// One code per token of the framed password, sentinels included.
pub fn encode_codes(model: &VqtModel, password: &[u8]) -> Result<Vec<u32>, VqtError> {
    let s = framed(model, password)?;
    Ok(encode_code_batch(model, &[&s])?.remove(0))
}

/// Greedy decode of code sequences: position `i` emits the most likely
/// non-BOS token; decoding stops at EOS or after `max_len` bytes.
pub fn decode_codes(model: &VqtModel, code_seqs: &[Vec<u32>]) -> Result<Vec<Vec<u8>>, VqtError> {
    let cfg = &model.config;
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in code_seqs.iter().enumerate() {
        if c.len() > cfg.context() {
            return Err(VqtError::Config(format!(
                "{} codes exceed context {}",
                c.len(),
                cfg.context()
            )));
        }
        if let Some(&bad) = c.iter().find(|&&x| x as usize >= cfg.codebook_size) {
            return Err(VqtError::Config(format!(
                "code {bad} outside codebook of {}",
                cfg.codebook_size
            )));
        }
        by_len.entry(c.len()).or_default().push(i);
    }
    let mut out = vec![Vec::new(); code_seqs.len()];
    for (len, idxs) in by_len {
        if len == 0 {
            continue;
        }
        for chunk in idxs.chunks(256) {
            let codes: Vec<usize> = chunk
                .iter()
                .flat_map(|&i| code_seqs[i].iter().map(|&c| c as usize))
                .collect();
            let mut g = Graph::new();
            let q = g.constant(model.codebook.lookup(&codes));
            let logits = decode_logits(&mut g, &model.params, cfg, q, chunk.len(), len, &mut None)?;
            let lv = g.value(logits);
            for (r, &i) in chunk.iter().enumerate() {
                let mut pw = Vec::new();
                for t in 0..len {
                    let row = lv.row(r * len + t);
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if j != BOS as usize && v > row[best] {
                            best = j;
                        }
                    }
                    if best == EOS as usize || pw.len() >= cfg.max_len {
                        break;
                    }
                    pw.push(best as u8);
                }
                out[i] = pw;
            }
        }
    }
    Ok(out)
}

/// Encode, quantize and greedily decode.
pub fn reconstruct(model: &VqtModel, password: &[u8]) -> Result<Vec<u8>, VqtError> {
    let codes = encode_codes(model, password)?;
    Ok(decode_codes(model, &[codes])?.remove(0))
}

/// Reconstructs many passwords, batching by length.
pub fn reconstruct_many(model: &VqtModel, passwords: &[&[u8]]) -> Result<Vec<Vec<u8>>, VqtError> {
    let seqs = passwords
        .iter()
        .map(|p| framed(model, p))
        .collect::<Result<Vec<_>, _>>()?;
    let codes = code_sequences(model, &seqs)?;
    decode_codes(model, &codes)
}

fn code_sequences(model: &VqtModel, seqs: &[Vec<u32>]) -> Result<Vec<Vec<u32>>, VqtError> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        by_len.entry(s.len()).or_default().push(i);
    }
    let mut out = vec![Vec::new(); seqs.len()];
    for (_, idxs) in by_len {
        for chunk in idxs.chunks(256) {
            let rows: Vec<&[u32]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            for (c, &i) in encode_code_batch(model, &rows)?.into_iter().zip(chunk) {
                out[i] = c;
            }
        }
    }
    Ok(out)
}

/// Autoregressive model over code indices; ids `N` and `N + 1` are its
/// BOS and EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct CodesModel {
    pub model: GptModel,
}

impl CodesModel {
    pub fn codebook_size(&self) -> usize {
        self.model.config.vocab - 2
    }
}

/// Config of the codes model implied by a quantized model and a template
/// config (vocabulary and length are overridden).
pub fn codes_config(vqt: &VqtConfig, base: &GptConfig) -> GptConfig {
    GptConfig {
        vocab: vqt.codebook_size + 2,
        max_len: vqt.max_len + 2,
        ..base.clone()
    }
}

/// Framed code sequences `[BOS', c_0 .. c_{L-1}, EOS']` for a corpus view.
pub fn corpus_code_sequences(
    vqt: &VqtModel,
    corpus: &Corpus,
    view: TrainingView,
) -> Result<Vec<Vec<u32>>, VqtError> {
    let seqs = encode_corpus(corpus, vqt.config.max_len, view)?;
    let n = vqt.config.codebook_size as u32;
    Ok(code_sequences(vqt, &seqs)?
        .into_iter()
        .map(|c| {
            let mut s = Vec::with_capacity(c.len() + 2);
            s.push(n);
            s.extend(c);
            s.push(n + 1);
            s
        })
        .collect())
}

pub fn train_codes_model(
    corpus: &Corpus,
    vqt: &VqtModel,
    cfg: &GptConfig,
    view: TrainingView,
) -> Result<(CodesModel, TrainReport), VqtError> {
    let seqs = corpus_code_sequences(vqt, corpus, view)?;
    let mut model = GptModel::init(codes_config(&vqt.config, cfg))?;
    let report = gpt::train_sequences(&mut model, &seqs)?;
    Ok((CodesModel { model }, report))
}

fn check_pair(vqt: &VqtModel, codes: &CodesModel) -> Result<(), VqtError> {
    if codes.codebook_size() != vqt.config.codebook_size
        || codes.model.config.max_len > vqt.config.context()
    {
        return Err(VqtError::Config(format!(
            "codes model over {} codes (max_len {}) does not fit a codebook of {} (context {})",
            codes.codebook_size(),
            codes.model.config.max_len,
            vqt.config.codebook_size,
            vqt.config.context()
        )));
    }
    Ok(())
}

/// Samples `first..first + n`: codes from the codes model, then greedy
/// decoding.
pub fn sample_vqt_range(
    vqt: &VqtModel,
    codes: &CodesModel,
    opts: &SampleOpts,
    first: u64,
    n: usize,
) -> Result<Vec<Vec<u8>>, VqtError> {
    check_pair(vqt, codes)?;
    let seqs = sample_ids(&codes.model, opts, first, n)?;
    decode_codes(vqt, &seqs)
}

pub fn sample_vqt_many(
    vqt: &VqtModel,
    codes: &CodesModel,
    opts: &SampleOpts,
    n: usize,
) -> Result<Vec<Vec<u8>>, VqtError> {
    sample_vqt_range(vqt, codes, opts, 0, n)
}

pub fn sample_vqt(
    vqt: &VqtModel,
    codes: &CodesModel,
    opts: &SampleOpts,
) -> Result<Vec<u8>, VqtError> {
    Ok(sample_vqt_many(vqt, codes, opts, 1)?.remove(0))
}
