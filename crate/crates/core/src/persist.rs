//! Checkpoints and run configuration files.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! | field | encoding |
//! |---|---|
//! | magic | `PWLM` |
//! | version | `u32`, currently 1 |
//! | kind | `u8`: 0 gpt, 1 vqt, 2 codes |
//! | config | `u32` byte length, then UTF-8 `key=value` lines |
//! | blocks | `u32` count, then per block: `u32` name length, name, `u32` rank, `u32` per dim, `f32` payload |
//! | checksum | `u64` FNV-1a 64 of every preceding byte |
//!
//! Blocks are written in parameter order. Quantized models append
//! `codebook.entries`, `codebook.ema_count` and `codebook.ema_sum`.
//!
//! # Run configuration
//!
//! Flat `key = value` text; `#` starts a comment. Keys are namespaced
//! (`gpt.`, `vqt.`, `codes.`, `sample.`, `split.`, `corpus.`, `synth.`,
//! `eval.`). [`RunConfig::to_text`] lists every key with its value.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::Path;

use crate::corpus::{LeakFormat, SplitSpec, TrainingView};
use crate::eval::EvalSettings;
use crate::gpt::{GptConfig, GptError, GptModel, SampleOpts};
use crate::nn::{ParamSet, Tensor};
use crate::synth::SynthSpec;
use crate::vqt::{Codebook, CodesModel, VqtConfig, VqtError, VqtModel};

pub const MAGIC: &[u8; 4] = b"PWLM";
pub const FORMAT_VERSION: u32 = 1;
const CODEBOOK_BLOCKS: [&str; 3] = ["codebook.entries", "codebook.ema_count", "codebook.ema_sum"];

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("checkpoint format version {0} is not supported (expected {FORMAT_VERSION})")]
    VersionUnsupported(u32),
    #[error("expected a {expected} checkpoint, found {found}")]
    KindMismatch {
        expected: ModelKind,
        found: ModelKind,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error(transparent)]
    Gpt(#[from] GptError),
    #[error(transparent)]
    Vqt(#[from] VqtError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Gpt,
    Vqt,
    Codes,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Gpt => 0,
            ModelKind::Vqt => 1,
            ModelKind::Codes => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self, PersistError> {
        match t {
            0 => Ok(ModelKind::Gpt),
            1 => Ok(ModelKind::Vqt),
            2 => Ok(ModelKind::Codes),
            other => Err(PersistError::Format(format!("unknown model kind {other}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Gpt => "gpt",
            ModelKind::Vqt => "vqt",
            ModelKind::Codes => "codes",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Gpt(GptModel),
    Vqt(VqtModel),
    Codes(CodesModel),
}

impl SavedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            SavedModel::Gpt(_) => ModelKind::Gpt,
            SavedModel::Vqt(_) => ModelKind::Vqt,
            SavedModel::Codes(_) => ModelKind::Codes,
        }
    }
}

/// Header and block listing of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub version: u32,
    pub kind: ModelKind,
    pub config: Vec<(String, String)>,
    pub blocks: Vec<(String, Vec<usize>)>,
    pub checksum: u64,
}

impl CheckpointInfo {
    pub fn num_scalars(&self) -> usize {
        self.blocks
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn kv_text(kv: &[(String, String)]) -> String {
    kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn put_block(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &SavedModel) -> Vec<u8> {
    let (config, params) = match model {
        SavedModel::Gpt(m) => (m.config.to_kv(), &m.params),
        SavedModel::Vqt(m) => (m.config.to_kv(), &m.params),
        SavedModel::Codes(m) => (m.model.config.to_kv(), &m.model.params),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.kind().tag());
    let text = kv_text(&config);
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    let extra = match model {
        SavedModel::Vqt(m) => vec![
            &m.codebook.entries,
            &m.codebook.ema_count,
            &m.codebook.ema_sum,
        ],
        _ => Vec::new(),
    };
    put_u32(&mut out, params.len() + extra.len());
    for (name, t) in params.iter() {
        put_block(&mut out, name, t);
    }
    for (name, t) in CODEBOOK_BLOCKS.iter().zip(extra) {
        put_block(&mut out, name, t);
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| PersistError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, PersistError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

type RawCheckpoint = (CheckpointInfo, Vec<(String, Tensor<f32>)>);

fn read_raw(bytes: &[u8], with_payload: bool) -> Result<RawCheckpoint, PersistError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(PersistError::BadMagic);
    }
    if bytes.len() < 4 + 4 + 1 + 8 {
        return Err(PersistError::Format("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = checksum(body);
    if stored != computed {
        return Err(PersistError::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(PersistError::VersionUnsupported(version));
    }
    let kind = ModelKind::from_tag(r.take(1)?[0])?;
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| PersistError::Format("config is not UTF-8".into()))?;
    let mut config = Vec::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PersistError::Format(format!("config line {line:?} has no '='")))?;
        config.push((k.to_string(), v.to_string()));
    }
    let count = r.u32()?;
    let mut blocks = Vec::with_capacity(count);
    let mut tensors = Vec::new();
    for _ in 0..count {
        let nl = r.u32()?;
        let name = std::str::from_utf8(r.take(nl)?)
            .map_err(|_| PersistError::Format("block name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| PersistError::Format(format!("block {name} is too large")))?;
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| PersistError::Format("overflow".into()))?,
        )?;
        if with_payload {
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t =
                Tensor::from_vec(&shape, data).map_err(|e| PersistError::Format(e.to_string()))?;
            tensors.push((name.clone(), t));
        }
        blocks.push((name, shape));
    }
    if r.pos != body.len() {
        return Err(PersistError::Format(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok((
        CheckpointInfo {
            version,
            kind,
            config,
            blocks,
            checksum: stored,
        },
        tensors,
    ))
}

/// Validates the checksum and lists the header without building a model.
pub fn inspect_checkpoint(bytes: &[u8]) -> Result<CheckpointInfo, PersistError> {
    Ok(read_raw(bytes, false)?.0)
}

fn apply_kv<C>(
    cfg: &mut C,
    kv: &[(String, String)],
    set: impl Fn(&mut C, &str, &str) -> Result<bool, String>,
) -> Result<(), PersistError> {
    for (i, (k, v)) in kv.iter().enumerate() {
        match set(cfg, k, v) {
            Ok(true) => {}
            Ok(false) => return Err(PersistError::UnknownKey(k.clone())),
            Err(msg) => return Err(PersistError::Config { line: i + 1, msg }),
        }
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SavedModel, PersistError> {
    let (info, tensors) = read_raw(bytes, true)?;
    let mut params = ParamSet::new();
    let mut codebook = Vec::new();
    for (name, t) in tensors {
        if info.kind == ModelKind::Vqt && CODEBOOK_BLOCKS.contains(&name.as_str()) {
            codebook.push((name, t));
        } else {
            params
                .insert(name, t)
                .map_err(|e| PersistError::Format(e.to_string()))?;
        }
    }
    Ok(match info.kind {
        ModelKind::Gpt | ModelKind::Codes => {
            let mut cfg = GptConfig::default();
            apply_kv(&mut cfg, &info.config, GptConfig::set_kv)?;
            let m = GptModel::from_params(cfg, params)?;
            if info.kind == ModelKind::Gpt {
                SavedModel::Gpt(m)
            } else {
                SavedModel::Codes(CodesModel { model: m })
            }
        }
        ModelKind::Vqt => {
            let mut cfg = VqtConfig::default();
            apply_kv(&mut cfg, &info.config, VqtConfig::set_kv)?;
            let names: Vec<&str> = codebook.iter().map(|(n, _)| n.as_str()).collect();
            if names != CODEBOOK_BLOCKS {
                return Err(PersistError::Format(format!(
                    "codebook blocks {names:?} out of order or missing"
                )));
            }
            let mut it = codebook.into_iter().map(|(_, t)| t);
            let (entries, ema_count, ema_sum) =
                (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
            SavedModel::Vqt(VqtModel::from_parts(
                cfg,
                params,
                Codebook {
                    entries,
                    ema_count,
                    ema_sum,
                },
            )?)
        }
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(model: &SavedModel, path: &Path) -> Result<(), PersistError> {
    std::fs::write(path, encode_checkpoint(model)).map_err(io_err(path))
}

pub fn read_checkpoint_bytes(path: &Path) -> Result<Vec<u8>, PersistError> {
    std::fs::read(path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<SavedModel, PersistError> {
    decode_checkpoint(&read_checkpoint_bytes(path)?)
}

pub fn load_gpt(path: &Path) -> Result<GptModel, PersistError> {
    match load_checkpoint(path)? {
        SavedModel::Gpt(m) => Ok(m),
        other => Err(PersistError::KindMismatch {
            expected: ModelKind::Gpt,
            found: other.kind(),
        }),
    }
}

pub fn load_vqt(path: &Path) -> Result<VqtModel, PersistError> {
    match load_checkpoint(path)? {
        SavedModel::Vqt(m) => Ok(m),
        other => Err(PersistError::KindMismatch {
            expected: ModelKind::Vqt,
            found: other.kind(),
        }),
    }
}

pub fn load_codes(path: &Path) -> Result<CodesModel, PersistError> {
    match load_checkpoint(path)? {
        SavedModel::Codes(m) => Ok(m),
        other => Err(PersistError::KindMismatch {
            expected: ModelKind::Codes,
            found: other.kind(),
        }),
    }
}

/// Every tunable, as read from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gpt: GptConfig,
    pub vqt: VqtConfig,
    pub codes: GptConfig,
    pub sample: SampleOpts,
    pub split: SplitSpec,
    pub corpus_max_len: usize,
    pub corpus_format: LeakFormat,
    pub view: TrainingView,
    pub synth: SynthSpec,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gpt: GptConfig::default(),
            vqt: VqtConfig::default(),
            codes: GptConfig::default(),
            sample: SampleOpts::default(),
            split: SplitSpec::default(),
            corpus_max_len: 16,
            corpus_format: LeakFormat::Lines,
            view: TrainingView::AllOccurrences,
            synth: SynthSpec::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| format!("bad list item {x:?} for {key}"))
        })
        .collect()
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.trim()
        .parse()
        .map_err(|_| format!("bad value {v:?} for {key}"))
}

impl RunConfig {
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        let mut ns = |prefix: &str, items: Vec<(String, String)>| {
            kv.extend(items.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)));
        };
        ns("gpt", self.gpt.to_kv());
        ns("vqt", self.vqt.to_kv());
        ns("codes", self.codes.to_kv());
        let s = &self.sample;
        ns(
            "sample",
            vec![
                ("temperature".into(), s.temperature.to_string()),
                (
                    "top_k".into(),
                    s.top_k.map_or("none".into(), |k| k.to_string()),
                ),
                ("seed".into(), s.seed.to_string()),
                ("max_new".into(), s.max_new.to_string()),
            ],
        );
        ns(
            "split",
            vec![
                (
                    "train_fraction".into(),
                    self.split.train_fraction.to_string(),
                ),
                ("seed".into(), self.split.seed.to_string()),
            ],
        );
        ns(
            "corpus",
            vec![
                ("max_len".into(), self.corpus_max_len.to_string()),
                (
                    "format".into(),
                    match self.corpus_format {
                        LeakFormat::Lines => "lines".into(),
                        LeakFormat::Pairs => "pairs".into(),
                    },
                ),
                (
                    "view".into(),
                    match self.view {
                        TrainingView::Unique => "unique".into(),
                        TrainingView::AllOccurrences => "all".into(),
                    },
                ),
            ],
        );
        let y = &self.synth;
        ns(
            "synth",
            vec![
                ("occurrences".into(), y.occurrences.to_string()),
                ("zipf_exponent".into(), y.zipf_exponent.to_string()),
                (
                    "popular_suffix_fraction".into(),
                    y.popular_suffix_fraction.to_string(),
                ),
                ("seed".into(), y.seed.to_string()),
            ],
        );
        let e = &self.eval;
        ns(
            "eval",
            vec![
                ("budgets".into(), list(&e.budgets)),
                ("workers".into(), e.workers.to_string()),
                ("quantiles".into(), list(&e.quantiles)),
                ("quantile_lengths".into(), list(&e.quantile_lengths)),
                (
                    "low_percentile".into(),
                    e.cutoffs.low_percentile.to_string(),
                ),
                (
                    "high_percentile".into(),
                    e.cutoffs.high_percentile.to_string(),
                ),
                ("weak_max".into(), e.cutoffs.weak_max.to_string()),
                ("strong_min".into(), e.cutoffs.strong_min.to_string()),
            ],
        );
        kv
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Sets one namespaced key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PersistError> {
        let unknown = || PersistError::UnknownKey(key.to_string());
        let (ns, field) = key.split_once('.').ok_or_else(unknown)?;
        let cfg_err = |msg| PersistError::Config { line: 0, msg };
        let known = match ns {
            "gpt" => self.gpt.set_kv(field, value).map_err(cfg_err)?,
            "vqt" => self.vqt.set_kv(field, value).map_err(cfg_err)?,
            "codes" => self.codes.set_kv(field, value).map_err(cfg_err)?,
            _ => self.set_misc(ns, field, value).map_err(cfg_err)?,
        };
        if known {
            Ok(())
        } else {
            Err(unknown())
        }
    }

    fn set_misc(&mut self, ns: &str, field: &str, v: &str) -> Result<bool, String> {
        let key = format!("{ns}.{field}");
        let key = key.as_str();
        match (ns, field) {
            ("sample", "temperature") => self.sample.temperature = parse(key, v)?,
            ("sample", "top_k") => {
                self.sample.top_k = match v.trim() {
                    "none" | "0" => None,
                    s => Some(parse(key, s)?),
                }
            }
            ("sample", "seed") => self.sample.seed = parse(key, v)?,
            ("sample", "max_new") => self.sample.max_new = parse(key, v)?,
            ("split", "train_fraction") => self.split.train_fraction = parse(key, v)?,
            ("split", "seed") => self.split.seed = parse(key, v)?,
            ("corpus", "max_len") => self.corpus_max_len = parse(key, v)?,
            ("corpus", "format") => self.corpus_format = v.trim().parse()?,
            ("corpus", "view") => self.view = v.trim().parse()?,
            ("synth", "occurrences") => self.synth.occurrences = parse(key, v)?,
            ("synth", "zipf_exponent") => self.synth.zipf_exponent = parse(key, v)?,
            ("synth", "popular_suffix_fraction") => {
                self.synth.popular_suffix_fraction = parse(key, v)?
            }
            ("synth", "seed") => self.synth.seed = parse(key, v)?,
            ("eval", "budgets") => self.eval.budgets = parse_list(key, v)?,
            ("eval", "workers") => self.eval.workers = parse(key, v)?,
            ("eval", "quantiles") => self.eval.quantiles = parse_list(key, v)?,
            ("eval", "quantile_lengths") => self.eval.quantile_lengths = parse_list(key, v)?,
            ("eval", "low_percentile") => self.eval.cutoffs.low_percentile = parse(key, v)?,
            ("eval", "high_percentile") => self.eval.cutoffs.high_percentile = parse(key, v)?,
            ("eval", "weak_max") => self.eval.cutoffs.weak_max = parse(key, v)?,
            ("eval", "strong_min") => self.eval.cutoffs.strong_min = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses config text over the defaults. Repeated keys are an error.
    pub fn parse(text: &str) -> Result<Self, PersistError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(PersistError::Config {
                line: i + 1,
                msg: format!("expected key = value, got {raw:?}"),
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(PersistError::Config {
                    line: i + 1,
                    msg: format!("key {k} repeated"),
                });
            }
            cfg.set(k, v.trim()).map_err(|e| match e {
                PersistError::Config { msg, .. } => PersistError::Config { line: i + 1, msg },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PersistError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }
}
