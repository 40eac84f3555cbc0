//! Guessing evaluation: guess pools, match rates against held-out sets,
//! uniqueness curves, strength-bucketed match tables, quantile exemplars
//! and strength alignment summaries.
//!
//! # Report format
//!
//! [`EvalReport::to_text`] writes sections headed `[name]`, one record per
//! line as space-separated `key=value` pairs. Fractions and statistics use
//! six decimals. Passwords are escaped with [`display_password`].
//! [`EvalReport::csv_tables`] gives the same records as CSV files.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::hash::Hasher;
use std::sync::Arc;

use crate::gpt::{sample_range, score_passwords, GptError, GptModel, SampleOpts};
use crate::guided::{guided_sample_range, GuidedError, Template};
use crate::rng::mix64;
use crate::strength::StrengthEstimator;
use crate::vqt::{sample_vqt_range, CodesModel, VqtError, VqtModel};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("no passwords left after filtering")]
    EmptyAfterFilter,
    #[error("bad budgets: {0}")]
    Budgets(String),
    #[error("sample stream has {available} items, budget {budget} requested")]
    StreamTooShort { budget: u64, available: u64 },
    #[error("quantile {0} outside [0, 1]")]
    Quantile(f64),
    #[error("pool is sketched and does not track every test password")]
    PoolNotExact,
    #[error("at most {max} pools can be compared, got {got}")]
    TooManyPools { max: usize, got: usize },
    #[error(transparent)]
    Gpt(#[from] GptError),
    #[error(transparent)]
    Guided(#[from] GuidedError),
    #[error(transparent)]
    Vqt(#[from] VqtError),
}

const MAX_TABLE_POOLS: usize = 8;

/// Escapes `\`, LF and CR so that one password fits on one line.
pub fn escape_password(pw: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(pw.len());
    for &b in pw {
        match b {
            b'\\' => out.extend_from_slice(b"\\\\"),
            b'\n' => out.extend_from_slice(b"\\x0A"),
            b'\r' => out.extend_from_slice(b"\\x0D"),
            _ => out.push(b),
        }
    }
    out
}

/// Inverse of [`escape_password`]; also accepts any `\xHH`.
pub fn unescape_password(line: &[u8]) -> Option<Vec<u8>> {
    let mut out = Vec::with_capacity(line.len());
    let mut i = 0;
    while i < line.len() {
        if line[i] != b'\\' {
            out.push(line[i]);
            i += 1;
            continue;
        }
        match line.get(i + 1)? {
            b'\\' => {
                out.push(b'\\');
                i += 2;
            }
            b'x' => {
                let hex = std::str::from_utf8(line.get(i + 2..i + 4)?).ok()?;
                out.push(u8::from_str_radix(hex, 16).ok()?);
                i += 4;
            }
            _ => return None,
        }
    }
    Some(out)
}

/// Printable-ASCII rendering for reports: bytes outside `!`..`~`, and
/// `\ , = "`, become `\xHH` (backslash as `\\`).
pub fn display_password(pw: &[u8]) -> String {
    let mut s = String::with_capacity(pw.len());
    for &b in pw {
        match b {
            b'\\' => s.push_str("\\\\"),
            b',' | b'=' | b'"' => {
                let _ = write!(s, "\\x{b:02X}");
            }
            0x21..=0x7e => s.push(b as char),
            _ => {
                let _ = write!(s, "\\x{b:02X}");
            }
        }
    }
    s
}

fn guess_hash(pw: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(pw);
    mix64(h.finish())
}

/// K-minimum-values distinct-count sketch.
#[derive(Debug, Clone, PartialEq)]
pub struct DistinctSketch {
    k: usize,
    mins: BTreeSet<u64>,
}

impl DistinctSketch {
    pub fn new(k: usize) -> Self {
        DistinctSketch {
            k: k.max(2),
            mins: BTreeSet::new(),
        }
    }

    pub fn insert_hash(&mut self, h: u64) {
        if self.mins.len() < self.k {
            self.mins.insert(h);
        } else if h < *self.mins.last().expect("full sketch") && self.mins.insert(h) {
            self.mins.pop_last();
        }
    }

    pub fn insert(&mut self, pw: &[u8]) {
        self.insert_hash(guess_hash(pw));
    }

    pub fn merge(&mut self, other: &DistinctSketch) {
        for &h in &other.mins {
            self.insert_hash(h);
        }
    }

    /// Exact below `k` distinct items, else `(k - 1) / kth_min` scaled.
    pub fn estimate(&self) -> f64 {
        if self.mins.len() < self.k {
            return self.mins.len() as f64;
        }
        let kth = *self.mins.last().expect("full sketch") as f64 + 1.0;
        (self.k - 1) as f64 * (u64::MAX as f64 + 1.0) / kth
    }

    /// Relative standard error of the estimate.
    pub fn relative_error(&self) -> f64 {
        if self.mins.len() < self.k {
            0.0
        } else {
            1.0 / ((self.k - 2) as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SketchFallback {
    memory_budget: usize,
    sketch_k: usize,
    targets: Arc<BTreeSet<Vec<u8>>>,
}

/// Distinct guesses drawn from one generator.
///
/// Exact by default. With [`GuessPool::with_sketch_fallback`], once more
/// than `memory_budget` distinct guesses are held the pool keeps only
/// guesses in a target set and counts the rest with a [`DistinctSketch`].
#[derive(Debug, Clone, PartialEq)]
pub struct GuessPool {
    pub source: String,
    total_drawn: u64,
    distinct: HashSet<Vec<u8>>,
    fallback: Option<SketchFallback>,
    sketch: Option<DistinctSketch>,
}

impl GuessPool {
    pub fn new(source: impl Into<String>) -> Self {
        GuessPool {
            source: source.into(),
            total_drawn: 0,
            distinct: HashSet::new(),
            fallback: None,
            sketch: None,
        }
    }

    pub fn from_guesses<I: IntoIterator<Item = T>, T: AsRef<[u8]>>(
        source: impl Into<String>,
        guesses: I,
    ) -> Self {
        let mut p = Self::new(source);
        p.extend(guesses);
        p
    }

    pub fn with_sketch_fallback(
        mut self,
        memory_budget: usize,
        sketch_k: usize,
        targets: Arc<BTreeSet<Vec<u8>>>,
    ) -> Self {
        self.fallback = Some(SketchFallback {
            memory_budget,
            sketch_k,
            targets,
        });
        self.maybe_switch();
        self
    }

    pub fn insert(&mut self, guess: &[u8]) {
        self.total_drawn += 1;
        if let Some(sk) = &mut self.sketch {
            sk.insert(guess);
            let fb = self.fallback.as_ref().expect("sketch implies fallback");
            if fb.targets.contains(guess) && !self.distinct.contains(guess) {
                self.distinct.insert(guess.to_vec());
            }
            return;
        }
        if !self.distinct.contains(guess) {
            self.distinct.insert(guess.to_vec());
            self.maybe_switch();
        }
    }

    pub fn extend<I: IntoIterator<Item = T>, T: AsRef<[u8]>>(&mut self, guesses: I) {
        for g in guesses {
            self.insert(g.as_ref());
        }
    }

    fn maybe_switch(&mut self) {
        let Some(fb) = &self.fallback else { return };
        if self.sketch.is_none() && self.distinct.len() > fb.memory_budget {
            self.force_sketch();
        }
    }

    fn force_sketch(&mut self) {
        let fb = self.fallback.as_ref().expect("sketching needs a fallback");
        let mut sk = DistinctSketch::new(fb.sketch_k);
        for g in &self.distinct {
            sk.insert(g);
        }
        let targets = fb.targets.clone();
        self.distinct.retain(|g| targets.contains(g));
        self.sketch = Some(sk);
    }

    pub fn total_drawn(&self) -> u64 {
        self.total_drawn
    }

    pub fn is_exact(&self) -> bool {
        self.sketch.is_none()
    }

    /// Distinct guesses; an estimate once the pool is sketched.
    pub fn unique_count(&self) -> f64 {
        match &self.sketch {
            Some(sk) => sk.estimate(),
            None => self.distinct.len() as f64,
        }
    }

    /// Membership. Sketched pools only answer for target passwords.
    pub fn contains(&self, guess: &[u8]) -> Option<bool> {
        match (&self.sketch, &self.fallback) {
            (Some(_), Some(fb)) if !fb.targets.contains(guess) => None,
            _ => Some(self.distinct.contains(guess)),
        }
    }

    /// Union of two pools; drawn counts add. Associative and commutative
    /// in every reported number.
    pub fn merge(&mut self, other: &GuessPool) {
        self.total_drawn += other.total_drawn;
        if self.fallback.is_none() {
            self.fallback = other.fallback.clone();
        }
        if other.sketch.is_some() && self.sketch.is_none() {
            self.force_sketch();
        }
        match &mut self.sketch {
            Some(sk) => {
                match &other.sketch {
                    Some(o) => sk.merge(o),
                    None => other.distinct.iter().for_each(|g| sk.insert(g)),
                }
                let fb = self.fallback.as_ref().expect("sketch implies fallback");
                for g in &other.distinct {
                    if fb.targets.contains(g) {
                        self.distinct.insert(g.clone());
                    }
                }
            }
            None => {
                self.distinct.extend(other.distinct.iter().cloned());
                self.maybe_switch();
            }
        }
    }
}

/// Fraction of `test` found among the pool's distinct guesses.
pub fn match_rate(pool: &GuessPool, test: &BTreeSet<Vec<u8>>) -> Result<f64, EvalError> {
    Ok(match_count(pool, test)? as f64 / test.len() as f64)
}

fn match_count(pool: &GuessPool, test: &BTreeSet<Vec<u8>>) -> Result<usize, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut n = 0;
    for t in test {
        match pool.contains(t) {
            Some(true) => n += 1,
            Some(false) => {}
            None => return Err(EvalError::PoolNotExact),
        }
    }
    Ok(n)
}

fn check_budgets(budgets: &[u64]) -> Result<(), EvalError> {
    if budgets.is_empty() || budgets[0] == 0 || budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Budgets(format!(
            "{budgets:?} must be non-empty, positive and strictly ascending"
        )));
    }
    Ok(())
}

/// Distinct fraction of the first `B` samples, for each budget `B`.
pub fn uniqueness_curve<T: AsRef<[u8]>>(
    stream: &[T],
    budgets: &[u64],
) -> Result<Vec<(u64, f64)>, EvalError> {
    check_budgets(budgets)?;
    let last = *budgets.last().expect("checked");
    if (stream.len() as u64) < last {
        return Err(EvalError::StreamTooShort {
            budget: last,
            available: stream.len() as u64,
        });
    }
    let mut seen: HashSet<&[u8]> = HashSet::new();
    let mut out = Vec::with_capacity(budgets.len());
    let mut bi = 0;
    for (i, s) in stream.iter().enumerate() {
        seen.insert(s.as_ref());
        while bi < budgets.len() && budgets[bi] == i as u64 + 1 {
            out.push((budgets[bi], seen.len() as f64 / budgets[bi] as f64));
            bi += 1;
        }
        if bi == budgets.len() {
            break;
        }
    }
    Ok(out)
}

/// One match-rate measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRow {
    pub pool: String,
    pub seed: u64,
    pub test_set: String,
    pub budget: u64,
    pub matched: usize,
    pub test_size: usize,
    pub fraction: f64,
}

/// Match rates of the first `B` samples for every budget `B`.
pub fn match_rate_series<T: AsRef<[u8]>>(
    pool_name: &str,
    seed: u64,
    samples: &[T],
    test_name: &str,
    test: &BTreeSet<Vec<u8>>,
    budgets: &[u64],
) -> Result<Vec<MatchRow>, EvalError> {
    check_budgets(budgets)?;
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let last = *budgets.last().expect("checked");
    if (samples.len() as u64) < last {
        return Err(EvalError::StreamTooShort {
            budget: last,
            available: samples.len() as u64,
        });
    }
    let mut pool = GuessPool::new(pool_name);
    let mut rows = Vec::with_capacity(budgets.len());
    let mut drawn = 0u64;
    for &b in budgets {
        pool.extend(&samples[drawn as usize..b as usize]);
        drawn = b;
        let matched = match_count(&pool, test)?;
        rows.push(MatchRow {
            pool: pool_name.to_string(),
            seed,
            test_set: test_name.to_string(),
            budget: b,
            matched,
            test_size: test.len(),
            fraction: matched as f64 / test.len() as f64,
        });
    }
    Ok(rows)
}

/// A generator of guesses where guess `i` depends only on the source and `i`.
pub trait GuessSource: Sync {
    fn id(&self) -> String;
    fn seed(&self) -> u64;
    fn generate(&self, first: u64, count: usize) -> Result<Vec<Vec<u8>>, EvalError>;
}

pub struct GptSource<'a> {
    pub name: String,
    pub model: &'a GptModel,
    pub opts: SampleOpts,
}

impl GuessSource for GptSource<'_> {
    fn id(&self) -> String {
        self.name.clone()
    }
    fn seed(&self) -> u64 {
        self.opts.seed
    }
    fn generate(&self, first: u64, count: usize) -> Result<Vec<Vec<u8>>, EvalError> {
        Ok(sample_range(self.model, &self.opts, first, count)?)
    }
}

pub struct GuidedSource<'a> {
    pub name: String,
    pub model: &'a GptModel,
    pub template: Template,
    pub opts: SampleOpts,
}

impl GuessSource for GuidedSource<'_> {
    fn id(&self) -> String {
        self.name.clone()
    }
    fn seed(&self) -> u64 {
        self.opts.seed
    }
    fn generate(&self, first: u64, count: usize) -> Result<Vec<Vec<u8>>, EvalError> {
        Ok(guided_sample_range(
            self.model,
            &self.template,
            &self.opts,
            first,
            count,
        )?)
    }
}

pub struct VqtSource<'a> {
    pub name: String,
    pub vqt: &'a VqtModel,
    pub codes: &'a CodesModel,
    pub opts: SampleOpts,
}

impl GuessSource for VqtSource<'_> {
    fn id(&self) -> String {
        self.name.clone()
    }
    fn seed(&self) -> u64 {
        self.opts.seed
    }
    fn generate(&self, first: u64, count: usize) -> Result<Vec<Vec<u8>>, EvalError> {
        Ok(sample_vqt_range(
            self.vqt, self.codes, &self.opts, first, count,
        )?)
    }
}

/// Draws guesses `0..count` with `workers` threads. The output does not
/// depend on `workers`.
pub fn draw_guesses(
    source: &dyn GuessSource,
    count: usize,
    workers: usize,
) -> Result<Vec<Vec<u8>>, EvalError> {
    let workers = workers.clamp(1, count.max(1));
    if workers == 1 {
        return source.generate(0, count);
    }
    let chunk = count.div_ceil(workers);
    let parts: Vec<Result<Vec<Vec<u8>>, EvalError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let first = w * chunk;
                let n = chunk.min(count.saturating_sub(first));
                s.spawn(move || source.generate(first as u64, n))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Samples each source up to the largest budget and measures it against
/// every test set.
pub fn cross_leak_eval(
    sources: &[&dyn GuessSource],
    test_sets: &[(String, BTreeSet<Vec<u8>>)],
    budgets: &[u64],
    workers: usize,
) -> Result<Vec<MatchRow>, EvalError> {
    check_budgets(budgets)?;
    let last = *budgets.last().expect("checked") as usize;
    let mut rows = Vec::new();
    for src in sources {
        let guesses = draw_guesses(*src, last, workers)?;
        for (name, test) in test_sets {
            rows.extend(match_rate_series(
                &src.id(),
                src.seed(),
                &guesses,
                name,
                test,
                budgets,
            )?);
        }
    }
    Ok(rows)
}

/// Test passwords per strength score, split by which pools guessed them.
#[derive(Debug, Clone, PartialEq)]
pub struct StrengthTable {
    pub pools: Vec<String>,
    pub rows: Vec<StrengthRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrengthRow {
    pub score: u8,
    pub total: usize,
    /// Indexed by pool bitmask; entry `m` counts passwords guessed by
    /// exactly the pools in `m`. Entry 0 is "guessed by none".
    pub by_subset: Vec<usize>,
}

impl StrengthRow {
    pub fn not_guessed(&self) -> usize {
        self.by_subset[0]
    }
}

impl StrengthTable {
    /// Column label for a pool bitmask.
    pub fn subset_label(&self, mask: usize) -> String {
        if mask == 0 {
            return "none".into();
        }
        let names: Vec<&str> = (0..self.pools.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| self.pools[i].as_str())
            .collect();
        if names.len() == 1 {
            format!("only:{}", names[0])
        } else {
            names.join("&")
        }
    }
}

pub fn strength_bucketed_matches(
    test: &BTreeSet<Vec<u8>>,
    pools: &[(&str, &GuessPool)],
    estimator: &dyn StrengthEstimator,
) -> Result<StrengthTable, EvalError> {
    if pools.is_empty() || pools.len() > MAX_TABLE_POOLS {
        return Err(EvalError::TooManyPools {
            max: MAX_TABLE_POOLS,
            got: pools.len(),
        });
    }
    let width = 1usize << pools.len();
    let mut rows: Vec<StrengthRow> = (0..5)
        .map(|s| StrengthRow {
            score: s,
            total: 0,
            by_subset: vec![0; width],
        })
        .collect();
    for pw in test {
        let score = estimator.estimate(pw).score.min(4) as usize;
        let mut mask = 0;
        for (i, (_, p)) in pools.iter().enumerate() {
            match p.contains(pw) {
                Some(true) => mask |= 1 << i,
                Some(false) => {}
                None => return Err(EvalError::PoolNotExact),
            }
        }
        rows[score].total += 1;
        rows[score].by_subset[mask] += 1;
    }
    Ok(StrengthTable {
        pools: pools.iter().map(|(n, _)| n.to_string()).collect(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileRow {
    pub length: Option<usize>,
    pub quantile: f64,
    pub password: Vec<u8>,
    pub log_prob: f64,
}

/// Nearest-rank position of quantile `q` among `n` sorted items.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    ((q * n as f64).ceil() as usize)
        .saturating_sub(1)
        .min(n - 1)
}

/// Password at each nearest-rank quantile of `log_prob`, optionally among
/// passwords of one length. Ties in `log_prob` order by password bytes.
pub fn quantile_passwords(
    scored: &[(Vec<u8>, f64)],
    quantiles: &[f64],
    length: Option<usize>,
) -> Result<Vec<QuantileRow>, EvalError> {
    if let Some(&q) = quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(EvalError::Quantile(q));
    }
    let mut items: Vec<&(Vec<u8>, f64)> = scored
        .iter()
        .filter(|(p, _)| length.is_none_or(|l| p.len() == l))
        .collect();
    if items.is_empty() {
        return Err(EvalError::EmptyAfterFilter);
    }
    items.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(quantiles
        .iter()
        .map(|&q| {
            let (pw, lp) = items[nearest_rank(q, items.len())];
            QuantileRow {
                length,
                quantile: q,
                password: pw.clone(),
                log_prob: *lp,
            }
        })
        .collect())
}

/// Nearest-rank quartiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Quartiles> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| v[nearest_rank(q, v.len())];
        Some(Quartiles {
            q1: at(0.25),
            median: at(0.5),
            q3: at(0.75),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketSummary {
    pub score: u8,
    pub count: usize,
    pub log_prob: Option<Quartiles>,
    pub mean_entropy: Option<Quartiles>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierCutoffs {
    /// Weak passwords with log_prob at or below this percentile are
    /// reported as low-probability outliers.
    pub low_percentile: f64,
    /// Strong passwords with log_prob at or above this percentile are
    /// reported as high-probability outliers.
    pub high_percentile: f64,
    /// Highest score counted as weak.
    pub weak_max: u8,
    /// Lowest score counted as strong.
    pub strong_min: u8,
}

impl Default for OutlierCutoffs {
    fn default() -> Self {
        OutlierCutoffs {
            low_percentile: 0.05,
            high_percentile: 0.95,
            weak_max: 1,
            strong_min: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outlier {
    pub password: Vec<u8>,
    pub score: u8,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub buckets: Vec<BucketSummary>,
    pub low_cut: f64,
    pub high_cut: f64,
    pub low_prob_weak: Vec<Outlier>,
    pub high_prob_strong: Vec<Outlier>,
}

/// Per-score summaries of model log-probability and mean entropy.
pub fn strength_alignment(
    scored: &[(Vec<u8>, f64, f64)],
    estimator: &dyn StrengthEstimator,
    cutoffs: &OutlierCutoffs,
) -> AlignmentReport {
    let scores: Vec<u8> = scored
        .iter()
        .map(|(p, _, _)| estimator.estimate(p).score.min(4))
        .collect();
    let buckets = (0..5u8)
        .map(|s| {
            let lp: Vec<f64> = scored
                .iter()
                .zip(&scores)
                .filter(|(_, &sc)| sc == s)
                .map(|(x, _)| x.1)
                .collect();
            let ent: Vec<f64> = scored
                .iter()
                .zip(&scores)
                .filter(|(_, &sc)| sc == s)
                .map(|(x, _)| x.2)
                .collect();
            BucketSummary {
                score: s,
                count: lp.len(),
                log_prob: Quartiles::of(&lp),
                mean_entropy: Quartiles::of(&ent),
            }
        })
        .collect();
    let mut all: Vec<f64> = scored.iter().map(|x| x.1).collect();
    all.sort_by(f64::total_cmp);
    let (low_cut, high_cut) = if all.is_empty() {
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        (
            all[nearest_rank(cutoffs.low_percentile, all.len())],
            all[nearest_rank(cutoffs.high_percentile, all.len())],
        )
    };
    let mut low = Vec::new();
    let mut high = Vec::new();
    for ((pw, lp, _), &s) in scored.iter().zip(&scores) {
        let o = || Outlier {
            password: pw.clone(),
            score: s,
            log_prob: *lp,
        };
        if s <= cutoffs.weak_max && *lp <= low_cut {
            low.push(o());
        }
        if s >= cutoffs.strong_min && *lp >= high_cut {
            high.push(o());
        }
    }
    let order = |a: &Outlier, b: &Outlier| {
        a.log_prob
            .total_cmp(&b.log_prob)
            .then_with(|| a.password.cmp(&b.password))
    };
    low.sort_by(order);
    high.sort_by(|a, b| order(b, a));
    AlignmentReport {
        buckets,
        low_cut,
        high_cut,
        low_prob_weak: low,
        high_prob_strong: high,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessRow {
    pub pool: String,
    pub budget: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub metadata: BTreeMap<String, String>,
    pub match_rates: Vec<MatchRow>,
    pub uniqueness: Vec<UniquenessRow>,
    pub strength: Option<StrengthTable>,
    pub quantiles: Vec<QuantileRow>,
    pub alignment: Option<AlignmentReport>,
}

fn opt_stat(q: Option<Quartiles>) -> [String; 3] {
    match q {
        Some(q) => [
            format!("{:.6}", q.q1),
            format!("{:.6}", q.median),
            format!("{:.6}", q.q3),
        ],
        None => ["nan".into(), "nan".into(), "nan".into()],
    }
}

fn quantile_length(l: Option<usize>) -> String {
    l.map_or("all".into(), |l| l.to_string())
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("[metadata]\n");
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "{k}={v}");
        }
        s.push_str("[match_rate]\n");
        for r in &self.match_rates {
            let _ = writeln!(
                s,
                "pool={} seed={} test_set={} budget={} matched={} test_size={} fraction={:.6}",
                r.pool, r.seed, r.test_set, r.budget, r.matched, r.test_size, r.fraction
            );
        }
        s.push_str("[uniqueness]\n");
        for r in &self.uniqueness {
            let _ = writeln!(
                s,
                "pool={} budget={} fraction={:.6}",
                r.pool, r.budget, r.fraction
            );
        }
        if let Some(t) = &self.strength {
            s.push_str("[strength]\n");
            for r in &t.rows {
                let _ = write!(s, "score={} total={}", r.score, r.total);
                for (m, c) in r.by_subset.iter().enumerate().skip(1) {
                    let _ = write!(s, " {}={c}", t.subset_label(m));
                }
                let _ = writeln!(s, " none={}", r.not_guessed());
            }
        }
        s.push_str("[quantiles]\n");
        for q in &self.quantiles {
            let _ = writeln!(
                s,
                "length={} quantile={:.6} password={} log_prob={:.6}",
                quantile_length(q.length),
                q.quantile,
                display_password(&q.password),
                q.log_prob
            );
        }
        if let Some(a) = &self.alignment {
            s.push_str("[alignment]\n");
            for b in &a.buckets {
                let [l1, lm, l3] = opt_stat(b.log_prob);
                let [e1, em, e3] = opt_stat(b.mean_entropy);
                let _ = writeln!(
                    s,
                    "score={} count={} log_prob_q1={l1} log_prob_median={lm} log_prob_q3={l3} entropy_q1={e1} entropy_median={em} entropy_q3={e3}",
                    b.score, b.count
                );
            }
            let _ = writeln!(s, "low_cut={:.6} high_cut={:.6}", a.low_cut, a.high_cut);
            for (kind, list) in [
                ("low_prob_weak", &a.low_prob_weak),
                ("high_prob_strong", &a.high_prob_strong),
            ] {
                for o in list {
                    let _ = writeln!(
                        s,
                        "outlier={kind} password={} score={} log_prob={:.6}",
                        display_password(&o.password),
                        o.score,
                        o.log_prob
                    );
                }
            }
        }
        s
    }

    /// `(file name, contents)` for each CSV table.
    pub fn csv_tables(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut t = String::from("pool,seed,test_set,budget,matched,test_size,fraction\n");
        for r in &self.match_rates {
            let _ = writeln!(
                t,
                "{},{},{},{},{},{},{:.6}",
                r.pool, r.seed, r.test_set, r.budget, r.matched, r.test_size, r.fraction
            );
        }
        out.push(("match_rate.csv".into(), t));
        let mut t = String::from("pool,budget,fraction\n");
        for r in &self.uniqueness {
            let _ = writeln!(t, "{},{},{:.6}", r.pool, r.budget, r.fraction);
        }
        out.push(("uniqueness.csv".into(), t));
        if let Some(st) = &self.strength {
            let mut t = String::from("score,total");
            for m in 1..st.rows[0].by_subset.len() {
                let _ = write!(t, ",{}", st.subset_label(m));
            }
            t.push_str(",none\n");
            for r in &st.rows {
                let _ = write!(t, "{},{}", r.score, r.total);
                for c in &r.by_subset[1..] {
                    let _ = write!(t, ",{c}");
                }
                let _ = writeln!(t, ",{}", r.not_guessed());
            }
            out.push(("strength.csv".into(), t));
        }
        let mut t = String::from("length,quantile,password,log_prob\n");
        for q in &self.quantiles {
            let _ = writeln!(
                t,
                "{},{:.6},{},{:.6}",
                quantile_length(q.length),
                q.quantile,
                display_password(&q.password),
                q.log_prob
            );
        }
        out.push(("quantiles.csv".into(), t));
        if let Some(a) = &self.alignment {
            let mut t = String::from(
                "score,count,log_prob_q1,log_prob_median,log_prob_q3,entropy_q1,entropy_median,entropy_q3\n",
            );
            for b in &a.buckets {
                let [l1, lm, l3] = opt_stat(b.log_prob);
                let [e1, em, e3] = opt_stat(b.mean_entropy);
                let _ = writeln!(t, "{},{},{l1},{lm},{l3},{e1},{em},{e3}", b.score, b.count);
            }
            out.push(("alignment.csv".into(), t));
        }
        out
    }
}

/// Settings for [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub budgets: Vec<u64>,
    pub workers: usize,
    pub quantiles: Vec<f64>,
    /// Lengths for quantile exemplars; empty means every length present.
    pub quantile_lengths: Vec<usize>,
    pub cutoffs: OutlierCutoffs,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            budgets: vec![1_000, 10_000, 100_000, 1_000_000],
            workers: 1,
            quantiles: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            quantile_lengths: Vec::new(),
            cutoffs: OutlierCutoffs::default(),
        }
    }
}

/// Full evaluation. Strength tables, quantiles and alignment use the first
/// test set; quantiles and alignment need a byte-level `scorer`.
pub fn evaluate(
    sources: &[&dyn GuessSource],
    test_sets: &[(String, BTreeSet<Vec<u8>>)],
    scorer: Option<&GptModel>,
    estimator: &dyn StrengthEstimator,
    settings: &EvalSettings,
) -> Result<EvalReport, EvalError> {
    check_budgets(&settings.budgets)?;
    let (first_name, first_test) = test_sets.first().ok_or(EvalError::EmptyTestSet)?;
    let last = *settings.budgets.last().expect("checked") as usize;
    let mut report = EvalReport::default();
    let meta = &mut report.metadata;
    meta.insert(
        "budgets".into(),
        settings
            .budgets
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    for (name, t) in test_sets {
        meta.insert(format!("test_set.{name}.size"), t.len().to_string());
    }
    let mut pools = Vec::new();
    for src in sources {
        let id = src.id();
        meta.insert(format!("source.{id}.seed"), src.seed().to_string());
        let guesses = draw_guesses(*src, last, settings.workers)?;
        for (b, f) in uniqueness_curve(&guesses, &settings.budgets)? {
            report.uniqueness.push(UniquenessRow {
                pool: id.clone(),
                budget: b,
                fraction: f,
            });
        }
        for (name, test) in test_sets {
            report.match_rates.extend(match_rate_series(
                &id,
                src.seed(),
                &guesses,
                name,
                test,
                &settings.budgets,
            )?);
        }
        pools.push((id, GuessPool::from_guesses(src.id(), &guesses)));
    }
    if !pools.is_empty() {
        let refs: Vec<(&str, &GuessPool)> = pools.iter().map(|(n, p)| (n.as_str(), p)).collect();
        report.strength = Some(strength_bucketed_matches(first_test, &refs, estimator)?);
    }
    if let Some(model) = scorer {
        let eligible: Vec<&[u8]> = first_test
            .iter()
            .map(Vec::as_slice)
            .filter(|p| p.len() <= model.config.max_len)
            .collect();
        report.metadata.insert(
            format!("test_set.{first_name}.scored"),
            eligible.len().to_string(),
        );
        let scores = score_passwords(model, &eligible)?;
        let pairs: Vec<(Vec<u8>, f64)> = eligible
            .iter()
            .zip(&scores)
            .map(|(p, s)| (p.to_vec(), s.log10_prob))
            .collect();
        let lengths: Vec<Option<usize>> = if settings.quantile_lengths.is_empty() {
            eligible
                .iter()
                .map(|p| p.len())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .map(Some)
                .collect()
        } else {
            settings
                .quantile_lengths
                .iter()
                .copied()
                .map(Some)
                .collect()
        };
        for l in lengths {
            match quantile_passwords(&pairs, &settings.quantiles, l) {
                Ok(rows) => report.quantiles.extend(rows),
                Err(EvalError::EmptyAfterFilter) => {}
                Err(e) => return Err(e),
            }
        }
        let triples: Vec<(Vec<u8>, f64, f64)> = eligible
            .iter()
            .zip(&scores)
            .map(|(p, s)| (p.to_vec(), s.log10_prob, s.mean_entropy()))
            .collect();
        report.alignment = Some(strength_alignment(&triples, estimator, &settings.cutoffs));
    }
    Ok(report)
}
