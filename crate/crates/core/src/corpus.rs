//! Password leaks, length filtering, and train/test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use thiserror::Error;

use crate::rng::StreamRng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
}

/// Layout of a leak file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeakFormat {
    /// One password per line, duplicates allowed.
    Lines,
    /// `count<TAB>password` or `count<SPACE>password`, leading blanks allowed.
    Pairs,
}

impl std::str::FromStr for LeakFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lines" | "one-per-line" => Ok(LeakFormat::Lines),
            "pairs" | "password-count-pairs" => Ok(LeakFormat::Pairs),
            other => Err(format!(
                "unknown leak format '{other}' (expected lines|pairs)"
            )),
        }
    }
}

/// Which multiset a model trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingView {
    /// Each distinct password once.
    Unique,
    /// Each occurrence separately.
    AllOccurrences,
}

impl std::str::FromStr for TrainingView {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unique" => Ok(TrainingView::Unique),
            "all" | "all-occurrences" => Ok(TrainingView::AllOccurrences),
            other => Err(format!("unknown view '{other}' (expected unique|all)")),
        }
    }
}

/// Multiset of passwords with occurrence counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    entries: BTreeMap<Vec<u8>, u64>,
    pub leak_name: String,
    pub max_len: usize,
}

impl Corpus {
    pub fn new(leak_name: impl Into<String>, max_len: usize) -> Self {
        Corpus {
            entries: BTreeMap::new(),
            leak_name: leak_name.into(),
            max_len,
        }
    }

    /// Adds `count` occurrences. Returns false (and adds nothing) when the
    /// password is empty, longer than `max_len`, or `count` is zero.
    pub fn add(&mut self, password: &[u8], count: u64) -> bool {
        if password.is_empty() || password.len() > self.max_len || count == 0 {
            return false;
        }
        *self.entries.entry(password.to_vec()).or_insert(0) += count;
        true
    }

    pub fn from_counts<'a>(
        leak_name: impl Into<String>,
        max_len: usize,
        counts: impl IntoIterator<Item = (&'a [u8], u64)>,
    ) -> Self {
        let mut corpus = Corpus::new(leak_name, max_len);
        for (pw, count) in counts {
            corpus.add(pw, count);
        }
        corpus
    }

    pub fn entries(&self) -> &BTreeMap<Vec<u8>, u64> {
        &self.entries
    }

    pub fn count(&self, password: &[u8]) -> u64 {
        self.entries.get(password).copied().unwrap_or(0)
    }

    pub fn contains(&self, password: &[u8]) -> bool {
        self.entries.contains_key(password)
    }

    pub fn unique_len(&self) -> usize {
        self.entries.len()
    }

    pub fn total_occurrences(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Passwords under the given view, in key order; occurrences of one
    /// password are adjacent.
    pub fn view(&self, view: TrainingView) -> Vec<&[u8]> {
        match view {
            TrainingView::Unique => self.entries.keys().map(Vec::as_slice).collect(),
            TrainingView::AllOccurrences => self
                .entries
                .iter()
                .flat_map(|(pw, &c)| std::iter::repeat_n(pw.as_slice(), c as usize))
                .collect(),
        }
    }

    /// The `n` most frequent passwords, ties broken by byte order.
    pub fn most_frequent(&self, n: usize) -> Vec<(&[u8], u64)> {
        let mut all: Vec<(&[u8], u64)> = self
            .entries
            .iter()
            .map(|(k, &v)| (k.as_slice(), v))
            .collect();
        all.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        all.truncate(n);
        all
    }

    /// Writes the corpus as `count<TAB>password` lines.
    pub fn to_pairs_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (pw, count) in &self.entries {
            out.extend_from_slice(count.to_string().as_bytes());
            out.push(b'\t');
            out.extend_from_slice(pw);
            out.push(b'\n');
        }
        out
    }
}

/// Splits raw bytes into lines, stripping a trailing CR and dropping empties.
pub fn raw_lines(data: &[u8]) -> impl Iterator<Item = (usize, &[u8])> {
    data.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| (i + 1, line.strip_suffix(b"\r").unwrap_or(line)))
        .filter(|(_, line)| !line.is_empty())
}

fn parse_pair(line: &[u8], lineno: usize) -> Result<(u64, &[u8]), CorpusError> {
    let start = line
        .iter()
        .position(|&b| b != b' ' && b != b'\t')
        .unwrap_or(line.len());
    let rest = &line[start..];
    let sep = rest
        .iter()
        .position(|&b| b == b' ' || b == b'\t')
        .ok_or_else(|| CorpusError::Format {
            line: lineno,
            msg: "missing separator between count and password".into(),
        })?;
    let field = &rest[..sep];
    let count = std::str::from_utf8(field)
        .ok()
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| CorpusError::Format {
            line: lineno,
            msg: format!(
                "count field '{}' is not numeric",
                String::from_utf8_lossy(field)
            ),
        })?;
    Ok((count, &rest[sep + 1..]))
}

/// Parses leak bytes already in memory.
pub fn parse_leak(
    data: &[u8],
    leak_name: &str,
    max_len: usize,
    format: LeakFormat,
) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::new(leak_name, max_len);
    for (lineno, line) in raw_lines(data) {
        match format {
            LeakFormat::Lines => {
                corpus.add(line, 1);
            }
            LeakFormat::Pairs => {
                let (count, pw) = parse_pair(line, lineno)?;
                corpus.add(pw, count);
            }
        }
    }
    Ok(corpus)
}

pub fn load_leak(path: &Path, max_len: usize, format: LeakFormat) -> Result<Corpus, CorpusError> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_leak(&data, &name, max_len, format)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitStats {
    pub source_occurrences: u64,
    pub source_unique: usize,
    pub train_occurrences: u64,
    pub train_unique: usize,
    pub held_out_occurrences: u64,
    pub test_size: usize,
    /// Highest source-leak frequency among test passwords.
    pub max_test_frequency: u64,
    /// Mean source-leak frequency of test passwords.
    pub mean_test_frequency: f64,
}

impl SplitStats {
    pub fn to_kv_text(&self, spec: &SplitSpec) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "train_fraction={}", spec.train_fraction);
        let _ = writeln!(out, "seed={}", spec.seed);
        let _ = writeln!(out, "source_occurrences={}", self.source_occurrences);
        let _ = writeln!(out, "source_unique={}", self.source_unique);
        let _ = writeln!(out, "train_occurrences={}", self.train_occurrences);
        let _ = writeln!(out, "train_unique={}", self.train_unique);
        let _ = writeln!(out, "held_out_occurrences={}", self.held_out_occurrences);
        let _ = writeln!(out, "test_size={}", self.test_size);
        let _ = writeln!(out, "max_test_frequency={}", self.max_test_frequency);
        let _ = writeln!(out, "mean_test_frequency={:.6}", self.mean_test_frequency);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub train: Corpus,
    pub test: BTreeSet<Vec<u8>>,
    pub stats: SplitStats,
}

impl SplitResult {
    /// Writes `train.tsv` (pairs), `test.txt` (lines) and `stats.txt`.
    pub fn write_manifests(&self, dir: &Path, spec: &SplitSpec) -> Result<(), CorpusError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| CorpusError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let train_path = dir.join("train.tsv");
        fs::write(&train_path, self.train.to_pairs_bytes()).map_err(io_err(&train_path))?;
        let test_path = dir.join("test.txt");
        fs::write(&test_path, lines_bytes(self.test.iter())).map_err(io_err(&test_path))?;
        let stats_path = dir.join("stats.txt");
        fs::write(&stats_path, self.stats.to_kv_text(spec)).map_err(io_err(&stats_path))?;
        Ok(())
    }
}

/// Newline-terminated concatenation of raw passwords.
pub fn lines_bytes<'a>(items: impl IntoIterator<Item = &'a Vec<u8>>) -> Vec<u8> {
    let mut out = Vec::new();
    for pw in items {
        out.extend_from_slice(pw);
        out.push(b'\n');
    }
    out
}

/// Occurrence-level split: every occurrence is shuffled as its own item, the
/// first `floor(f * N)` become training data, and the test set holds the
/// distinct held-out passwords that never reached the training split.
pub fn split_rockyou_style(corpus: &Corpus, spec: &SplitSpec) -> Result<SplitResult, CorpusError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(CorpusError::BadFraction(spec.train_fraction));
    }
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let keys: Vec<&[u8]> = corpus.entries.keys().map(Vec::as_slice).collect();
    let mut occurrences: Vec<u32> = Vec::with_capacity(corpus.total_occurrences() as usize);
    for (idx, count) in corpus.entries.values().enumerate() {
        occurrences.extend(std::iter::repeat_n(idx as u32, *count as usize));
    }
    StreamRng::new(spec.seed).shuffle(&mut occurrences);

    let n = occurrences.len();
    let n_train = (spec.train_fraction * n as f64).floor() as usize;
    let mut train = Corpus::new(format!("{}-train", corpus.leak_name), corpus.max_len);
    for &idx in &occurrences[..n_train] {
        train.add(keys[idx as usize], 1);
    }
    let test: BTreeSet<Vec<u8>> = occurrences[n_train..]
        .iter()
        .map(|&idx| keys[idx as usize])
        .filter(|pw| !train.contains(pw))
        .map(<[u8]>::to_vec)
        .collect();

    let freqs: Vec<u64> = test.iter().map(|pw| corpus.count(pw)).collect();
    let stats = SplitStats {
        source_occurrences: n as u64,
        source_unique: corpus.unique_len(),
        train_occurrences: n_train as u64,
        train_unique: train.unique_len(),
        held_out_occurrences: (n - n_train) as u64,
        test_size: test.len(),
        max_test_frequency: freqs.iter().copied().max().unwrap_or(0),
        mean_test_frequency: if freqs.is_empty() {
            0.0
        } else {
            freqs.iter().sum::<u64>() as f64 / freqs.len() as f64
        },
    };
    Ok(SplitResult { train, test, stats })
}

/// All counts set to one.
pub fn dedupe(corpus: &Corpus) -> Corpus {
    Corpus {
        entries: corpus.entries.keys().map(|k| (k.clone(), 1)).collect(),
        leak_name: corpus.leak_name.clone(),
        max_len: corpus.max_len,
    }
}

/// Removes every password present in any exclusion corpus.
pub fn cross_eval_filter(test: &BTreeSet<Vec<u8>>, exclusions: &[&Corpus]) -> BTreeSet<Vec<u8>> {
    test.iter()
        .filter(|pw| !exclusions.iter().any(|c| c.contains(pw)))
        .cloned()
        .collect()
}
