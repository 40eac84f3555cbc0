//! Pattern-based password strength estimation in the style of zxcvbn.
//!
//! The password is covered by a minimum-cost sequence of matches
//! (dictionary words, reversed and l33t variants, repeats, character
//! sequences, brute-force runs). The guess count of a cover of `k` matches
//! is `k! * prod(guesses)`. The reported estimate is the largest such
//! minimum over all prefixes of the password, so appending bytes never
//! makes a password look weaker. A trailing truncated dictionary word is
//! priced as the cheapest word it could start.
//!
//! Scores bucket guesses at `10^3`, `10^6`, `10^8` and `10^10`, each with
//! the customary `+5` slack.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

const MIN_PREFIX_LEN: usize = 3;
const MAX_L33T_COMBOS: usize = 64;
const MIN_SINGLE: f64 = 11.0;
const MIN_MULTI: f64 = 51.0;

#[derive(Debug, thiserror::Error)]
pub enum StrengthError {
    #[error("reading dictionary {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dictionary line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Ranked word list. Words are stored lowercased.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub name: String,
    ranks: HashMap<Vec<u8>, u32>,
    prefixes: HashMap<Vec<u8>, u32>,
}

impl Dictionary {
    /// Builds from `(word, rank)` pairs; the best rank wins on duplicates.
    pub fn from_ranked<'a>(
        name: impl Into<String>,
        words: impl IntoIterator<Item = (&'a [u8], u32)>,
    ) -> Self {
        let mut ranks: HashMap<Vec<u8>, u32> = HashMap::new();
        for (w, r) in words {
            let w = w.to_ascii_lowercase();
            let e = ranks.entry(w).or_insert(r);
            *e = (*e).min(r);
        }
        let mut prefixes: HashMap<Vec<u8>, u32> = HashMap::new();
        for (w, &r) in &ranks {
            for l in MIN_PREFIX_LEN..w.len() {
                let e = prefixes.entry(w[..l].to_vec()).or_insert(r);
                *e = (*e).min(r);
            }
        }
        Dictionary {
            name: name.into(),
            ranks,
            prefixes,
        }
    }

    /// Parses `rank<TAB>word` lines. Ranks are 1-based and unique.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, StrengthError> {
        let mut pairs = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (r, w) = line.split_once('\t').ok_or(StrengthError::Format {
                line: i + 1,
                msg: "expected rank<TAB>word".into(),
            })?;
            let rank: u32 = r.trim().parse().map_err(|_| StrengthError::Format {
                line: i + 1,
                msg: format!("bad rank {r:?}"),
            })?;
            if rank == 0 || !seen.insert(rank) {
                return Err(StrengthError::Format {
                    line: i + 1,
                    msg: format!("rank {rank} is zero or repeated"),
                });
            }
            pairs.push((w.as_bytes().to_vec(), rank));
        }
        Ok(Self::from_ranked(
            name,
            pairs.iter().map(|(w, r)| (w.as_slice(), *r)),
        ))
    }

    pub fn load(name: impl Into<String>, path: &Path) -> Result<Self, StrengthError> {
        let text = std::fs::read_to_string(path).map_err(|source| StrengthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(name, &text)
    }

    pub fn rank(&self, word: &[u8]) -> Option<u32> {
        self.ranks.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

/// The bundled lists: common passwords, English words, first names.
pub fn bundled_dictionaries() -> Vec<Dictionary> {
    [
        ("passwords", include_str!("../data/passwords.tsv")),
        ("english", include_str!("../data/english.tsv")),
        ("female_names", include_str!("../data/female_names.tsv")),
        ("male_names", include_str!("../data/male_names.tsv")),
    ]
    .into_iter()
    .map(|(n, t)| Dictionary::parse(n, t).expect("bundled dictionary is well-formed"))
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatternKind {
    Dictionary {
        dictionary: String,
        word: String,
        rank: u32,
    },
    ReverseDictionary {
        dictionary: String,
        word: String,
        rank: u32,
    },
    L33t {
        dictionary: String,
        word: String,
        rank: u32,
    },
    DictionaryPrefix {
        dictionary: String,
        prefix: String,
        rank: u32,
    },
    Repeat {
        unit: Vec<u8>,
        count: usize,
    },
    Sequence {
        delta: i32,
    },
    Bruteforce,
}

impl PatternKind {
    pub fn label(&self) -> &'static str {
        match self {
            PatternKind::Dictionary { .. } => "dictionary",
            PatternKind::ReverseDictionary { .. } => "reverse",
            PatternKind::L33t { .. } => "l33t",
            PatternKind::DictionaryPrefix { .. } => "prefix",
            PatternKind::Repeat { .. } => "repeat",
            PatternKind::Sequence { .. } => "sequence",
            PatternKind::Bruteforce => "bruteforce",
        }
    }
}

/// A pattern over `password[start..end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub kind: PatternKind,
    pub start: usize,
    pub end: usize,
    pub guesses_log10: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrengthScore {
    pub score: u8,
    pub guesses_log10: f64,
    /// Disjoint cover of the whole password, in order.
    pub matched_patterns: Vec<Match>,
}

impl StrengthScore {
    pub fn has_pattern(&self, label: &str) -> bool {
        self.matched_patterns
            .iter()
            .any(|m| m.kind.label() == label)
    }
}

impl fmt::Display for StrengthScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "score {} (10^{:.2} guesses)",
            self.score, self.guesses_log10
        )?;
        for m in &self.matched_patterns {
            write!(f, " {}[{}..{}]", m.kind.label(), m.start, m.end)?;
        }
        Ok(())
    }
}

/// Anything that can score a password 0 to 4.
pub trait StrengthEstimator: Send + Sync {
    fn estimate(&self, password: &[u8]) -> StrengthScore;
}

/// Bucket of a `log10` guess count.
pub fn score_from_log10(lg: f64) -> u8 {
    let cuts: [f64; 4] = [1e3 + 5.0, 1e6 + 5.0, 1e8 + 5.0, 1e10 + 5.0];
    cuts.iter().take_while(|&&c| lg >= c.log10()).count() as u8
}

/// Smallest unit whose consecutive repetition (at least twice) covers the
/// longest prefix of `password`.
pub fn repeat_detect(password: &[u8]) -> Option<(Vec<u8>, usize)> {
    let n = password.len();
    let mut best: Option<(usize, usize)> = None;
    for ul in 1..=n / 2 {
        let unit = &password[..ul];
        let mut k = 1;
        while (k + 1) * ul <= n && &password[k * ul..(k + 1) * ul] == unit {
            k += 1;
        }
        if k >= 2 && best.is_none_or(|(bu, bk)| ul * k > bu * bk) {
            best = Some((ul, k));
        }
    }
    best.map(|(ul, k)| (password[..ul].to_vec(), k))
}

const L33T: &[(u8, &[u8])] = &[
    (b'4', b"a"),
    (b'@', b"a"),
    (b'8', b"b"),
    (b'(', b"c"),
    (b'{', b"c"),
    (b'[', b"c"),
    (b'<', b"c"),
    (b'3', b"e"),
    (b'6', b"g"),
    (b'9', b"g"),
    (b'1', b"il"),
    (b'!', b"i"),
    (b'|', b"il"),
    (b'7', b"lt"),
    (b'0', b"o"),
    (b'$', b"s"),
    (b'5', b"s"),
    (b'+', b"t"),
    (b'%', b"x"),
    (b'2', b"z"),
];

fn l33t_options(b: u8) -> Option<&'static [u8]> {
    L33T.iter().find(|(c, _)| *c == b).map(|(_, o)| *o)
}

fn n_choose_k(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

fn uppercase_variations(token: &[u8]) -> f64 {
    let upper = token.iter().filter(|b| b.is_ascii_uppercase()).count() as u64;
    let lower = token.iter().filter(|b| b.is_ascii_lowercase()).count() as u64;
    if upper == 0 {
        return 1.0;
    }
    let letters: Vec<&u8> = token.iter().filter(|b| b.is_ascii_alphabetic()).collect();
    let first_only = letters.first().is_some_and(|b| b.is_ascii_uppercase()) && upper == 1;
    let last_only = letters.last().is_some_and(|b| b.is_ascii_uppercase()) && upper == 1;
    if lower == 0 || first_only || last_only {
        return 2.0;
    }
    (1..=upper.min(lower))
        .map(|i| n_choose_k(upper + lower, i))
        .sum()
}

fn l33t_variations(token: &[u8], subs: &[(u8, u8)]) -> f64 {
    let mut v = 1.0;
    let lower = token.to_ascii_lowercase();
    let mut seen = Vec::new();
    for &(from, to) in subs {
        if seen.contains(&(from, to)) {
            continue;
        }
        seen.push((from, to));
        let s = lower.iter().filter(|&&b| b == from).count() as u64;
        let u = lower.iter().filter(|&&b| b == to).count() as u64;
        if s == 0 || u == 0 {
            v *= 2.0;
        } else {
            v *= (1..=s.min(u)).map(|i| n_choose_k(s + u, i)).sum::<f64>();
        }
    }
    v
}

/// Candidate de-l33ted spellings of `token` with their substitutions.
fn unl33t(token: &[u8]) -> Vec<(Vec<u8>, Vec<(u8, u8)>)> {
    let mut out = vec![(Vec::with_capacity(token.len()), Vec::new())];
    for &b in token {
        match l33t_options(b) {
            Some(opts) => {
                let mut next = Vec::new();
                for (w, subs) in &out {
                    for &o in opts {
                        let mut w2: Vec<u8> = w.clone();
                        w2.push(o);
                        let mut s2: Vec<(u8, u8)> = subs.clone();
                        s2.push((b, o));
                        next.push((w2, s2));
                        if next.len() >= MAX_L33T_COMBOS {
                            break;
                        }
                    }
                }
                out = next;
            }
            None => {
                for (w, _) in out.iter_mut() {
                    w.push(b.to_ascii_lowercase());
                }
            }
        }
    }
    out.retain(|(_, s)| !s.is_empty());
    out
}

fn sequence_base(first: u8) -> f64 {
    if b"aAzZ019".contains(&first) {
        4.0
    } else if first.is_ascii_digit() {
        10.0
    } else {
        26.0
    }
}

/// Bundled heuristic estimator over a set of ranked dictionaries.
#[derive(Debug, Clone)]
pub struct HeuristicEstimator {
    dictionaries: Vec<Dictionary>,
}

impl Default for HeuristicEstimator {
    fn default() -> Self {
        Self::bundled()
    }
}

struct Cand {
    kind: PatternKind,
    start: usize,
    end: usize,
    lg: f64,
}

impl HeuristicEstimator {
    pub fn new(dictionaries: Vec<Dictionary>) -> Self {
        HeuristicEstimator { dictionaries }
    }

    pub fn bundled() -> Self {
        Self::new(bundled_dictionaries())
    }

    pub fn dictionaries(&self) -> &[Dictionary] {
        &self.dictionaries
    }

    fn best_rank(&self, word: &[u8]) -> Option<(u32, &str)> {
        self.dictionaries
            .iter()
            .filter_map(|d| d.rank(word).map(|r| (r, d.name.as_str())))
            .min_by_key(|(r, _)| *r)
    }

    fn best_prefix(&self, word: &[u8]) -> Option<(u32, &str)> {
        self.dictionaries
            .iter()
            .filter_map(|d| d.prefixes.get(word).map(|&r| (r, d.name.as_str())))
            .min_by_key(|(r, _)| *r)
    }

    /// Every interior match of `pw` (everything except prefix matches).
    fn matches(&self, pw: &[u8]) -> Vec<Cand> {
        let n = pw.len();
        let mut out = Vec::new();
        let text = |s: &[u8]| String::from_utf8_lossy(s).into_owned();
        for i in 0..n {
            for j in i + 1..=n {
                let tok = &pw[i..j];
                let lower = tok.to_ascii_lowercase();
                let upper_var = uppercase_variations(tok).log10();
                if let Some((r, d)) = self.best_rank(&lower) {
                    out.push(Cand {
                        kind: PatternKind::Dictionary {
                            dictionary: d.into(),
                            word: text(&lower),
                            rank: r,
                        },
                        start: i,
                        end: j,
                        lg: (r as f64).log10() + upper_var,
                    });
                }
                let rev: Vec<u8> = lower.iter().rev().copied().collect();
                if rev != lower {
                    if let Some((r, d)) = self.best_rank(&rev) {
                        out.push(Cand {
                            kind: PatternKind::ReverseDictionary {
                                dictionary: d.into(),
                                word: text(&rev),
                                rank: r,
                            },
                            start: i,
                            end: j,
                            lg: (r as f64).log10() + upper_var + 2f64.log10(),
                        });
                    }
                }
                if tok.iter().any(|&b| l33t_options(b).is_some()) {
                    let mut best: Option<Cand> = None;
                    for (w, subs) in unl33t(tok) {
                        if let Some((r, d)) = self.best_rank(&w) {
                            let lg = (r as f64).log10()
                                + upper_var
                                + l33t_variations(tok, &subs).log10();
                            if best.as_ref().is_none_or(|b| lg < b.lg) {
                                best = Some(Cand {
                                    kind: PatternKind::L33t {
                                        dictionary: d.into(),
                                        word: text(&w),
                                        rank: r,
                                    },
                                    start: i,
                                    end: j,
                                    lg,
                                });
                            }
                        }
                    }
                    out.extend(best);
                }
            }
        }
        for i in 0..n {
            if let Some((unit, k)) = repeat_detect(&pw[i..]) {
                let base = self.raw_cover(&unit).0.max(0.0);
                for c in 2..=k {
                    out.push(Cand {
                        kind: PatternKind::Repeat {
                            unit: unit.clone(),
                            count: c,
                        },
                        start: i,
                        end: i + unit.len() * c,
                        lg: base + (c as f64).log10(),
                    });
                }
            }
        }
        let mut i = 0;
        while i + 1 < n {
            let delta = pw[i + 1] as i32 - pw[i] as i32;
            let mut j = i + 1;
            while j + 1 < n && pw[j + 1] as i32 - pw[j] as i32 == delta {
                j += 1;
            }
            let min_len = if delta.abs() == 1 { 2 } else { 3 };
            if delta != 0 && delta.abs() <= 5 {
                for s in i..=j {
                    for e in s + min_len..=j + 1 {
                        let mut g = sequence_base(pw[s]) * (e - s) as f64;
                        if delta < 0 {
                            g *= 2.0;
                        }
                        out.push(Cand {
                            kind: PatternKind::Sequence { delta },
                            start: s,
                            end: e,
                            lg: g.log10(),
                        });
                    }
                }
            }
            i = j;
        }
        out
    }

    fn prefix_matches(&self, pw: &[u8], end: usize) -> Vec<Cand> {
        let mut out = Vec::new();
        for i in 0..end.saturating_sub(MIN_PREFIX_LEN - 1) {
            let tok = &pw[i..end];
            let lower = tok.to_ascii_lowercase();
            if let Some((r, d)) = self.best_prefix(&lower) {
                out.push(Cand {
                    kind: PatternKind::DictionaryPrefix {
                        dictionary: d.into(),
                        prefix: String::from_utf8_lossy(&lower).into_owned(),
                        rank: r,
                    },
                    start: i,
                    end,
                    lg: (r as f64).log10() + uppercase_variations(tok).log10(),
                });
            }
        }
        out
    }

    /// Minimum-cost cover of `pw` without prefix matches. Returns the
    /// `log10` guesses and the cover.
    fn raw_cover(&self, pw: &[u8]) -> (f64, Vec<Match>) {
        let covers = self.covers(pw, false);
        covers.into_iter().last().expect("cover of the full string")
    }

    /// For every prefix length `1..=n`, the cheapest cover of that prefix
    /// (optionally allowing a final truncated dictionary word).
    fn covers(&self, pw: &[u8], with_prefix: bool) -> Vec<(f64, Vec<Match>)> {
        let n = pw.len();
        if n == 0 {
            return vec![(0.0, Vec::new())];
        }
        let cands = self.matches(pw);
        let mut ending: Vec<Vec<&Cand>> = (0..=n).map(|_| Vec::new()).collect();
        for c in &cands {
            ending[c.end].push(c);
        }
        // best[j][k]: cheapest sum of log10 guesses covering pw[..j] with k matches
        // (brute-force runs are priced when closed by the next match).
        let inf = f64::INFINITY;
        let mut best = vec![vec![inf; n + 1]; n + 1];
        let mut back: Vec<Vec<Option<(usize, usize, Option<usize>)>>> =
            vec![vec![None; n + 1]; n + 1];
        best[0][0] = 0.0;
        let floor = |len: usize, whole: bool, lg: f64| {
            if whole {
                lg
            } else {
                lg.max(if len == 1 { MIN_SINGLE } else { MIN_MULTI }.log10())
            }
        };
        for j in 1..=n {
            for k in 1..=j {
                let mut cur = inf;
                let mut arg = None;
                for (ci, c) in ending[j].iter().enumerate() {
                    let prev = best[c.start][k - 1];
                    if prev < inf {
                        let v = prev + floor(c.end - c.start, false, c.lg);
                        if v < cur {
                            cur = v;
                            arg = Some((c.start, k - 1, Some(ci)));
                        }
                    }
                }
                for i in 0..j {
                    let prev = best[i][k - 1];
                    if prev < inf {
                        let v = prev + floor(j - i, false, (j - i) as f64);
                        if v < cur {
                            cur = v;
                            arg = Some((i, k - 1, None));
                        }
                    }
                }
                best[j][k] = cur;
                back[j][k] = arg;
            }
        }
        let ln_fact = |k: usize| (1..=k).map(|i| (i as f64).log10()).sum::<f64>();
        let rebuild = |j: usize, k: usize, tail: Option<&Cand>| {
            let mut out = Vec::new();
            let (mut j, mut k) = (j, k);
            while k > 0 {
                let (i, pk, ci) = back[j][k].expect("reachable state");
                let m = match ci {
                    Some(ci) => {
                        let c = ending[j][ci];
                        Match {
                            kind: c.kind.clone(),
                            start: c.start,
                            end: c.end,
                            guesses_log10: c.lg,
                        }
                    }
                    None => Match {
                        kind: PatternKind::Bruteforce,
                        start: i,
                        end: j,
                        guesses_log10: (j - i) as f64,
                    },
                };
                out.push(m);
                j = i;
                k = pk;
            }
            out.reverse();
            if let Some(c) = tail {
                out.push(Match {
                    kind: c.kind.clone(),
                    start: c.start,
                    end: c.end,
                    guesses_log10: c.lg,
                });
            }
            out
        };
        let mut result = Vec::with_capacity(n);
        for j in 1..=n {
            let mut top = (inf, 0usize, None::<&Cand>);
            for k in 1..=j {
                let v = best[j][k] + ln_fact(k);
                if v < top.0 {
                    top = (v, k, None);
                }
            }
            // a single match spanning the whole prefix is not floored
            let whole_brute = Cand {
                kind: PatternKind::Bruteforce,
                start: 0,
                end: j,
                lg: j as f64,
            };
            let mut whole: Option<&Cand> = None;
            for c in ending[j]
                .iter()
                .copied()
                .filter(|c| c.start == 0)
                .chain([&whole_brute])
            {
                if c.lg < top.0 && whole.is_none_or(|w| c.lg < w.lg) {
                    whole = Some(c);
                }
            }
            let pref = if with_prefix {
                self.prefix_matches(pw, j)
            } else {
                Vec::new()
            };
            for c in &pref {
                for k in 0..=c.start {
                    let prev = best[c.start][k];
                    if prev < inf {
                        let v = prev + floor(c.end - c.start, c.start == 0, c.lg) + ln_fact(k + 1);
                        if v < top.0 && whole.is_none_or(|w| v < w.lg) {
                            top = (v, k, Some(c));
                        }
                    }
                }
            }
            let entry = match (whole, top) {
                (Some(w), (v, _, _)) if w.lg <= v => (
                    w.lg,
                    vec![Match {
                        kind: w.kind.clone(),
                        start: 0,
                        end: j,
                        guesses_log10: w.lg,
                    }],
                ),
                (_, (v, k, Some(c))) => (v, rebuild(c.start, k, Some(c))),
                (_, (v, k, None)) => (v, rebuild(j, k, None)),
            };
            result.push(entry);
        }
        result
    }

    /// The raw `log10` cover cost of every prefix, with the largest one.
    pub fn prefix_costs(&self, password: &[u8]) -> Vec<f64> {
        self.covers(password, true)
            .into_iter()
            .map(|(v, _)| v)
            .collect()
    }
}

impl StrengthEstimator for HeuristicEstimator {
    fn estimate(&self, password: &[u8]) -> StrengthScore {
        if password.is_empty() {
            return StrengthScore {
                score: 0,
                guesses_log10: 0.0,
                matched_patterns: Vec::new(),
            };
        }
        let covers = self.covers(password, true);
        let lg = covers.iter().map(|(v, _)| *v).fold(0.0, f64::max);
        let (_, patterns) = covers.into_iter().last().expect("non-empty");
        StrengthScore {
            score: score_from_log10(lg),
            guesses_log10: lg,
            matched_patterns: patterns,
        }
    }
}
