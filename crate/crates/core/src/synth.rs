//! Synthetic desk corpora: a lowercase word of 4 to 6 letters followed by
//! two digits. Words are drawn Zipf-distributed over a fixed 500-word list,
//! suffixes mix a short list of popular pairs with uniform `00`..`99`.

use crate::corpus::Corpus;
use crate::rng::StreamRng;

const WORDS: &str = include_str!("../data/synthetic_words.txt");
const POPULAR_SUFFIXES: [&str; 15] = [
    "12", "11", "01", "23", "69", "99", "00", "13", "22", "10", "07", "88", "21", "77", "14",
];

/// Longest synthetic password.
pub const SYNTH_MAX_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    /// Number of passwords drawn (with repetition).
    pub occurrences: usize,
    pub zipf_exponent: f64,
    pub popular_suffix_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            occurrences: 5000,
            zipf_exponent: 1.0,
            popular_suffix_fraction: 0.3,
            seed: 0,
        }
    }
}

/// The fixed word list, most popular first.
pub fn synthetic_words() -> Vec<&'static str> {
    WORDS
        .lines()
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .collect()
}

/// Draws `spec.occurrences` passwords in order.
pub fn synthetic_passwords(spec: &SynthSpec) -> Vec<Vec<u8>> {
    let words = synthetic_words();
    let mut cdf = Vec::with_capacity(words.len());
    let mut acc = 0.0;
    for r in 1..=words.len() {
        acc += (r as f64).powf(-spec.zipf_exponent);
        cdf.push(acc);
    }
    let mut rng = StreamRng::stream(spec.seed, 0x5e17_0000);
    (0..spec.occurrences)
        .map(|_| {
            let u = rng.uniform() * acc;
            let w = cdf.partition_point(|&c| c <= u).min(words.len() - 1);
            let mut pw = words[w].as_bytes().to_vec();
            if rng.uniform() < spec.popular_suffix_fraction {
                let s = POPULAR_SUFFIXES[rng.below(POPULAR_SUFFIXES.len() as u64) as usize];
                pw.extend_from_slice(s.as_bytes());
            } else {
                pw.extend_from_slice(format!("{:02}", rng.below(100)).as_bytes());
            }
            pw
        })
        .collect()
}

pub fn synthetic_corpus(spec: &SynthSpec) -> Corpus {
    let mut corpus = Corpus::new("synthetic", SYNTH_MAX_LEN);
    for pw in synthetic_passwords(spec) {
        corpus.add(&pw, 1);
    }
    corpus
}

/// Number of strings of the form `[a-z]{4,6}[0-9]{2}`.
pub fn template_space_size() -> f64 {
    (26f64.powi(4) + 26f64.powi(5) + 26f64.powi(6)) * 100.0
}

/// Expected fraction of any fixed target set hit by `guesses` independent
/// uniform draws over a space of `space` strings.
pub fn uniform_match_rate(space: f64, guesses: f64) -> f64 {
    -(guesses * (-1.0 / space).ln_1p()).exp_m1()
}
