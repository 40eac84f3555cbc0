use super::{Decoder, GptError, GptModel};
use crate::rng::StreamRng;
use crate::tokenizer::VOCAB_SIZE;

const SAMPLE_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOpts {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
    /// Cap on generated symbols; clamped to the model's `max_len`.
    pub max_new: usize,
}

impl Default for SampleOpts {
    fn default() -> Self {
        SampleOpts {
            temperature: 1.0,
            top_k: None,
            seed: 0,
            max_new: usize::MAX,
        }
    }
}

impl SampleOpts {
    pub fn validate(&self, vocab: usize) -> Result<(), GptError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GptError::InvalidOpts(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab {
                return Err(GptError::InvalidOpts(format!(
                    "top_k {k} outside 1..={vocab}"
                )));
            }
        }
        Ok(())
    }
}

/// Distribution a sampler draws from: logits over the tokens `allowed`
/// admits, divided by the temperature, optionally cut to the `top_k` most
/// likely (ties to the lower id) and renormalized.
pub fn sampling_distribution(
    logits: &[f32],
    temperature: f64,
    top_k: Option<usize>,
    allowed: impl Fn(usize) -> bool,
) -> Vec<f64> {
    let mut z: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if allowed(i) {
                l as f64 / temperature
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    if let Some(k) = top_k {
        let mut order: Vec<usize> = (0..z.len()).filter(|&i| z[i] > f64::NEG_INFINITY).collect();
        if k < order.len() {
            order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
            for &i in &order[k..] {
                z[i] = f64::NEG_INFINITY;
            }
        }
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; z.len()];
    }
    let mut p: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= s;
    }
    p
}

/// Inverse-CDF pick for a uniform draw `u` in `[0, 1)`.
pub fn pick_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Samples `count` payloads (without sentinels). Sample `first + j` always
/// uses RNG stream `first + j` of the seed, so results do not depend on
/// how a run is split into calls or workers. BOS is never emitted.
pub fn sample_ids(
    model: &GptModel,
    opts: &SampleOpts,
    first: u64,
    count: usize,
) -> Result<Vec<Vec<u32>>, GptError> {
    let cfg = &model.config;
    opts.validate(cfg.vocab)?;
    let (bos, eos) = (cfg.bos(), cfg.eos());
    let cap = opts.max_new.min(cfg.max_len);
    let mut out = Vec::with_capacity(count);
    let mut start = 0usize;
    while start < count {
        let n = SAMPLE_BATCH.min(count - start);
        let mut rngs: Vec<StreamRng> = (0..n)
            .map(|j| StreamRng::stream(opts.seed, first + (start + j) as u64))
            .collect();
        let mut seqs: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut done = vec![cap == 0; n];
        let mut tokens = vec![bos; n];
        let mut dec = Decoder::new(model, n)?;
        while done.iter().any(|d| !d) {
            let logits = dec.step(&tokens)?;
            for r in 0..n {
                if done[r] {
                    continue;
                }
                let row = &logits[r * cfg.vocab..(r + 1) * cfg.vocab];
                let p =
                    sampling_distribution(row, opts.temperature, opts.top_k, |i| i as u32 != bos);
                let t = pick_index(&p, rngs[r].uniform()) as u32;
                if t == eos {
                    done[r] = true;
                } else {
                    seqs[r].push(t);
                    tokens[r] = t;
                    done[r] = seqs[r].len() >= cap;
                }
            }
        }
        out.extend(seqs);
        start += n;
    }
    Ok(out)
}

/// Samples `n` passwords from a byte-level model.
pub fn sample_many(
    model: &GptModel,
    opts: &SampleOpts,
    n: usize,
) -> Result<Vec<Vec<u8>>, GptError> {
    sample_range(model, opts, 0, n)
}

/// Samples `first..first + n`, each on its own RNG stream.
pub fn sample_range(
    model: &GptModel,
    opts: &SampleOpts,
    first: u64,
    n: usize,
) -> Result<Vec<Vec<u8>>, GptError> {
    if model.config.vocab != VOCAB_SIZE {
        return Err(GptError::Config(format!(
            "byte sampling needs vocab {VOCAB_SIZE}"
        )));
    }
    Ok(sample_ids(model, opts, first, n)?
        .into_iter()
        .map(|s| s.into_iter().map(|t| t as u8).collect())
        .collect())
}

/// A single password: sample 0 of the seed's streams.
pub fn sample(model: &GptModel, opts: &SampleOpts) -> Result<Vec<u8>, GptError> {
    Ok(sample_many(model, opts, 1)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::super::{next_distribution, train_sequences, GptConfig};
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn top_k_ties_go_to_lowest_id() {
        let p = sampling_distribution(&[1.0, 3.0, 3.0, 0.0], 1.0, Some(1), |_| true);
        assert_eq!(p, vec![0.0, 1.0, 0.0, 0.0]);
        let p = sampling_distribution(&[1.0, 3.0, 3.0, 0.0], 1.0, Some(2), |_| true);
        assert_eq!(p, vec![0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn masking_renormalizes() {
        let p = sampling_distribution(&[0.0, 0.0, 5.0], 1.0, None, |i| i != 2);
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn pick_index_inverse_cdf() {
        let p = [0.25, 0.0, 0.75];
        assert_eq!(pick_index(&p, 0.0), 0);
        assert_eq!(pick_index(&p, 0.2499), 0);
        assert_eq!(pick_index(&p, 0.25), 2);
        assert_eq!(pick_index(&p, 0.999_999_999), 2);
    }

    #[test]
    fn invalid_options_rejected() {
        let m = GptModel::init(tiny(258, 3, 0)).unwrap();
        for o in [
            SampleOpts {
                temperature: 0.0,
                ..Default::default()
            },
            SampleOpts {
                top_k: Some(0),
                ..Default::default()
            },
            SampleOpts {
                top_k: Some(259),
                ..Default::default()
            },
        ] {
            assert!(matches!(
                sample_many(&m, &o, 1),
                Err(GptError::InvalidOpts(_))
            ));
        }
    }

    #[test]
    fn samples_respect_cap_and_split_invariance() {
        let m = GptModel::init(tiny(258, 5, 1)).unwrap();
        let opts = SampleOpts {
            seed: 4,
            max_new: 3,
            ..Default::default()
        };
        let all = sample_many(&m, &opts, 300).unwrap();
        assert!(all.iter().all(|s| s.len() <= 3));
        let mut parts = sample_range(&m, &opts, 0, 10).unwrap();
        parts.extend(sample_range(&m, &opts, 10, 290).unwrap());
        assert_eq!(all, parts);
        assert_eq!(all, sample_many(&m, &opts, 300).unwrap());
    }

    #[test]
    fn memorized_string_recovered_greedily() {
        let mut m = GptModel::init(GptConfig {
            epochs: 150,
            batch_size: 1,
            base_lr: 1e-2,
            ..tiny(258, 4, 8)
        })
        .unwrap();
        train_sequences(&mut m, &[vec![256, 97, 97, 257]]).unwrap();
        assert!(next_distribution(&m, &[256]).unwrap()[97] > 0.99);
        let greedy = SampleOpts {
            top_k: Some(1),
            ..Default::default()
        };
        assert_eq!(
            sample_many(&m, &greedy, 5).unwrap(),
            vec![b"aa".to_vec(); 5]
        );
        let cold = SampleOpts {
            temperature: 1e-3,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(sample(&m, &cold).unwrap(), b"aa");
        assert!(super::super::log_prob(&m, b"aa").unwrap() > -0.01);
    }

    proptest! {
        #[test]
        fn temperature_preserves_argmax(logits in prop::collection::vec(-20.0f32..20.0, 2..40), t in 0.05f64..20.0) {
            let base = sampling_distribution(&logits, 1.0, None, |_| true);
            let hot = sampling_distribution(&logits, t, None, |_| true);
            let am = |p: &[f64]| {
                let mut b = 0;
                for i in 0..p.len() { if p[i] > p[b] { b = i; } }
                b
            };
            prop_assert_eq!(am(&base), am(&hot));
            prop_assert!((hot.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
