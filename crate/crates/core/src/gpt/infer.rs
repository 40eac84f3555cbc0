use std::collections::BTreeMap;
use std::f64::consts::{LN_10, LN_2};

use super::{lm_head_rows, GptError, GptModel};
use crate::nn::transformer::StackCache;
use crate::nn::Tensor;
use crate::tokenizer::{encode, VOCAB_SIZE};

const SCORE_BATCH: usize = 256;

/// Incremental decoder that advances a batch of sequences one position at a
/// time, caching keys and values.
pub struct Decoder<'a> {
    model: &'a GptModel,
    cache: StackCache<'a, f32>,
    batch: usize,
    wte: &'a Tensor<f32>,
    wpe: &'a Tensor<f32>,
    head: &'a Tensor<f32>,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a GptModel, batch: usize) -> Result<Self, GptError> {
        let cache = StackCache::new(
            &model.params,
            &model.config.stack(),
            batch,
            model.config.context(),
        )?;
        Ok(Decoder {
            model,
            cache,
            batch,
            wte: model.params.get("wte")?,
            wpe: model.params.get("wpe")?,
            head: model.params.get("lm_head.w")?,
        })
    }

    pub fn position(&self) -> usize {
        self.cache.position()
    }

    /// Feeds one token per row and returns the next-token logits,
    /// `[batch, vocab]` row-major.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Vec<f32>, GptError> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        if tokens.len() != self.batch {
            return Err(GptError::MalformedSequence(format!(
                "{} tokens for a batch of {}",
                tokens.len(),
                self.batch
            )));
        }
        let pos = self.cache.position();
        if pos >= cfg.context() {
            return Err(GptError::MalformedSequence(format!(
                "context of {} exhausted",
                cfg.context()
            )));
        }
        let mut x = vec![0f32; self.batch * d];
        for (row, &t) in x.chunks_exact_mut(d).zip(tokens) {
            if t as usize >= cfg.vocab {
                return Err(GptError::MalformedSequence(format!(
                    "token {t} outside vocabulary {}",
                    cfg.vocab
                )));
            }
            for ((o, &e), &p) in row
                .iter_mut()
                .zip(self.wte.row(t as usize))
                .zip(self.wpe.row(pos))
            {
                *o = e + p;
            }
        }
        self.cache.step(&mut x)?;
        let mut logits = vec![0f32; self.batch * cfg.vocab];
        lm_head_rows(&x, d, self.head, &mut logits);
        Ok(logits)
    }
}

/// `ln sum exp(row)` in double precision.
pub fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln()
}

/// `ln softmax(row)` in double precision.
pub fn log_softmax(row: &[f32]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Next-token distribution after a prefix that starts with BOS. BOS itself
/// keeps whatever probability the model assigns it.
pub fn next_distribution(model: &GptModel, prefix: &[u32]) -> Result<Vec<f64>, GptError> {
    let cfg = &model.config;
    if prefix.first() != Some(&cfg.bos()) {
        return Err(GptError::MalformedPrefix(
            "prefix must start with BOS".into(),
        ));
    }
    if prefix.len() >= cfg.context() {
        return Err(GptError::MalformedPrefix(format!(
            "prefix of {} tokens leaves no room in context {}",
            prefix.len(),
            cfg.context()
        )));
    }
    if let Some(&t) = prefix[1..].iter().find(|&&t| t >= cfg.bos()) {
        return Err(GptError::MalformedPrefix(format!(
            "sentinel or out-of-range id {t} after BOS"
        )));
    }
    let mut dec = Decoder::new(model, 1)?;
    let mut logits = Vec::new();
    for &t in prefix {
        logits = dec.step(&[t])?;
    }
    Ok(log_softmax(&logits).into_iter().map(f64::exp).collect())
}

/// Exact score of one framed sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqScore {
    /// `log10` probability of every token after BOS, EOS included.
    pub log10_prob: f64,
    /// Per-token `log10` conditionals, one per predicted token.
    pub token_log10: Vec<f64>,
    /// Entropy in bits of each predictive distribution used.
    pub entropy_bits: Vec<f64>,
}

impl SeqScore {
    pub fn mean_entropy(&self) -> f64 {
        self.entropy_bits.iter().sum::<f64>() / self.entropy_bits.len().max(1) as f64
    }
}

fn check_framed(model: &GptModel, s: &[u32]) -> Result<(), GptError> {
    let cfg = &model.config;
    let ok = s.len() >= 2
        && s.len() <= cfg.context()
        && s[0] == cfg.bos()
        && s[s.len() - 1] == cfg.eos()
        && s[1..s.len() - 1].iter().all(|&t| t < cfg.bos());
    if ok {
        Ok(())
    } else {
        Err(GptError::MalformedSequence(format!(
            "{s:?} is not a framed sequence for context {}",
            cfg.context()
        )))
    }
}

/// Scores framed sequences, batching those of equal length. Results are in
/// input order.
pub fn score_sequences(model: &GptModel, seqs: &[Vec<u32>]) -> Result<Vec<SeqScore>, GptError> {
    let vocab = model.config.vocab;
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        check_framed(model, s)?;
        by_len.entry(s.len()).or_default().push(i);
    }
    let mut out: Vec<Option<SeqScore>> = vec![None; seqs.len()];
    for (len, idxs) in by_len {
        for chunk in idxs.chunks(SCORE_BATCH) {
            let mut dec = Decoder::new(model, chunk.len())?;
            let mut scores: Vec<SeqScore> = chunk
                .iter()
                .map(|_| SeqScore {
                    log10_prob: 0.0,
                    token_log10: Vec::new(),
                    entropy_bits: Vec::new(),
                })
                .collect();
            for t in 0..len - 1 {
                let input: Vec<u32> = chunk.iter().map(|&i| seqs[i][t]).collect();
                let logits = dec.step(&input)?;
                for (r, &i) in chunk.iter().enumerate() {
                    let lp = log_softmax(&logits[r * vocab..(r + 1) * vocab]);
                    let target = seqs[i][t + 1] as usize;
                    let h: f64 = -lp
                        .iter()
                        .map(|&l| if l.is_finite() { l.exp() * l } else { 0.0 })
                        .sum::<f64>();
                    let sc = &mut scores[r];
                    sc.token_log10.push(lp[target] / LN_10);
                    sc.entropy_bits.push((h / LN_2).max(0.0));
                }
            }
            for (mut sc, &i) in scores.into_iter().zip(chunk) {
                sc.log10_prob = sc.token_log10.iter().sum();
                out[i] = Some(sc);
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|s| s.expect("every index scored"))
        .collect())
}

fn require_bytes(model: &GptModel) -> Result<(), GptError> {
    if model.config.vocab != VOCAB_SIZE {
        return Err(GptError::Config(format!(
            "byte-level scoring needs vocab {VOCAB_SIZE}, model has {}",
            model.config.vocab
        )));
    }
    Ok(())
}

/// Scores raw passwords against a byte-level model.
pub fn score_passwords(model: &GptModel, passwords: &[&[u8]]) -> Result<Vec<SeqScore>, GptError> {
    require_bytes(model)?;
    let seqs = passwords
        .iter()
        .map(|pw| encode(pw, model.config.max_len).map(|t| t.into_ids()))
        .collect::<Result<Vec<_>, _>>()?;
    score_sequences(model, &seqs)
}

/// `log10 P(password)`, including the end-of-password factor.
pub fn log_prob(model: &GptModel, password: &[u8]) -> Result<f64, GptError> {
    Ok(score_passwords(model, &[password])?.remove(0).log10_prob)
}

/// Entropy in bits of the predictive distribution at each of the
/// `|password| + 1` positions (the last one predicts EOS).
pub fn entropy_profile(model: &GptModel, password: &[u8]) -> Result<Vec<f64>, GptError> {
    Ok(score_passwords(model, &[password])?.remove(0).entropy_bits)
}

/// `log10` probability of guessing a given password of `length` symbols
/// uniformly from an alphabet of `alphabet_size`.
pub fn brute_force_logprob(length: usize, alphabet_size: usize) -> f64 {
    -(length as f64) * (alphabet_size as f64).log10()
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::super::{forward_logits, GptConfig};
    use super::*;
    use crate::nn::Graph;

    fn graph_logits(model: &GptModel, seq: &[u32]) -> Vec<f32> {
        let ids: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
        let mut g = Graph::<f32>::new();
        let v = forward_logits(
            &mut g,
            &model.params,
            &model.config,
            &ids,
            1,
            ids.len(),
            &mut None,
        )
        .unwrap();
        g.value(v).data().to_vec()
    }

    #[test]
    fn incremental_decoder_matches_full_forward() {
        let m = GptModel::init(tiny(258, 6, 11)).unwrap();
        let seq = [256u32, 104, 105, 33, 0, 255];
        let full = graph_logits(&m, &seq);
        let mut dec = Decoder::new(&m, 1).unwrap();
        for (t, &tok) in seq.iter().enumerate() {
            let step = dec.step(&[tok]).unwrap();
            for (a, b) in step.iter().zip(&full[t * 258..(t + 1) * 258]) {
                assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b} at {t}");
            }
        }
        assert!(dec.step(&[1]).is_ok());
        assert!(dec.step(&[1]).is_ok());
        assert!(dec.step(&[1]).is_err());
    }

    #[test]
    fn distribution_sums_to_one_and_depends_on_prefix_only() {
        let m = GptModel::init(tiny(258, 6, 2)).unwrap();
        let p = next_distribution(&m, &[256]).unwrap();
        assert_eq!(p.len(), 258);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p, next_distribution(&m, &[256]).unwrap());
        assert!(p[256] > 0.0);
        let q = next_distribution(&m, &[256, 97, 98]).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn malformed_prefixes_rejected() {
        let m = GptModel::init(tiny(258, 3, 2)).unwrap();
        for bad in [
            &[][..],
            &[97],
            &[256, 257],
            &[256, 1, 256],
            &[256, 1, 2, 3, 4],
        ] {
            assert!(
                matches!(
                    next_distribution(&m, bad),
                    Err(GptError::MalformedPrefix(_))
                ),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn log_prob_is_sum_of_path_conditionals() {
        let m = GptModel::init(tiny(258, 6, 4)).unwrap();
        let pw = b"x1!";
        let mut prefix = vec![256u32];
        let mut want = 0.0;
        for &b in pw
            .iter()
            .map(|b| *b as u32)
            .collect::<Vec<_>>()
            .iter()
            .chain(&[257])
        {
            let p = next_distribution(&m, &prefix).unwrap();
            want += p[b as usize].log10();
            prefix.push(b);
        }
        let got = log_prob(&m, pw).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(got <= 0.0);
    }

    #[test]
    fn entropy_profile_shape_and_first_position() {
        let m = GptModel::init(tiny(258, 8, 4)).unwrap();
        let a = entropy_profile(&m, b"abc").unwrap();
        let b = entropy_profile(&m, b"zz").unwrap();
        assert_eq!((a.len(), b.len()), (4, 3));
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert!(a.iter().all(|&h| h >= 0.0 && h <= (258f64).log2() + 1e-9));
    }

    #[test]
    fn uniform_logits_give_log2_258_bits() {
        let mut m = GptModel::init(tiny(258, 4, 1)).unwrap();
        m.params.get_mut("lm_head.w").unwrap().data_mut().fill(0.0);
        let h = entropy_profile(&m, b"q").unwrap();
        for v in h {
            assert!((v - (258f64).log2()).abs() < 1e-12);
        }
        assert!((log_prob(&m, b"q").unwrap() + 2.0 * (258f64).log10()).abs() < 1e-12);
    }

    #[test]
    fn batched_scores_equal_single_scores() {
        let m = GptModel::init(tiny(258, 8, 9)).unwrap();
        let pws: Vec<&[u8]> = vec![b"abc", b"", b"zzz", b"hello", b"abc"];
        let batch = score_passwords(&m, &pws).unwrap();
        for (pw, s) in pws.iter().zip(&batch) {
            let single = score_passwords(&m, &[pw]).unwrap().remove(0);
            assert!((single.log10_prob - s.log10_prob).abs() < 1e-9);
        }
        assert_eq!(batch[0], batch[4]);
    }

    #[test]
    fn length_limit_enforced() {
        let m = GptModel::init(tiny(258, 3, 9)).unwrap();
        assert!(matches!(log_prob(&m, b"abcd"), Err(GptError::Tokenizer(_))));
    }

    #[test]
    fn non_byte_models_refuse_password_scoring() {
        let m = GptModel::init(GptConfig {
            vocab: 12,
            ..tiny(12, 3, 0)
        })
        .unwrap();
        assert!(matches!(log_prob(&m, b"a"), Err(GptError::Config(_))));
        let s = score_sequences(&m, &[vec![10, 3, 11]]).unwrap();
        assert_eq!(s[0].token_log10.len(), 2);
    }

    #[test]
    fn brute_force_examples() {
        assert!((brute_force_logprob(16, 256) + 38.53).abs() < 0.005);
        assert_eq!(brute_force_logprob(1, 10), -1.0);
        assert!((brute_force_logprob(3, 256) + 7.2247).abs() < 1e-4);
    }
}
