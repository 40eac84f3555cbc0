//! Template-constrained sampling.
//!
//! Template grammar, one slot per item:
//!
//! | item   | slot                                   |
//! |--------|----------------------------------------|
//! | `l`    | lowercase `a-z`                        |
//! | `u`    | uppercase `A-Z`                        |
//! | `d`    | digit `0-9`                            |
//! | `p`    | ASCII punctuation (32 bytes)           |
//! | `*`    | any byte `0x00-0xFF`                   |
//! | `\xHH` | the fixed byte `HH` (two hex digits)   |
//! | `=c`   | the fixed byte `c` (any single byte)   |
//!
//! A template fixes the password length: EOS is never allowed inside it and
//! is forced after the last slot.

use std::f64::consts::LN_10;
use std::fmt;

use crate::gpt::{pick_index, sampling_distribution, Decoder, GptError, GptModel, SampleOpts};
use crate::rng::StreamRng;
use crate::tokenizer::VOCAB_SIZE;

const GUIDE_BATCH: usize = 256;
const MIN_MASS: f64 = 1e-30;

#[derive(Debug, thiserror::Error)]
pub enum GuidedError {
    #[error("template parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("template of {len} slots exceeds model max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("password does not match template")]
    TemplateMismatch,
    #[error("permitted tokens at slot {slot} carry total probability below 1e-30")]
    ZeroMass { slot: usize },
    #[error(transparent)]
    Gpt(#[from] GptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Lower,
    Upper,
    Digit,
    Punct,
    Any,
    Fixed(u8),
}

impl Slot {
    pub fn allows(self, b: u8) -> bool {
        match self {
            Slot::Lower => b.is_ascii_lowercase(),
            Slot::Upper => b.is_ascii_uppercase(),
            Slot::Digit => b.is_ascii_digit(),
            Slot::Punct => b.is_ascii_punctuation(),
            Slot::Any => true,
            Slot::Fixed(f) => b == f,
        }
    }

    pub fn allows_token(self, t: usize) -> bool {
        t < 256 && self.allows(t as u8)
    }
}

/// Token ids a slot permits, ascending.
pub fn class_members(slot: Slot) -> Vec<u32> {
    (0..=255u8)
        .filter(|&b| slot.allows(b))
        .map(u32::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    slots: Vec<Slot>,
}

impl Template {
    pub fn new(slots: Vec<Slot>) -> Result<Self, GuidedError> {
        if slots.is_empty() {
            return Err(GuidedError::Parse {
                pos: 0,
                msg: "empty template".into(),
            });
        }
        Ok(Template { slots })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn matches(&self, password: &[u8]) -> bool {
        password.len() == self.slots.len()
            && self.slots.iter().zip(password).all(|(s, &b)| s.allows(b))
    }

    /// Number of byte strings the template admits.
    pub fn support_size(&self) -> f64 {
        self.slots
            .iter()
            .map(|&s| class_members(s).len() as f64)
            .product()
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.slots {
            match s {
                Slot::Lower => f.write_str("l")?,
                Slot::Upper => f.write_str("u")?,
                Slot::Digit => f.write_str("d")?,
                Slot::Punct => f.write_str("p")?,
                Slot::Any => f.write_str("*")?,
                Slot::Fixed(b) => write!(f, "\\x{b:02x}")?,
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for Template {
    type Err = GuidedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_template(s)
    }
}

pub fn parse_template(s: &str) -> Result<Template, GuidedError> {
    let b = s.as_bytes();
    let mut slots = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let slot = match b[i] {
            b'l' => Slot::Lower,
            b'u' => Slot::Upper,
            b'd' => Slot::Digit,
            b'p' => Slot::Punct,
            b'*' => Slot::Any,
            b'=' => {
                let c = *b.get(i + 1).ok_or(GuidedError::Parse {
                    pos: i,
                    msg: "'=' must be followed by a byte".into(),
                })?;
                i += 1;
                Slot::Fixed(c)
            }
            b'\\' => {
                let hex = b
                    .get(i + 1..i + 4)
                    .filter(|h| h[0] == b'x')
                    .and_then(|h| std::str::from_utf8(&h[1..]).ok())
                    .filter(|h| h.bytes().all(|c| c.is_ascii_hexdigit()))
                    .ok_or(GuidedError::Parse {
                        pos: i,
                        msg: "expected \\xHH escape".into(),
                    })?;
                i += 3;
                Slot::Fixed(u8::from_str_radix(hex, 16).expect("validated hex"))
            }
            other => {
                return Err(GuidedError::Parse {
                    pos: i,
                    msg: format!("unexpected {:?}", other as char),
                })
            }
        };
        slots.push(slot);
        i += 1;
    }
    Template::new(slots)
}

fn check_model(model: &GptModel, template: &Template) -> Result<(), GuidedError> {
    if model.config.vocab != VOCAB_SIZE {
        return Err(GptError::Config(format!("guided sampling needs vocab {VOCAB_SIZE}")).into());
    }
    if template.len() > model.config.max_len {
        return Err(GuidedError::TooLong {
            len: template.len(),
            max_len: model.config.max_len,
        });
    }
    Ok(())
}

/// `ln` of the probability mass the slot admits under `logits`.
fn log_mass(logits: &[f32], slot: Slot) -> f64 {
    let lse = |keep: &dyn Fn(usize) -> bool| {
        let max = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v as f64));
        if max == f64::NEG_INFINITY {
            return max;
        }
        let s: f64 = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, &v)| (v as f64 - max).exp())
            .sum();
        max + s.ln()
    };
    lse(&|i| slot.allows_token(i)) - lse(&|_| true)
}

/// Guided samples `first..first + count`, each on its own RNG stream.
pub fn guided_sample_range(
    model: &GptModel,
    template: &Template,
    opts: &SampleOpts,
    first: u64,
    count: usize,
) -> Result<Vec<Vec<u8>>, GuidedError> {
    check_model(model, template)?;
    opts.validate(model.config.vocab)?;
    let vocab = model.config.vocab;
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    while start < count {
        let n = GUIDE_BATCH.min(count - start);
        let mut rngs: Vec<StreamRng> = (0..n)
            .map(|j| StreamRng::stream(opts.seed, first + (start + j) as u64))
            .collect();
        let mut dec = Decoder::new(model, n)?;
        let mut tokens = vec![model.config.bos(); n];
        let mut pws = vec![Vec::with_capacity(template.len()); n];
        for (k, &slot) in template.slots().iter().enumerate() {
            let logits = dec.step(&tokens)?;
            for r in 0..n {
                let row = &logits[r * vocab..(r + 1) * vocab];
                if log_mass(row, slot) < MIN_MASS.ln() {
                    return Err(GuidedError::ZeroMass { slot: k });
                }
                let p = sampling_distribution(row, opts.temperature, opts.top_k, |i| {
                    slot.allows_token(i)
                });
                let t = pick_index(&p, rngs[r].uniform());
                pws[r].push(t as u8);
                tokens[r] = t as u32;
            }
        }
        out.extend(pws);
        start += n;
    }
    Ok(out)
}

pub fn guided_sample_many(
    model: &GptModel,
    template: &Template,
    opts: &SampleOpts,
    n: usize,
) -> Result<Vec<Vec<u8>>, GuidedError> {
    guided_sample_range(model, template, opts, 0, n)
}

pub fn guided_sample(
    model: &GptModel,
    template: &Template,
    opts: &SampleOpts,
) -> Result<Vec<u8>, GuidedError> {
    Ok(guided_sample_many(model, template, opts, 1)?.remove(0))
}

/// `log10` probability of `password` under the masked, renormalized
/// process at temperature 1 without truncation.
pub fn template_logprob(
    model: &GptModel,
    template: &Template,
    password: &[u8],
) -> Result<f64, GuidedError> {
    check_model(model, template)?;
    if !template.matches(password) {
        return Err(GuidedError::TemplateMismatch);
    }
    let vocab = model.config.vocab;
    let mut dec = Decoder::new(model, 1)?;
    let mut token = model.config.bos();
    let mut total = 0.0;
    for (k, (&slot, &b)) in template.slots().iter().zip(password).enumerate() {
        let logits = dec.step(&[token])?;
        let row = &logits[..vocab];
        let mass = log_mass(row, slot);
        if mass < MIN_MASS.ln() {
            return Err(GuidedError::ZeroMass { slot: k });
        }
        let lse_all = crate::gpt::log_sum_exp(row);
        total += (row[b as usize] as f64 - lse_all - mass) / LN_10;
        token = b as u32;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpt::{log_prob, GptConfig};

    fn model(seed: u64, max_len: usize) -> GptModel {
        GptModel::init(GptConfig {
            d_model: 16,
            heads: 2,
            layers: 2,
            max_len,
            dropout: 0.0,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn parse_examples() {
        use Slot::*;
        assert_eq!(
            parse_template("lllldd").unwrap().slots(),
            &[Lower, Lower, Lower, Lower, Digit, Digit]
        );
        assert_eq!(parse_template("**").unwrap().slots(), &[Any, Any]);
        assert_eq!(
            parse_template("\\x71*").unwrap().slots(),
            &[Fixed(b'q'), Any]
        );
        assert_eq!(parse_template("=q*").unwrap().slots(), &[Fixed(b'q'), Any]);
        assert_eq!(parse_template("==").unwrap().slots(), &[Fixed(b'=')]);
        assert_eq!(parse_template("ullppdd").unwrap().len(), 7);
    }

    #[test]
    fn parse_errors_carry_position() {
        for (s, pos) in [
            ("llx", 2),
            ("", 0),
            ("l\\x7", 1),
            ("\\q41", 0),
            ("d=", 1),
            ("\\xzz", 0),
        ] {
            match parse_template(s) {
                Err(GuidedError::Parse { pos: p, .. }) => assert_eq!(p, pos, "{s}"),
                other => panic!("{s}: {other:?}"),
            }
        }
    }

    #[test]
    fn display_round_trips() {
        let t = parse_template("lu=Ad\\x00p*").unwrap();
        assert_eq!(parse_template(&t.to_string()).unwrap(), t);
    }

    #[test]
    fn class_sizes() {
        assert_eq!(class_members(Slot::Digit).len(), 10);
        assert_eq!(class_members(Slot::Lower).len(), 26);
        assert_eq!(class_members(Slot::Upper).len(), 26);
        assert_eq!(class_members(Slot::Any).len(), 256);
        let punct = class_members(Slot::Punct);
        let ranges: usize = [(0x21, 0x2f), (0x3a, 0x40), (0x5b, 0x60), (0x7b, 0x7e)]
            .iter()
            .map(|(a, b)| b - a + 1)
            .sum();
        assert_eq!(punct.len(), ranges);
        assert_eq!(ranges, 32);
    }

    #[test]
    fn fixed_slot_forces_output() {
        let m = model(1, 4);
        let t = parse_template("=a").unwrap();
        for s in guided_sample_many(&m, &t, &SampleOpts::default(), 50).unwrap() {
            assert_eq!(s, b"a");
        }
        assert_eq!(template_logprob(&m, &t, b"a").unwrap(), 0.0);
    }

    #[test]
    fn outputs_match_template() {
        let m = model(2, 8);
        for tpl in ["lllldd", "ullppdd", "uuuu**dd"] {
            let t = parse_template(tpl).unwrap();
            let opts = SampleOpts {
                seed: 5,
                ..Default::default()
            };
            for s in guided_sample_many(&m, &t, &opts, 300).unwrap() {
                assert!(t.matches(&s), "{tpl} {s:?}");
            }
        }
    }

    #[test]
    fn too_long_and_mismatch_rejected() {
        let m = model(2, 3);
        let t = parse_template("dddd").unwrap();
        assert!(matches!(
            guided_sample(&m, &t, &SampleOpts::default()),
            Err(GuidedError::TooLong { .. })
        ));
        let t = parse_template("dd").unwrap();
        assert!(matches!(
            template_logprob(&m, &t, b"1a"),
            Err(GuidedError::TemplateMismatch)
        ));
    }

    #[test]
    fn zero_mass_detected() {
        let mut m = model(3, 4);
        let head = m.params.get_mut("lm_head.w").unwrap();
        let vocab = 258;
        for (i, w) in head.data_mut().iter_mut().enumerate() {
            if (i % vocab) as u8 == b'7' && i % vocab < 256 {
                *w = 0.0;
            }
        }
        let lnf = m.params.get_mut("gpt.ln_f.g").unwrap();
        lnf.data_mut()[0] = 0.0;
        m.params.get_mut("gpt.ln_f.b").unwrap().data_mut()[0] = 1.0;
        for tok in 0..vocab {
            if (tok as u8).is_ascii_digit() && tok < 256 {
                m.params.get_mut("lm_head.w").unwrap().data_mut()[tok] = -200.0;
            }
        }
        let t = parse_template("d").unwrap();
        assert!(matches!(
            guided_sample(&m, &t, &SampleOpts::default()),
            Err(GuidedError::ZeroMass { slot: 0 })
        ));
    }

    #[test]
    fn exhaustive_dd_sums_to_one() {
        let m = model(4, 4);
        let t = parse_template("dd").unwrap();
        let mut total = 0.0;
        for a in b'0'..=b'9' {
            for b in b'0'..=b'9' {
                total += 10f64.powf(template_logprob(&m, &t, &[a, b]).unwrap());
            }
        }
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn wildcard_slots_preserve_sibling_ratios() {
        // Outputs that share a prefix keep the unconstrained likelihood ratio,
        // and each slot contributes log p - log(admitted mass).
        let m = model(6, 4);
        let t = parse_template("**").unwrap();
        let sibs: [&[u8]; 3] = [b"ab", b"a!", b"a\xff"];
        let g: Vec<f64> = sibs
            .iter()
            .map(|p| template_logprob(&m, &t, p).unwrap())
            .collect();
        let p_bos = crate::gpt::next_distribution(&m, &[256]).unwrap();
        let p_a = crate::gpt::next_distribution(&m, &[256, 97]).unwrap();
        for i in 1..3 {
            let want = p_a[sibs[i][1] as usize].log10() - p_a[sibs[0][1] as usize].log10();
            assert!(((g[i] - g[0]) - want).abs() < 1e-9);
        }
        let m1: f64 = p_bos[..256].iter().sum();
        let m2: f64 = p_a[..256].iter().sum();
        let want = (p_bos[97] / m1).log10() + (p_a[98] / m2).log10();
        assert!((g[0] - want).abs() < 1e-9, "{} vs {want}", g[0]);
        let _ = log_prob(&m, b"ab").unwrap();
    }
}
