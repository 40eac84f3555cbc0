//! Byte-level password tokenizer.
//!
//! Every raw byte maps to the token id of the same value, and two sentinels
//! follow the byte range: `BOS = 256` opens a password and `EOS = 257`
//! closes it. There is no out-of-vocabulary case.

use thiserror::Error;

/// Number of distinct byte tokens.
pub const BYTE_TOKENS: usize = 256;
/// Start-of-password sentinel.
pub const BOS: u32 = 256;
/// End-of-password sentinel.
pub const EOS: u32 = 257;
/// Vocabulary size of the byte tokenizer.
pub const VOCAB_SIZE: usize = 258;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("password is {len} bytes, limit is {max_len}")]
    LengthExceeded { len: usize, max_len: usize },
    #[error("malformed token sequence: {0}")]
    Malformed(String),
}

/// An encoded password, `[BOS, b1, .., bn, EOS]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    /// Wraps raw ids without validation. Use [`TokenSeq::validate`] or
    /// [`decode`] to check well-formedness.
    pub fn from_ids(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }

    /// Checks the sentinel placement and the interior byte range.
    pub fn validate(&self) -> Result<(), TokenizerError> {
        let ids = &self.0;
        if ids.len() < 2 {
            return Err(TokenizerError::Malformed(format!(
                "sequence of length {} cannot hold both sentinels",
                ids.len()
            )));
        }
        if ids[0] != BOS {
            return Err(TokenizerError::Malformed(format!(
                "expected BOS at position 0, found {}",
                ids[0]
            )));
        }
        let last = ids.len() - 1;
        if ids[last] != EOS {
            return Err(TokenizerError::Malformed(format!(
                "expected EOS at position {last}, found {}",
                ids[last]
            )));
        }
        if let Some((pos, id)) = ids[1..last]
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= BYTE_TOKENS)
        {
            return Err(TokenizerError::Malformed(format!(
                "non-byte id {id} at interior position {}",
                pos + 1
            )));
        }
        Ok(())
    }
}

/// Encodes a password as `[BOS] + bytes + [EOS]`.
pub fn encode(password: &[u8], max_len: usize) -> Result<TokenSeq, TokenizerError> {
    if password.len() > max_len {
        return Err(TokenizerError::LengthExceeded {
            len: password.len(),
            max_len,
        });
    }
    let mut ids = Vec::with_capacity(password.len() + 2);
    ids.push(BOS);
    ids.extend(password.iter().map(|&b| u32::from(b)));
    ids.push(EOS);
    Ok(TokenSeq(ids))
}

/// Inverse of [`encode`].
pub fn decode(tokens: &TokenSeq) -> Result<Vec<u8>, TokenizerError> {
    tokens.validate()?;
    let ids = tokens.ids();
    Ok(ids[1..ids.len() - 1].iter().map(|&id| id as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn encode_examples() {
        assert_eq!(encode(b"", 16).unwrap().ids(), &[256, 257]);
        assert_eq!(encode(b"a", 16).unwrap().ids(), &[256, 97, 257]);
        assert_eq!(
            encode(b"123456", 16).unwrap().ids(),
            &[256, 49, 50, 51, 52, 53, 54, 257]
        );
    }

    #[test]
    fn encode_rejects_long_input() {
        assert_eq!(
            encode(b"abcdef", 5),
            Err(TokenizerError::LengthExceeded { len: 6, max_len: 5 })
        );
        assert!(encode(b"abcde", 5).is_ok());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&TokenSeq::from_ids(vec![256, 257])).unwrap(), b"");
        assert_eq!(
            decode(&TokenSeq::from_ids(vec![256, 97, 257])).unwrap(),
            b"a"
        );
    }

    #[test]
    fn decode_rejects_malformed() {
        for ids in [
            vec![],
            vec![256],
            vec![97, 257],
            vec![256, 97],
            vec![256, 256, 257],
            vec![256, 257, 257],
            vec![256, 300, 257],
        ] {
            assert!(
                matches!(
                    decode(&TokenSeq::from_ids(ids.clone())),
                    Err(TokenizerError::Malformed(_))
                ),
                "{ids:?}"
            );
        }
    }

    #[test]
    fn sentinels_sit_outside_byte_range() {
        assert_ne!(BOS, EOS);
        assert!(BOS as usize >= BYTE_TOKENS && EOS as usize >= BYTE_TOKENS);
        assert_eq!(VOCAB_SIZE, 258);
    }

    #[test]
    fn random_round_trip_ten_thousand() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0x5eed);
        for _ in 0..10_000 {
            let len = rng.random_range(0..=16);
            let pw: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let seq = encode(&pw, 16).unwrap();
            assert_eq!(seq.len(), pw.len() + 2);
            assert_eq!(decode(&seq).unwrap(), pw);
        }
    }

    proptest! {
        #[test]
        fn ids_stay_in_vocab(pw in proptest::collection::vec(any::<u8>(), 0..32)) {
            let seq = encode(&pw, 32).unwrap();
            prop_assert!(seq.ids().iter().all(|&id| (id as usize) < VOCAB_SIZE));
            prop_assert_eq!(seq.ids()[0], BOS);
            prop_assert_eq!(*seq.ids().last().unwrap(), EOS);
        }

        #[test]
        fn encoding_is_injective(
            a in proptest::collection::vec(any::<u8>(), 0..12),
            b in proptest::collection::vec(any::<u8>(), 0..12),
        ) {
            let (ea, eb) = (encode(&a, 12).unwrap(), encode(&b, 12).unwrap());
            prop_assert_eq!(a == b, ea == eb);
        }
    }
}
