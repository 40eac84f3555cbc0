//! Crate-wide error and its process exit code.

use crate::corpus::CorpusError;
use crate::eval::EvalError;
use crate::gpt::GptError;
use crate::guided::GuidedError;
use crate::persist::PersistError;
use crate::strength::StrengthError;
use crate::tokenizer::TokenizerError;
use crate::vqt::VqtError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Gpt(#[from] GptError),
    #[error(transparent)]
    Guided(#[from] GuidedError),
    #[error(transparent)]
    Vqt(#[from] VqtError),
    #[error(transparent)]
    Strength(#[from] StrengthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Persist(#[from] PersistError),
}

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

fn gpt_code(e: &GptError) -> i32 {
    match e {
        GptError::NonFiniteLoss { .. } => EXIT_NUMERICAL,
        GptError::Config(_) | GptError::InvalidOpts(_) => EXIT_USAGE,
        GptError::Nn(_) => EXIT_NUMERICAL,
        GptError::Tokenizer(_)
        | GptError::MalformedPrefix(_)
        | GptError::MalformedSequence(_)
        | GptError::EmptyTraining => EXIT_DATA,
    }
}

fn guided_code(e: &GuidedError) -> i32 {
    match e {
        GuidedError::ZeroMass { .. } => EXIT_NUMERICAL,
        GuidedError::Gpt(g) => gpt_code(g),
        GuidedError::Parse { .. } | GuidedError::TooLong { .. } => EXIT_USAGE,
        GuidedError::TemplateMismatch => EXIT_DATA,
    }
}

fn vqt_code(e: &VqtError) -> i32 {
    match e {
        VqtError::Config(_) => EXIT_USAGE,
        VqtError::Gpt(g) => gpt_code(g),
        VqtError::Nn(_) => EXIT_NUMERICAL,
        VqtError::Tokenizer(_) => EXIT_DATA,
    }
}

impl Error {
    /// 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => EXIT_USAGE,
            Error::Io { .. } | Error::Corpus(_) | Error::Tokenizer(_) | Error::Strength(_) => {
                EXIT_DATA
            }
            Error::Gpt(e) => gpt_code(e),
            Error::Guided(e) => guided_code(e),
            Error::Vqt(e) => vqt_code(e),
            Error::Eval(e) => match e {
                EvalError::Budgets(_) | EvalError::Quantile(_) | EvalError::TooManyPools { .. } => {
                    EXIT_USAGE
                }
                EvalError::Gpt(g) => gpt_code(g),
                EvalError::Guided(g) => guided_code(g),
                EvalError::Vqt(v) => vqt_code(v),
                _ => EXIT_DATA,
            },
            Error::Persist(e) => match e {
                PersistError::Config { .. } | PersistError::UnknownKey(_) => EXIT_USAGE,
                PersistError::Gpt(g) => gpt_code(g),
                PersistError::Vqt(v) => vqt_code(v),
                _ => EXIT_DATA,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(Error::Usage("x".into()).exit_code(), 1);
        assert_eq!(
            Error::from(GptError::NonFiniteLoss {
                step: 0,
                loss: f64::NAN
            })
            .exit_code(),
            3
        );
        assert_eq!(
            Error::from(GuidedError::ZeroMass { slot: 1 }).exit_code(),
            3
        );
        assert_eq!(
            Error::from(PersistError::ChecksumMismatch {
                stored: 0,
                computed: 1
            })
            .exit_code(),
            2
        );
        assert_eq!(Error::from(CorpusError::EmptyCorpus).exit_code(), 2);
        assert_eq!(
            Error::from(PersistError::UnknownKey("k".into())).exit_code(),
            1
        );
        assert_eq!(
            Error::from(EvalError::Gpt(GptError::NonFiniteLoss {
                step: 1,
                loss: 1.0
            }))
            .exit_code(),
            3
        );
    }
}
