pub mod corpus;
pub mod error;
pub mod eval;
pub mod gpt;
pub mod guided;
pub mod nn;
pub mod persist;
pub mod rng;
pub mod strength;
pub mod synth;
pub mod tokenizer;
pub mod vqt;
pub use error::Error;
