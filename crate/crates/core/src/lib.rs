//! Dialogue multi-choice reading comprehension with knowledge and key-turn
//! refinement.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: fp64 tensors and a reverse-mode tape.
//! - [`attention`]: multi-head attention, the tokenizer and a small
//!   transformer encoder used as the language-model stand-in.
//! - [`knowledge`]: weighted triple store, fact rewriting and encoding,
//!   content-word tagging and top-p retrieval.
//! - [`keyturns`]: entailment scoring of turns and top-k key-turn selection.
//! - [`model`]: the refinement, dual co-attention fusion and decoding stack.
//! - [`harness`]: datasets, synthetic data, training, evaluation and sweeps.

pub mod attention;
pub mod error;
pub mod harness;
pub mod keyturns;
pub mod knowledge;
pub mod model;
pub mod tensor;

pub use error::{KktError, Result};
