//! Multi-head attention and the transformer encoder built on it.

mod encoder;
mod mha;
pub mod vocab;

pub use encoder::{encode, encode_hidden, pool, BlockParams, EncoderConfig, EncoderOutput, EncoderParams};
pub use mha::{mha, mha_with_weights, self_attention, HeadParams, MhaParams, MhaTrace};
pub use vocab::{tokenize, Vocab};
