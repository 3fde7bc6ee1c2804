//! The reader: pair encoding, key-turn and knowledge refinement, dual
//! co-attention, fusion and option scoring.

pub mod checkpoint;
mod example;
mod forward;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use example::{DialogueExample, ExamplePipeline, OptionPipeline};
pub use forward::{
    duma, encode_pair, example_logits, forward, layout_pair, predict, refine, refine_key_turns, refine_knowledge,
    EncodedPair, FactSource, ForwardTrace, Prediction, RefinedReprs, SPECIAL_TOKENS,
};
pub use params::{Ablation, KktParams};
