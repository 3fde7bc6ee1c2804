//! Weighted triples, their rendering as facts, fact encoding and top-p
//! retrieval by content-word match.

mod embed;
mod pos;
mod store;
mod triple;

pub use embed::{encode_fact, FactCache};
pub use pos::{Pos, PosTagger};
pub use store::{load_kg, KnowledgeStore, Retrieved, TripleId};
pub use triple::{rewrite_triple, Fact, KnowledgeTriple, SurfaceTable};
