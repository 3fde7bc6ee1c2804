use std::collections::HashMap;

use rayon::prelude::*;

use super::store::{KnowledgeStore, TripleId};
use crate::attention::{encode_hidden, self_attention, EncoderParams, MhaParams, Vocab};
use crate::error::{KktError, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Encodes fact text (no boundary tokens) and returns
/// `mean_rows(self_attention(last_hidden))`, a `[d_model]` vector.
pub fn encode_fact(g: &mut Graph, encoder: &EncoderParams, sa: &MhaParams, vocab: &Vocab, text: &str) -> Result<Var> {
    let ids = vocab.encode(text);
    if ids.is_empty() {
        return Err(KktError::EmptySequence("fact"));
    }
    let (h, _) = encode_hidden(g, encoder, &ids)?;
    let a = self_attention(g, sa, h)?;
    g.mean_rows(a)
}

/// Fact embeddings computed against one parameter version. Lookups against
/// a different version invalidate everything.
#[derive(Debug, Default)]
pub struct FactCache {
    version: Option<u64>,
    map: HashMap<TripleId, Tensor>,
}

impl FactCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, id: TripleId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    /// Makes sure every id in `ids` has an embedding for the current
    /// parameter version, computing missing ones in parallel.
    pub fn ensure(
        &mut self,
        params: &ParamStore,
        encoder: &EncoderParams,
        sa: &MhaParams,
        vocab: &Vocab,
        kg: &KnowledgeStore,
        ids: impl IntoIterator<Item = TripleId>,
    ) -> Result<()> {
        if self.version != Some(params.version()) {
            self.map.clear();
            self.version = Some(params.version());
        }
        let mut missing: Vec<TripleId> = ids.into_iter().filter(|id| !self.map.contains_key(id)).collect();
        missing.sort();
        missing.dedup();
        let computed: Vec<(TripleId, Tensor)> = missing
            .par_iter()
            .map(|&id| {
                let mut g = Graph::with_params(params);
                let v = encode_fact(&mut g, encoder, sa, vocab, &kg.fact(id).text)?;
                Ok((id, g.value(v).clone()))
            })
            .collect::<Result<_>>()?;
        self.map.extend(computed);
        Ok(())
    }
}
