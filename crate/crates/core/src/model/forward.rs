use std::collections::HashMap;
use std::ops::Range;

use super::example::{DialogueExample, ExamplePipeline};
use super::params::{Ablation, KktParams};
use crate::attention::vocab::{BOS_ID, EOS_ID, SEP_ID};
use crate::attention::{encode_hidden, mha, Vocab};
use crate::error::{KktError, Result};
use crate::keyturns::argmax;
use crate::knowledge::{encode_fact, FactCache, KnowledgeStore, TripleId};
use crate::tensor::{Graph, ParamStore, Var};

/// Encoder output split into context and QA rows.
#[derive(Clone, Debug)]
pub struct EncodedPair {
    /// `[l_c_tok×d_model]`
    pub h_c: Var,
    /// `[l_qa_tok×d_model]`, question then option, separators excluded.
    pub h_qa: Var,
    /// Row range of each turn within `h_c`. A turn cut away by truncation
    /// has an empty range.
    pub turn_spans: Vec<Range<usize>>,
    pub input_ids: Vec<usize>,
    pub truncated: bool,
}

impl EncodedPair {
    pub fn context_rows(&self) -> usize {
        self.turn_spans.last().map_or(0, |r| r.end)
    }
}

/// Number of boundary tokens in `[BOS] C [SEP] Q [SEP] A [EOS]`.
pub const SPECIAL_TOKENS: usize = 4;

/// Token ids, turn spans within the context, context rows, QA rows and
/// whether anything was truncated.
type Layout = (Vec<usize>, Vec<Range<usize>>, Range<usize>, Vec<usize>, bool);

/// Builds `[BOS] turns [SEP] question [SEP] option [EOS]`. When the input is
/// too long the context is cut from the front to at most three quarters of
/// `max_len`; the QA side is never cut.
pub fn layout_pair(vocab: &Vocab, max_len: usize, turns: &[&str], question: &str, option: &str) -> Result<Layout> {
    let turn_ids: Vec<Vec<usize>> = turns.iter().map(|t| vocab.encode(t)).collect();
    let q = vocab.encode(question);
    let a = vocab.encode(option);
    let qa_len = q.len() + a.len();
    if qa_len == 0 {
        return Err(KktError::EmptySequence("question and option"));
    }
    let ctx_len: usize = turn_ids.iter().map(Vec::len).sum();
    let mut drop = 0;
    let truncated = ctx_len + qa_len + SPECIAL_TOKENS > max_len;
    if truncated {
        let room = max_len.saturating_sub(qa_len + SPECIAL_TOKENS);
        let budget = room.min(max_len * 3 / 4);
        if budget == 0 {
            return Err(KktError::Validation(format!(
                "question and option take {qa_len} tokens, leaving no room for context within {max_len}"
            )));
        }
        drop = ctx_len.saturating_sub(budget);
    }
    let mut ids = vec![BOS_ID];
    let mut spans = Vec::with_capacity(turns.len());
    let mut row = 0;
    let mut skipped = 0;
    for t in &turn_ids {
        let cut = (drop - skipped).min(t.len());
        skipped += cut;
        let kept = &t[cut..];
        spans.push(row..row + kept.len());
        row += kept.len();
        ids.extend_from_slice(kept);
    }
    if row == 0 {
        return Err(KktError::EmptySequence("context"));
    }
    let ctx_rows = 1..1 + row;
    ids.push(SEP_ID);
    let q_start = ids.len();
    ids.extend_from_slice(&q);
    ids.push(SEP_ID);
    let a_start = ids.len();
    ids.extend_from_slice(&a);
    ids.push(EOS_ID);
    let qa_rows: Vec<usize> = (q_start..q_start + q.len()).chain(a_start..a_start + a.len()).collect();
    Ok((ids, spans, ctx_rows, qa_rows, truncated))
}

pub fn encode_pair(
    g: &mut Graph,
    params: &KktParams,
    vocab: &Vocab,
    turns: &[&str],
    question: &str,
    option: &str,
) -> Result<EncodedPair> {
    let (ids, turn_spans, ctx, qa_rows, truncated) =
        layout_pair(vocab, params.encoder.config.max_len, turns, question, option)?;
    if truncated {
        log::warn!("context truncated to fit {} tokens", params.encoder.config.max_len);
    }
    let (h, _) = encode_hidden(g, &params.encoder, &ids)?;
    let ctx_rows: Vec<usize> = ctx.collect();
    let h_c = g.select_rows(h, &ctx_rows)?;
    let h_qa = g.select_rows(h, &qa_rows)?;
    Ok(EncodedPair {
        h_c,
        h_qa,
        turn_spans,
        input_ids: ids,
        truncated,
    })
}

#[derive(Clone, Debug)]
pub struct RefinedReprs {
    /// Rows of the selected turns; `None` when nothing was selected.
    pub h_kt: Option<Var>,
    pub h_c_kt: Var,
    pub h_c_k: Var,
    pub h_qa_k: Var,
    /// `h_c_kt` is `h_c` because no key-turn rows were available.
    pub kt_identity: bool,
    /// `h_c_k` is `h_c` because there was no context knowledge.
    pub ck_identity: bool,
    /// `h_qa_k` is `h_qa` because there was no QA knowledge.
    pub qak_identity: bool,
}

/// Key-turn refinement: `(H_kt, MHA(H_c, H_kt, H_kt))`, or `H_c` itself when
/// no selected turn has rows.
pub fn refine_key_turns(
    g: &mut Graph,
    params: &KktParams,
    enc: &EncodedPair,
    key_turns: &[usize],
) -> Result<(Option<Var>, Var)> {
    let mut rows = Vec::new();
    for &t in key_turns {
        let span = enc.turn_spans.get(t).ok_or(KktError::Index {
            what: "key turn",
            index: t,
            size: enc.turn_spans.len(),
        })?;
        rows.extend(span.clone());
    }
    if rows.is_empty() {
        return Ok((None, enc.h_c));
    }
    let h_kt = g.select_rows(enc.h_c, &rows)?;
    let out = mha(g, &params.refine_kt, enc.h_c, h_kt, h_kt)?;
    Ok((Some(h_kt), out))
}

/// Knowledge refinement: `MHA(H_c, CK, CK)` and `MHA(H_QA, QAK, QAK)`, each
/// replaced by its input when the fact list is empty.
pub fn refine_knowledge(
    g: &mut Graph,
    params: &KktParams,
    enc: &EncodedPair,
    ck: Option<Var>,
    qak: Option<Var>,
) -> Result<(Var, Var)> {
    let h_c_k = match ck {
        Some(ck) => mha(g, &params.refine_ck, enc.h_c, ck, ck)?,
        None => enc.h_c,
    };
    let h_qa_k = match qak {
        Some(qak) => mha(g, &params.refine_qak, enc.h_qa, qak, qak)?,
        None => enc.h_qa,
    };
    Ok((h_c_k, h_qa_k))
}

pub fn refine(
    g: &mut Graph,
    params: &KktParams,
    enc: &EncodedPair,
    key_turns: &[usize],
    ck: Option<Var>,
    qak: Option<Var>,
) -> Result<RefinedReprs> {
    let (h_kt, h_c_kt) = refine_key_turns(g, params, enc, key_turns)?;
    let (h_c_k, h_qa_k) = refine_knowledge(g, params, enc, ck, qak)?;
    Ok(RefinedReprs {
        kt_identity: h_kt.is_none(),
        h_kt,
        h_c_kt,
        h_c_k,
        h_qa_k,
        ck_identity: ck.is_none(),
        qak_identity: qak.is_none(),
    })
}

/// Dual co-attention: `[mean(MHA(H_c, H_QA, H_QA)) ; mean(MHA(H_QA, H_c, H_c))]`.
pub fn duma(g: &mut Graph, params: &KktParams, h_c: Var, h_qa: Var) -> Result<Var> {
    for v in [h_c, h_qa] {
        if g.shape(v).len() != 2 || g.shape(v)[0] == 0 {
            return Err(KktError::Validation(format!(
                "dual co-attention needs non-empty sequences, got {:?}",
                g.shape(v)
            )));
        }
    }
    let m1 = mha(g, &params.duma_c, h_c, h_qa, h_qa)?;
    let m2 = mha(g, &params.duma_qa, h_qa, h_c, h_c)?;
    let a = g.mean_rows(m1)?;
    let b = g.mean_rows(m2)?;
    g.concat_last_axis(&[a, b])
}

/// Intermediate outputs of one option's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logit: Var,
    pub o_o: Var,
    pub o_kt: Option<Var>,
    pub o_k: Option<Var>,
    pub o_kkt: Option<Var>,
    pub o: Var,
    pub encoded: EncodedPair,
    pub truncated: bool,
}

/// Scalar score of option `option` given its key turns and stacked fact
/// embeddings (`[p×d_model]`, `None` for no facts).
#[allow(clippy::too_many_arguments)]
pub fn forward(
    g: &mut Graph,
    params: &KktParams,
    vocab: &Vocab,
    ex: &DialogueExample,
    option: usize,
    key_turns: &[usize],
    ck: Option<Var>,
    qak: Option<Var>,
) -> Result<ForwardTrace> {
    if option >= ex.options.len() {
        return Err(KktError::Index {
            what: "option",
            index: option,
            size: ex.options.len(),
        });
    }
    let ablation = params.ablation;
    let (turns, key_turns): (Vec<&str>, Vec<usize>) = if ablation == Ablation::KeyturnsOnly {
        if key_turns.is_empty() {
            return Err(KktError::Config(
                "keyturns-only reading needs at least one key turn".into(),
            ));
        }
        let mut sel = Vec::with_capacity(key_turns.len());
        for &t in key_turns {
            sel.push(ex.turns.get(t).map(String::as_str).ok_or(KktError::Index {
                what: "key turn",
                index: t,
                size: ex.turns.len(),
            })?);
        }
        let n = sel.len();
        (sel, (0..n).collect())
    } else {
        (ex.turns.iter().map(String::as_str).collect(), key_turns.to_vec())
    };
    let enc = encode_pair(g, params, vocab, &turns, &ex.question, &ex.options[option])?;
    let o_o = duma(g, params, enc.h_c, enc.h_qa)?;

    let o_kt = if ablation.uses_key_turns() {
        let (_, h_c_kt) = refine_key_turns(g, params, &enc, &key_turns)?;
        Some(duma(g, params, h_c_kt, enc.h_qa)?)
    } else {
        None
    };
    let o_k = if ablation.uses_knowledge() {
        let (h_c_k, h_qa_k) = refine_knowledge(g, params, &enc, ck, qak)?;
        Some(duma(g, params, h_c_k, h_qa_k)?)
    } else {
        None
    };
    let fusion_in = match (o_k, o_kt) {
        (Some(k), Some(kt)) => Some(g.concat_last_axis(&[k, kt])?),
        (Some(x), None) | (None, Some(x)) => Some(x),
        (None, None) => None,
    };
    let o_kkt = match (fusion_in, params.fusion_w, params.fusion_b) {
        (Some(x), Some(w), Some(b)) => {
            let (w, b) = (g.param(w), g.param(b));
            Some(g.linear(x, w, Some(b))?)
        }
        (None, _, _) => None,
        _ => {
            return Err(KktError::Config(format!(
                "ablation {ablation} is missing its fusion map"
            )))
        }
    };
    let o = match o_kkt {
        Some(kkt) => g.concat_last_axis(&[o_o, kkt])?,
        None => o_o,
    };
    let w = g.param(params.out_w);
    let logit = g.dot(w, o)?;
    Ok(ForwardTrace {
        logit,
        o_o,
        o_kt,
        o_k,
        o_kkt,
        o,
        truncated: enc.truncated,
        encoded: enc,
    })
}

/// Supplies fact embeddings to a graph: from a [`FactCache`] as constants
/// when one is given, otherwise encoded in the graph so that gradients reach
/// the encoder. Each fact is encoded at most once per graph.
pub struct FactSource<'a> {
    kg: Option<&'a KnowledgeStore>,
    cache: Option<&'a FactCache>,
    vars: HashMap<TripleId, Var>,
}

impl<'a> FactSource<'a> {
    pub fn none() -> Self {
        Self {
            kg: None,
            cache: None,
            vars: HashMap::new(),
        }
    }

    pub fn live(kg: &'a KnowledgeStore) -> Self {
        Self {
            kg: Some(kg),
            cache: None,
            vars: HashMap::new(),
        }
    }

    pub fn cached(kg: &'a KnowledgeStore, cache: &'a FactCache) -> Self {
        Self {
            kg: Some(kg),
            cache: Some(cache),
            vars: HashMap::new(),
        }
    }

    fn var(&mut self, g: &mut Graph, params: &KktParams, vocab: &Vocab, id: TripleId) -> Result<Var> {
        if let Some(&v) = self.vars.get(&id) {
            return Ok(v);
        }
        let v = match self.cache.and_then(|c| c.get(id)) {
            Some(t) => g.constant(t.clone()),
            None => {
                let kg = self
                    .kg
                    .ok_or_else(|| KktError::Config("facts requested without a knowledge graph".into()))?;
                if id.0 >= kg.len() {
                    return Err(KktError::Index {
                        what: "triple",
                        index: id.0,
                        size: kg.len(),
                    });
                }
                encode_fact(g, &params.encoder, &params.fact_sa, vocab, &kg.fact(id).text)?
            }
        };
        self.vars.insert(id, v);
        Ok(v)
    }

    /// `[n×d_model]` stack of the given facts, or `None` for an empty list.
    pub fn stack(&mut self, g: &mut Graph, params: &KktParams, vocab: &Vocab, ids: &[TripleId]) -> Result<Option<Var>> {
        if ids.is_empty() {
            return Ok(None);
        }
        let vars = ids
            .iter()
            .map(|&id| self.var(g, params, vocab, id))
            .collect::<Result<Vec<_>>>()?;
        g.stack_rows(&vars).map(Some)
    }
}

/// Per-option logits stacked into an `[l_a]` vector.
pub fn example_logits(
    g: &mut Graph,
    params: &KktParams,
    vocab: &Vocab,
    ex: &DialogueExample,
    pipe: &ExamplePipeline,
    facts: &mut FactSource,
) -> Result<Var> {
    if pipe.options.len() != ex.options.len() {
        return Err(KktError::dim(
            "pipeline options",
            &[pipe.options.len()],
            &[ex.options.len()],
        ));
    }
    let knowledge = params.ablation.uses_knowledge();
    let ck = if knowledge {
        facts.stack(g, params, vocab, &pipe.ck)?
    } else {
        None
    };
    let mut logits = Vec::with_capacity(ex.options.len());
    for (j, op) in pipe.options.iter().enumerate() {
        let qak = if knowledge {
            facts.stack(g, params, vocab, &op.qak)?
        } else {
            None
        };
        logits.push(forward(g, params, vocab, ex, j, &op.key_turns, ck, qak)?.logit);
    }
    g.concat_last_axis(&logits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub logits: Vec<f64>,
    pub loss: f64,
}

/// Highest-scoring option (lowest index on ties) and the cross-entropy
/// against the gold option.
pub fn predict(
    store: &ParamStore,
    params: &KktParams,
    vocab: &Vocab,
    ex: &DialogueExample,
    pipe: &ExamplePipeline,
    facts: &mut FactSource,
) -> Result<Prediction> {
    let mut g = Graph::with_params(store);
    let logits = example_logits(&mut g, params, vocab, ex, pipe, facts)?;
    let loss = g.cross_entropy_from_logits(logits, ex.gold)?;
    let values = g.value(logits).data().to_vec();
    Ok(Prediction {
        index: argmax(&values),
        loss: g.value(loss).item(),
        logits: values,
    })
}
