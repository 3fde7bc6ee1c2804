//! Entailment scoring of (turn, QA-pair) inputs and top-k key-turn
//! selection.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::vocab::{BOS_ID, EOS_ID, SEP_ID};
use crate::attention::{encode, EncoderConfig, EncoderParams, Vocab};
use crate::error::{KktError, Result};
use crate::tensor::{Adam, AdamConfig, Gradients, Graph, ParamId, ParamStore, Var};

pub const CONTRADICTION: usize = 0;
pub const ENTAILMENT: usize = 1;
pub const NEUTRAL: usize = 2;

/// Scorer encoder plus a `[d_model×3]` map to
/// (contradiction, entailment, neutral) logits.
#[derive(Clone, Debug)]
pub struct NliHead {
    pub encoder: EncoderParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl NliHead {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        let encoder = EncoderParams::new(store, &format!("{prefix}.enc"), config, rng)?;
        Ok(Self {
            encoder,
            out_w: store.add_uniform(format!("{prefix}.out.w"), &[d, 3], d, rng),
            out_b: store.add_uniform(format!("{prefix}.out.b"), &[3], d, rng),
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |s: &str| {
            store
                .find(&format!("{prefix}.{s}"))
                .ok_or_else(|| KktError::Checkpoint(format!("missing tensor {prefix}.{s}")))
        };
        Ok(Self {
            encoder: EncoderParams::lookup(store, &format!("{prefix}.enc"))?,
            out_w: find("out.w")?,
            out_b: find("out.b")?,
        })
    }

    pub fn param_ids(&self, store: &ParamStore, prefix: &str) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| store.name(id).starts_with(&format!("{prefix}.")))
            .collect()
    }
}

/// `[BOS] premise [SEP] hypothesis [EOS]`, dropping premise tokens from the
/// front when the pair does not fit.
fn pair_ids(vocab: &Vocab, max_len: usize, premise: &str, hypothesis: &str) -> Vec<usize> {
    let p = vocab.encode(premise);
    let h = vocab.encode(hypothesis);
    let room = max_len.saturating_sub(h.len() + 3);
    let p = &p[p.len().saturating_sub(room)..];
    let mut ids = Vec::with_capacity(p.len() + h.len() + 3);
    ids.push(BOS_ID);
    ids.extend_from_slice(p);
    ids.push(SEP_ID);
    ids.extend_from_slice(&h);
    ids.push(EOS_ID);
    ids
}

/// Three unnormalized scores for a premise/hypothesis pair.
pub fn nli_logits(g: &mut Graph, head: &NliHead, vocab: &Vocab, premise: &str, hypothesis: &str) -> Result<Var> {
    let ids = pair_ids(vocab, head.encoder.config.max_len, premise, hypothesis);
    let out = encode(g, &head.encoder, &ids)?;
    let (w, b) = (g.param(head.out_w), g.param(head.out_b));
    g.linear(out.pooled, w, Some(b))
}

/// Entailment log-probability of `qa_text` given `turn_text`; always ≤ 0.
pub fn score_turn(params: &ParamStore, head: &NliHead, vocab: &Vocab, turn_text: &str, qa_text: &str) -> Result<f64> {
    if turn_text.trim().is_empty() || qa_text.trim().is_empty() {
        return Err(KktError::Validation(
            "score_turn needs non-empty turn and QA text".into(),
        ));
    }
    let mut g = Graph::with_params(params);
    let logits = nli_logits(&mut g, head, vocab, turn_text, qa_text)?;
    let lp = g.log_softmax(logits);
    Ok(g.value(lp).data()[ENTAILMENT].min(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub turn: usize,
    pub qa: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyTurnSet {
    pub qa: usize,
    /// Selected turn indices (0-based), strictly increasing.
    pub turns: Vec<usize>,
    pub k: usize,
}

/// Scores every turn against every QA text. `result[j][i]` is turn `i`
/// against QA `j`.
pub fn score_all(
    params: &ParamStore,
    head: &NliHead,
    vocab: &Vocab,
    turns: &[String],
    qa_texts: &[String],
) -> Result<Vec<Vec<RelevanceScore>>> {
    qa_texts
        .par_iter()
        .enumerate()
        .map(|(j, qa)| {
            turns
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    Ok(RelevanceScore {
                        turn: i,
                        qa: j,
                        score: score_turn(params, head, vocab, t, qa)?,
                    })
                })
                .collect()
        })
        .collect()
}

/// The `k` highest-scoring turns, emitted in dialogue order. Equal scores
/// prefer the earlier turn.
pub fn select_key_turns(scores: &[RelevanceScore], k: usize) -> Result<KeyTurnSet> {
    let first = scores
        .first()
        .ok_or_else(|| KktError::Validation("no relevance scores to select from".into()))?;
    if k == 0 {
        return Err(KktError::Validation("key-turn count k must be at least 1".into()));
    }
    if scores.iter().any(|s| s.qa != first.qa) {
        return Err(KktError::Validation("relevance scores mix several QA pairs".into()));
    }
    if scores.iter().any(|s| !s.score.is_finite()) {
        return Err(KktError::Validation("non-finite relevance score".into()));
    }
    let mut order: Vec<&RelevanceScore> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.turn.cmp(&b.turn)));
    let mut turns: Vec<usize> = order.iter().take(k).map(|s| s.turn).collect();
    turns.sort_unstable();
    turns.dedup();
    Ok(KeyTurnSet { qa: first.qa, turns, k })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliRecord {
    pub premise: String,
    pub hypothesis: String,
    pub label: usize,
}

/// Reads JSON lines with `premise`, `hypothesis` and `label` fields.
pub fn load_nli(path: &Path) -> Result<Vec<NliRecord>> {
    let text = fs::read_to_string(path).map_err(|e| KktError::io(path, e))?;
    parse_nli(&text, &path.display().to_string())
}

pub fn parse_nli(text: &str, source: &str) -> Result<Vec<NliRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: NliRecord = serde_json::from_str(line).map_err(|e| KktError::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.label > NEUTRAL {
            return Err(KktError::Validation(format!(
                "{source}:{}: label {} outside 0..=2",
                i + 1,
                rec.label
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn nli_to_jsonl(records: &[NliRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for NliTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliTrainReport {
    pub epochs: usize,
    pub steps: usize,
    /// Mean cross-entropy over the last epoch (NaN with zero epochs).
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Cross-entropy training of the head on `corpus`, updating only the
/// parameters under `prefix`.
pub fn train_nli_head(
    store: &mut ParamStore,
    head: &NliHead,
    prefix: &str,
    vocab: &Vocab,
    corpus: &[NliRecord],
    cfg: &NliTrainConfig,
) -> Result<NliTrainReport> {
    if let Some(r) = corpus.iter().find(|r| r.label > NEUTRAL) {
        return Err(KktError::Validation(format!("NLI label {} outside 0..=2", r.label)));
    }
    if cfg.epochs > 0 && corpus.is_empty() {
        return Err(KktError::Validation("empty NLI corpus".into()));
    }
    let own = head.param_ids(store, prefix);
    let mut opt = Adam::new(
        store,
        AdamConfig {
            lr: cfg.lr,
            warmup: 0,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut final_loss = f64::NAN;
    let batch = cfg.batch.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = Gradients::zeros_like(store);
            for &i in chunk {
                let r = &corpus[i];
                let mut g = Graph::with_params(store);
                let logits = nli_logits(&mut g, head, vocab, &r.premise, &r.hypothesis)?;
                let loss = g.cross_entropy_from_logits(logits, r.label)?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(KktError::NonFiniteLoss {
                        step: opt.steps(),
                        example: format!("nli#{i}"),
                        loss: lv,
                    });
                }
                total += lv;
                g.backward(loss)?;
                g.accumulate_into(&mut grads, 1.0 / chunk.len() as f64);
            }
            mask_to(&mut grads, store, &own);
            opt.step(store, &grads);
        }
        final_loss = total / corpus.len() as f64;
        log::info!("nli epoch {epoch}: loss {final_loss:.4}");
    }
    let correct = corpus
        .par_iter()
        .map(|r| {
            let mut g = Graph::with_params(store);
            let logits = nli_logits(&mut g, head, vocab, &r.premise, &r.hypothesis)?;
            Ok(usize::from(argmax(g.value(logits).data()) == r.label))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(NliTrainReport {
        epochs: cfg.epochs,
        steps: opt.steps(),
        final_loss,
        train_accuracy: if corpus.is_empty() {
            0.0
        } else {
            correct as f64 / corpus.len() as f64
        },
    })
}

fn mask_to(grads: &mut Gradients, store: &ParamStore, keep: &[ParamId]) {
    let mut masked = Gradients::zeros_like(store);
    for &id in keep {
        masked.accumulate(id, grads.get(id), 1.0);
    }
    *grads = masked;
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
