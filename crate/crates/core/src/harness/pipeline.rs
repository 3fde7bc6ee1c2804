use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::Vocab;
use crate::error::{KktError, Result};
use crate::keyturns::{score_all, select_key_turns, NliHead, NliRecord, CONTRADICTION, ENTAILMENT, NEUTRAL};
use crate::knowledge::{KnowledgeStore, PosTagger, SurfaceTable, TripleId};
use crate::model::{Ablation, DialogueExample, ExamplePipeline, OptionPipeline};
use crate::tensor::ParamStore;

/// Vocabulary over every text the run will encode.
pub fn build_vocab(examples: &[DialogueExample], nli: &[NliRecord], surface: &SurfaceTable) -> Vocab {
    let mut texts: Vec<&str> = Vec::new();
    for ex in examples {
        texts.extend(ex.turns.iter().map(String::as_str));
        texts.push(&ex.question);
        texts.extend(ex.options.iter().map(String::as_str));
    }
    for r in nli {
        texts.push(&r.premise);
        texts.push(&r.hypothesis);
    }
    texts.extend(surface.phrases());
    Vocab::build(texts)
}

fn overlap(tagger: &PosTagger, a: &str, b: &BTreeSet<String>) -> usize {
    tagger
        .content_words(a)
        .into_iter()
        .collect::<BTreeSet<_>>()
        .intersection(b)
        .count()
}

/// Entailment pairs read off a labelled dataset by lexical overlap: the turn
/// sharing most content words with the gold QA pair entails it, the same turn
/// contradicts a wrong QA pair, and another turn is neutral to the gold one.
/// Examples whose best turn shares nothing are skipped.
pub fn derive_nli(examples: &[DialogueExample], tagger: &PosTagger, seed: u64) -> Vec<NliRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for ex in examples {
        let gold_qa = ex.qa_text(ex.gold);
        let words: BTreeSet<String> = tagger.content_words(&gold_qa).into_iter().collect();
        let scores: Vec<usize> = ex.turns.iter().map(|t| overlap(tagger, t, &words)).collect();
        let best = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        if scores.get(best).copied().unwrap_or(0) == 0 {
            continue;
        }
        let premise = ex.turns[best].clone();
        out.push(NliRecord {
            premise: premise.clone(),
            hypothesis: gold_qa.clone(),
            label: ENTAILMENT,
        });
        let wrong: Vec<usize> = (0..ex.options.len()).filter(|&j| j != ex.gold).collect();
        if let Some(&j) = wrong.choose(&mut rng) {
            out.push(NliRecord {
                premise,
                hypothesis: ex.qa_text(j),
                label: CONTRADICTION,
            });
        }
        let others: Vec<usize> = (0..ex.turns.len()).filter(|&i| i != best).collect();
        if let Some(&i) = others.choose(&mut rng) {
            out.push(NliRecord {
                premise: ex.turns[i].clone(),
                hypothesis: gold_qa,
                label: NEUTRAL,
            });
        }
    }
    out
}

/// Retrieval and key-turn inputs shared by every pipeline of a run.
pub struct PipelineContext<'a> {
    pub store: &'a ParamStore,
    pub nli: Option<&'a NliHead>,
    pub vocab: &'a Vocab,
    pub kg: Option<&'a KnowledgeStore>,
    pub tagger: &'a PosTagger,
    pub k: usize,
    pub p: usize,
    pub ablation: Ablation,
}

impl PipelineContext<'_> {
    /// Context knowledge, then per option the key turns and QA knowledge.
    pub fn build(&self, ex: &DialogueExample) -> Result<ExamplePipeline> {
        let ids = |texts: &[&str]| -> Vec<TripleId> {
            match self.kg {
                Some(kg) => kg
                    .retrieve(texts, self.p, self.tagger)
                    .into_iter()
                    .map(|r| r.id)
                    .collect(),
                None => Vec::new(),
            }
        };
        let knowledge = self.ablation.uses_knowledge();
        let turn_refs: Vec<&str> = ex.turns.iter().map(String::as_str).collect();
        let ck = if knowledge { ids(&turn_refs) } else { Vec::new() };
        let qa_texts: Vec<String> = (0..ex.options.len()).map(|j| ex.qa_text(j)).collect();
        let key_turns: Vec<Vec<usize>> = if self.ablation.uses_key_turns() && self.k > 0 {
            let head = self
                .nli
                .ok_or_else(|| KktError::Config("key-turn selection needs an entailment head".into()))?;
            score_all(self.store, head, self.vocab, &ex.turns, &qa_texts)?
                .iter()
                .map(|s| select_key_turns(s, self.k).map(|k| k.turns))
                .collect::<Result<_>>()?
        } else {
            vec![Vec::new(); ex.options.len()]
        };
        let options = key_turns
            .into_iter()
            .zip(&qa_texts)
            .map(|(key_turns, qa)| OptionPipeline {
                key_turns,
                qak: if knowledge { ids(&[qa.as_str()]) } else { Vec::new() },
            })
            .collect();
        Ok(ExamplePipeline { ck, options })
    }

    pub fn build_all(&self, examples: &[DialogueExample]) -> Result<Vec<ExamplePipeline>> {
        examples.par_iter().map(|ex| self.build(ex)).collect()
    }
}
