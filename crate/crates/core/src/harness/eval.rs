use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::Model;
use super::pipeline::PipelineContext;
use crate::error::{KktError, Result};
use crate::knowledge::{FactCache, KnowledgeStore, PosTagger};
use crate::model::{predict, Ablation, DialogueExample, ExamplePipeline, FactSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted: usize,
    pub gold: usize,
    pub correct: bool,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub n_plus: usize,
    /// `n_plus / n`.
    pub accuracy: f64,
    pub mean_loss: f64,
    pub ablation: Ablation,
    pub fingerprint: String,
    pub predictions: Vec<PredictionRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn accuracy(n_plus: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        n_plus as f64 / n as f64
    }
}

/// Builds pipelines from the model's entailment head and `kg`, then scores
/// every example. `model` must already be wired for the ablation to report.
pub fn evaluate(
    model: &Model,
    examples: &[DialogueExample],
    kg: Option<&KnowledgeStore>,
    tagger: &PosTagger,
    fingerprint: String,
) -> Result<EvalReport> {
    let ctx = PipelineContext {
        store: &model.store,
        nli: model.nli.as_ref(),
        vocab: &model.vocab,
        kg,
        tagger,
        k: model.config.k,
        p: model.config.p,
        ablation: model.params.ablation,
    };
    let pipes = ctx.build_all(examples)?;
    evaluate_pipelines(model, examples, &pipes, kg, fingerprint)
}

/// Scores examples against prepared pipelines, in parallel, keeping input
/// order in the report.
pub fn evaluate_pipelines(
    model: &Model,
    examples: &[DialogueExample],
    pipes: &[ExamplePipeline],
    kg: Option<&KnowledgeStore>,
    fingerprint: String,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(KktError::Validation("nothing to evaluate".into()));
    }
    if pipes.len() != examples.len() {
        return Err(KktError::dim("pipelines", &[pipes.len()], &[examples.len()]));
    }
    let mut cache = FactCache::new();
    if let Some(kg) = kg {
        if model.params.ablation.uses_knowledge() {
            let ids = pipes
                .iter()
                .flat_map(|p| p.ck.iter().chain(p.options.iter().flat_map(|o| o.qak.iter())))
                .copied();
            cache.ensure(
                &model.store,
                &model.params.encoder,
                &model.params.fact_sa,
                &model.vocab,
                kg,
                ids,
            )?;
        }
    }
    let preds = examples
        .par_iter()
        .zip(pipes)
        .map(|(ex, pipe)| {
            let mut facts = match kg {
                Some(kg) => FactSource::cached(kg, &cache),
                None => FactSource::none(),
            };
            let pred = predict(&model.store, &model.params, &model.vocab, ex, pipe, &mut facts)?;
            Ok((
                PredictionRecord {
                    id: ex.id.clone(),
                    predicted: pred.index,
                    gold: ex.gold,
                    correct: pred.index == ex.gold,
                    logits: pred.logits,
                },
                pred.loss,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = preds.len();
    let n_plus = preds.iter().filter(|(p, _)| p.correct).count();
    let mean_loss = preds.iter().map(|(_, l)| l).sum::<f64>() / n as f64;
    Ok(EvalReport {
        n,
        n_plus,
        accuracy: accuracy(n_plus, n),
        mean_loss,
        ablation: model.params.ablation,
        fingerprint,
        predictions: preds.into_iter().map(|(p, _)| p).collect(),
    })
}
