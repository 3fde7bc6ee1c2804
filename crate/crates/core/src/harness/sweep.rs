use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bundle::Model;
use super::config::RunConfig;
use super::eval::evaluate;
use super::train::{train, TrainInputs};
use crate::error::{KktError, Result};
use crate::knowledge::PosTagger;
use crate::model::{Ablation, DialogueExample};

/// Values to enumerate; an empty ablation list means the configured one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub k: Vec<usize>,
    pub p: Vec<usize>,
    #[serde(default)]
    pub ablation: Vec<Ablation>,
}

impl SweepGrid {
    /// Cells in `ablation`, `k`, `p` nesting order.
    pub fn cells(&self, default: Ablation) -> Result<Vec<(Ablation, usize, usize)>> {
        if self.k.is_empty() || self.p.is_empty() {
            return Err(KktError::Validation("sweep grid needs at least one k and one p".into()));
        }
        let abl = if self.ablation.is_empty() {
            vec![default]
        } else {
            self.ablation.clone()
        };
        let mut out = Vec::new();
        for &a in &abl {
            for &k in &self.k {
                for &p in &self.p {
                    out.push((a, k, p));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ablation: Ablation,
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub n_plus: usize,
    pub accuracy: f64,
    pub fingerprint: String,
}

fn run_cells<F>(cells: Vec<(Ablation, usize, usize)>, parallel: bool, f: F) -> Result<Vec<SweepRow>>
where
    F: Fn(Ablation, usize, usize) -> Result<SweepRow> + Sync,
{
    if parallel {
        cells.into_par_iter().map(|(a, k, p)| f(a, k, p)).collect()
    } else {
        cells.into_iter().map(|(a, k, p)| f(a, k, p)).collect()
    }
}

/// Evaluates one trained model at every grid cell. Each ablation must be
/// compatible with the checkpoint.
pub fn sweep_checkpoint(
    model: &Model,
    grid: &SweepGrid,
    examples: &[DialogueExample],
    kg: Option<&super::bundle::KgInput>,
    tagger: &PosTagger,
    data_hash: &str,
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    let cells = grid.cells(model.params.ablation)?;
    let ckpt = model.hash()?;
    run_cells(cells, parallel, |a, k, p| {
        let mut m = model.with_ablation(a)?;
        m.config.k = k;
        m.config.p = p;
        m.config.validate()?;
        let store = kg.map(|kg| kg.store(m.config.threshold, &m.vocab));
        let fp = m.config.fingerprint(&format!("{data_hash}:{ckpt}"));
        let r = evaluate(&m, examples, store.as_ref(), tagger, fp)?;
        Ok(SweepRow {
            ablation: a,
            k,
            p,
            n: r.n,
            n_plus: r.n_plus,
            accuracy: r.accuracy,
            fingerprint: r.fingerprint,
        })
    })
}

/// Trains a fresh model per grid cell and evaluates it on `eval_set`.
pub fn sweep_train(
    cfg: &RunConfig,
    grid: &SweepGrid,
    inputs: &TrainInputs,
    eval_set: &[DialogueExample],
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    let cells = grid.cells(cfg.ablation)?;
    let eval_hash = hex::encode(Sha256::digest(
        serde_json::to_string(eval_set).expect("examples serialize").as_bytes(),
    ));
    run_cells(cells, parallel, |a, k, p| {
        let c = RunConfig {
            ablation: a,
            k,
            p,
            ..cfg.clone()
        };
        let outcome = train(&c, inputs, None)?;
        let fp = format!("{}:{eval_hash}", outcome.log.fingerprint);
        let r = evaluate(&outcome.model, eval_set, outcome.kg.as_ref(), inputs.tagger, fp)?;
        Ok(SweepRow {
            ablation: a,
            k,
            p,
            n: r.n,
            n_plus: r.n_plus,
            accuracy: r.accuracy,
            fingerprint: r.fingerprint,
        })
    })
}
