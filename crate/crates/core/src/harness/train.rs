use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::{KgInput, Model, NLI_PREFIX};
use super::config::RunConfig;
use super::eval::{accuracy, evaluate_pipelines};
use super::pipeline::{build_vocab, derive_nli, PipelineContext};
use crate::error::{KktError, Result};
use crate::keyturns::{argmax, train_nli_head, NliRecord, NliTrainConfig, NliTrainReport};
use crate::knowledge::{KnowledgeStore, PosTagger};
use crate::model::{example_logits, DialogueExample, ExamplePipeline, FactSource};
use crate::tensor::{Adam, AdamConfig, Gradients, Graph};

pub struct TrainInputs<'a> {
    pub train: &'a [DialogueExample],
    /// Selects the best epoch; without it the last epoch is kept.
    pub dev: Option<&'a [DialogueExample]>,
    pub kg: Option<&'a KgInput>,
    /// Entailment corpus; derived from `train` by lexical overlap if absent.
    pub nli: Option<&'a [NliRecord]>,
    pub tagger: &'a PosTagger,
    /// Stop once a full pass over the training set scores at least this.
    pub stop_at_train_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    /// Accuracy of the predictions made during the epoch, before each update.
    pub running_accuracy: f64,
    pub train_accuracy: Option<f64>,
    pub dev_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub fingerprint: String,
    pub nli: Option<NliTrainReport>,
    pub epochs: Vec<EpochLog>,
    /// 0 means the initial weights.
    pub best_epoch: usize,
    pub best_dev_accuracy: Option<f64>,
    pub final_loss: f64,
}

pub struct TrainOutcome {
    /// Weights of the best epoch.
    pub model: Model,
    pub log: TrainLog,
    pub kg: Option<KnowledgeStore>,
}

/// Hash over everything a run reads besides its configuration.
pub fn data_hash(inputs: &TrainInputs) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(
        serde_json::to_string(inputs.train)
            .expect("examples serialize")
            .as_bytes(),
    );
    if let Some(dev) = inputs.dev {
        h.update(b"dev");
        h.update(serde_json::to_string(dev).expect("examples serialize").as_bytes());
    }
    if let Some(kg) = inputs.kg {
        h.update(b"kg");
        h.update(kg.hash().as_bytes());
    }
    if let Some(nli) = inputs.nli {
        h.update(b"nli");
        h.update(serde_json::to_string(nli).expect("records serialize").as_bytes());
    }
    hex::encode(h.finalize())
}

/// Trains the entailment head (when the ablation selects key turns), then
/// the reader with Adam and a linear warmup over mini-batches of per-example
/// cross-entropy. With `out` set, writes every epoch checkpoint, `best.kktc`,
/// `config.json`, `vocab.txt` and `train_log.json`.
pub fn train(cfg: &RunConfig, inputs: &TrainInputs, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.train.is_empty() {
        return Err(KktError::Validation("empty training set".into()));
    }
    for ex in inputs.train.iter().chain(inputs.dev.unwrap_or(&[])) {
        ex.validate()?;
    }
    let fingerprint = cfg.fingerprint(&data_hash(inputs));
    let derived;
    let nli_corpus: &[NliRecord] = match inputs.nli {
        Some(c) => c,
        None => {
            derived = derive_nli(inputs.train, inputs.tagger, cfg.seed);
            &derived
        }
    };
    let surface = inputs.kg.map(|k| k.surface.clone()).unwrap_or_default();
    let vocab = build_vocab(inputs.train, nli_corpus, &surface);
    let kg = inputs.kg.map(|k| k.store(cfg.threshold, &vocab));
    let mut model = Model::init(cfg, vocab)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| KktError::io(dir, e))?;
    }

    let nli_report = match model.nli.clone() {
        Some(head) if cfg.nli_epochs > 0 && !nli_corpus.is_empty() => Some(train_nli_head(
            &mut model.store,
            &head,
            NLI_PREFIX,
            &model.vocab,
            nli_corpus,
            &NliTrainConfig {
                epochs: cfg.nli_epochs,
                lr: cfg.nli_lr,
                batch: cfg.batch,
                seed: cfg.seed,
            },
        )?),
        _ => None,
    };
    if let Some(r) = &nli_report {
        log::info!(
            "entailment head: loss {:.4}, accuracy {:.3}",
            r.final_loss,
            r.train_accuracy
        );
    }

    let pipes = |model: &Model, exs: &[DialogueExample]| -> Result<Vec<ExamplePipeline>> {
        PipelineContext {
            store: &model.store,
            nli: model.nli.as_ref(),
            vocab: &model.vocab,
            kg: kg.as_ref(),
            tagger: inputs.tagger,
            k: cfg.k,
            p: cfg.p,
            ablation: cfg.ablation,
        }
        .build_all(exs)
    };
    let train_pipes = pipes(&model, inputs.train)?;
    let dev_pipes = match inputs.dev {
        Some(d) => Some(pipes(&model, d)?),
        None => None,
    };

    let mut opt = Adam::new(
        &model.store,
        AdamConfig {
            lr: cfg.lr,
            warmup: cfg.warmup,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..inputs.train.len()).collect();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_dev: Option<f64> = None;
    let mut epochs = Vec::new();
    let mut final_loss = f64::NAN;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut hits = 0;
        for chunk in order.chunks(cfg.batch) {
            let mut grads = Gradients::zeros_like(&model.store);
            for &i in chunk {
                let ex = &inputs.train[i];
                let mut g = Graph::with_params(&model.store);
                let mut facts = match &kg {
                    Some(kg) => FactSource::live(kg),
                    None => FactSource::none(),
                };
                let logits = example_logits(&mut g, &model.params, &model.vocab, ex, &train_pipes[i], &mut facts)?;
                let loss = g.cross_entropy_from_logits(logits, ex.gold)?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(KktError::NonFiniteLoss {
                        step: opt.steps(),
                        example: ex.id.clone(),
                        loss: lv,
                    });
                }
                total += lv;
                hits += usize::from(argmax(g.value(logits).data()) == ex.gold);
                g.backward(loss)?;
                g.accumulate_into(&mut grads, 1.0 / chunk.len() as f64);
            }
            if !grads.is_finite() {
                return Err(KktError::NonFiniteLoss {
                    step: opt.steps(),
                    example: inputs.train[chunk[0]].id.clone(),
                    loss: f64::NAN,
                });
            }
            opt.step(&mut model.store, &grads);
        }
        final_loss = total / inputs.train.len() as f64;
        let train_accuracy = match inputs.stop_at_train_accuracy {
            Some(_) => {
                Some(evaluate_pipelines(&model, inputs.train, &train_pipes, kg.as_ref(), String::new())?.accuracy)
            }
            None => None,
        };
        let dev_accuracy = match (inputs.dev, &dev_pipes) {
            (Some(d), Some(p)) => Some(evaluate_pipelines(&model, d, p, kg.as_ref(), String::new())?.accuracy),
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            steps: opt.steps(),
            mean_loss: final_loss,
            running_accuracy: accuracy(hits, inputs.train.len()),
            train_accuracy,
            dev_accuracy,
        };
        log::info!(
            "epoch {epoch}: {}",
            serde_json::to_string(&entry).expect("log serializes")
        );
        epochs.push(entry);
        if let Some(dir) = out {
            model.save(dir, &format!("epoch-{epoch}"))?;
        }
        let better = match (dev_accuracy, best_dev) {
            (Some(d), Some(b)) => d > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if better {
            best = model.clone();
            best_epoch = epoch;
            best_dev = dev_accuracy;
        }
        if let (Some(target), Some(acc)) = (inputs.stop_at_train_accuracy, train_accuracy) {
            if acc >= target {
                break;
            }
        }
    }

    let log = TrainLog {
        fingerprint,
        nli: nli_report,
        epochs,
        best_epoch,
        best_dev_accuracy: best_dev,
        final_loss,
    };
    if let Some(dir) = out {
        best.save(dir, "best")?;
        let p = dir.join("train_log.json");
        fs::write(&p, serde_json::to_string_pretty(&log)?).map_err(|e| KktError::io(&p, e))?;
    }
    Ok(TrainOutcome { model: best, log, kg })
}
