use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::EncoderConfig;
use crate::error::{KktError, Result};
use crate::model::Ablation;

/// Hyperparameters of one training or evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Key turns per QA pair.
    pub k: usize,
    /// Knowledge items per context and per QA pair.
    pub p: usize,
    /// Triples below this weight are dropped at load time.
    pub threshold: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Epochs of entailment-head training before the reader is trained.
    pub nli_epochs: usize,
    pub nli_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 256,
            max_len: 256,
            k: 6,
            p: 30,
            threshold: 1.0,
            lr: 1e-3,
            batch: 8,
            epochs: 20,
            warmup: 50,
            seed: 0,
            ablation: Ablation::Full,
            nli_epochs: 5,
            nli_lr: 1e-3,
        }
    }
}

impl RunConfig {
    /// The optimisation settings reported for the large-model setup:
    /// learning rate 1e-5, batch 1, 3 epochs, 50 warmup steps.
    pub fn paper_defaults() -> Self {
        Self {
            lr: 1e-5,
            batch: 1,
            epochs: 3,
            warmup: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KktError::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 || self.max_len < 8 {
            return bad("d_ff must be positive and max_len at least 8".into());
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.nli_lr.is_finite() && self.nli_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return bad("threshold must be a non-negative number".into());
        }
        if self.ablation == Ablation::KeyturnsOnly && self.k == 0 {
            return bad("keyturns-only needs k >= 1".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff,
            max_len: self.max_len,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex sha256 over the canonical config JSON followed by `data_hash`.
    pub fn fingerprint(&self, data_hash: &str) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("config serializes").as_bytes());
        h.update(b"\n");
        h.update(data_hash.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Overrides the seed from `KKT_SEED` when it is set.
pub fn apply_seed_env(cfg: &mut RunConfig) -> Result<()> {
    if let Ok(s) = std::env::var("KKT_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| KktError::Config(format!("KKT_SEED={s:?} is not an unsigned integer")))?;
    }
    Ok(())
}
