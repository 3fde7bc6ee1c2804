use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::attention::Vocab;
use crate::error::{KktError, Result};
use crate::keyturns::NliHead;
use crate::knowledge::{KnowledgeStore, KnowledgeTriple, SurfaceTable};
use crate::model::{checkpoint, Ablation, KktParams};
use crate::tensor::ParamStore;

pub const NLI_PREFIX: &str = "nli";

/// Reader weights, the optional entailment head and the vocabulary they
/// were built against.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub params: KktParams,
    pub nli: Option<NliHead>,
}

impl Model {
    /// Fresh seeded weights, rounded to fp32. The entailment head is created
    /// only for ablations that select key turns.
    pub fn init(config: &RunConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let enc = config.encoder_config(vocab.len());
        let params = KktParams::new(&mut store, enc.clone(), config.ablation, &mut rng)?;
        let nli = if config.ablation.uses_key_turns() && config.k > 0 {
            Some(NliHead::new(&mut store, NLI_PREFIX, enc, &mut rng)?)
        } else {
            None
        };
        store.round_to_f32();
        Ok(Self {
            config: config.clone(),
            vocab,
            store,
            params,
            nli,
        })
    }

    fn from_parts(config: RunConfig, vocab: Vocab, tag: Ablation, store: ParamStore) -> Result<Self> {
        let params = KktParams::lookup(&store, tag)?;
        if params.encoder.config.vocab_size != vocab.len() {
            return Err(KktError::Checkpoint(format!(
                "embedding table has {} rows but the vocabulary has {} tokens",
                params.encoder.config.vocab_size,
                vocab.len()
            )));
        }
        let nli = match store.find(&format!("{NLI_PREFIX}.out.w")) {
            Some(_) => Some(NliHead::lookup(&store, NLI_PREFIX)?),
            None => None,
        };
        Ok(Self {
            config: RunConfig {
                ablation: tag,
                ..config
            },
            vocab,
            store,
            params,
            nli,
        })
    }

    /// Loads `best.kktc` from a run directory, or the given `.kktc` file with
    /// `config.json` and `vocab.txt` from the same directory.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, file) = if path.is_dir() {
            (path.to_path_buf(), path.join("best.kktc"))
        } else {
            let dir = path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            (dir, path.to_path_buf())
        };
        let cfg_path = dir.join("config.json");
        let text = fs::read_to_string(&cfg_path).map_err(|e| KktError::io(&cfg_path, e))?;
        let config: RunConfig = serde_json::from_str(&text)?;
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let (tag, store) = checkpoint::read_checkpoint(&file)?;
        Self::from_parts(config, vocab, tag, store)
    }

    /// Writes `config.json`, `vocab.txt` and `{name}.kktc` into `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| KktError::io(dir, e))?;
        let cfg_path = dir.join("config.json");
        fs::write(&cfg_path, self.config.to_json()).map_err(|e| KktError::io(&cfg_path, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let file = dir.join(format!("{name}.kktc"));
        checkpoint::write_checkpoint(&file, self.params.ablation, &self.store)?;
        Ok(file)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(self.params.ablation, &self.store)
    }

    /// Hex sha256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.checkpoint_bytes()?)))
    }

    /// The same weights wired as `ablation`; fails unless compatible.
    pub fn with_ablation(&self, ablation: Ablation) -> Result<Self> {
        let params = self.params.rewired(ablation)?;
        Ok(Self {
            config: RunConfig {
                ablation,
                ..self.config.clone()
            },
            params,
            ..self.clone()
        })
    }
}

/// Raw triples plus the phrasing used to turn them into facts; filtering by
/// weight and vocabulary happens once the run's vocabulary is known.
#[derive(Clone, Debug)]
pub struct KgInput {
    pub triples: Vec<KnowledgeTriple>,
    pub surface: SurfaceTable,
}

impl KgInput {
    pub fn parse(tsv: &str, source: &str, surface: SurfaceTable) -> Result<Self> {
        let all = KnowledgeStore::parse(tsv, source, 0.0, None, &surface)?;
        Ok(Self {
            triples: all.triples().to_vec(),
            surface,
        })
    }

    pub fn load(path: &Path, surface: SurfaceTable) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KktError::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), surface)
    }

    pub fn store(&self, threshold: f64, vocab: &Vocab) -> KnowledgeStore {
        KnowledgeStore::from_triples(self.triples.clone(), threshold, Some(vocab), &self.surface)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.triples {
            h.update(format!("{}\t{}\t{}\t{}\n", t.relation, t.head, t.tail, t.weight).as_bytes());
        }
        h.update(self.surface.to_tsv().as_bytes());
        hex::encode(h.finalize())
    }
}
