//! Datasets, synthetic data with planted signals, training, evaluation and
//! grid sweeps.

mod bundle;
mod config;
mod dataset;
mod eval;
mod pipeline;
mod sweep;
pub mod synth;
mod train;

pub use bundle::{KgInput, Model, NLI_PREFIX};
pub use config::{apply_seed_env, RunConfig};
pub use dataset::{load_dataset, Dataset, Dialogue, Question};
pub use eval::{accuracy, evaluate, evaluate_pipelines, EvalReport, PredictionRecord};
pub use pipeline::{build_vocab, derive_nli, PipelineContext};
pub use sweep::{sweep_checkpoint, sweep_train, SweepGrid, SweepRow};
pub use synth::{gen_synthetic, world_kg, Planted, Split, SynthMode, SyntheticData};
pub use train::{data_hash, train, EpochLog, TrainInputs, TrainLog, TrainOutcome};
