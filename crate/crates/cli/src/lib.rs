//! Workbench around the token-thinning classifier: dataset ingestion, a
//! word-level tokenizer, synthetic tasks, training runs and ablation sweeps.

pub mod config;
pub mod dataset;
pub mod error;
pub mod run;
pub mod sweep;
pub mod synth;
pub mod tokenizer;

pub use config::{DataConfig, RunConfig, TrainConfig};
pub use dataset::{ingest, Dataset, Example, Format, Split};
pub use error::{CliError, Result};
pub use run::{run, RunReport};
pub use sweep::{sweep, Axis};
pub use synth::{synth_task, SynthSpec, TaskKind};
pub use tokenizer::Vocabulary;
