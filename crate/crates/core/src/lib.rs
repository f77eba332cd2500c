//! Transformer text classifier whose attention keys shrink layer by layer
//! under a fuzzy importance rule and whose surviving tokens are merged into
//! a few learnable combination tokens.
//!
//! The crate ships its own small tensor type and reverse-mode tape, so
//! every gradient used in training can be checked numerically.

pub mod combiner;
pub mod cost;
pub mod error;
pub mod fuzzy;
pub mod init;
pub mod model;
pub(crate) mod params;
pub mod pruning;
pub mod tensor;

pub use combiner::{AssignMode, CombinerWeights, NoiseScope};
pub use cost::{model_cost, CostReport, LayerBreakdown};
pub use error::{Error, Result};
pub use fuzzy::ImportanceProfile;
pub use model::{evaluate, ForwardOutput, Metrics, Model, ModelConfig, TokenTrace};
pub use pruning::{AttentionBlockWeights, TokenSet};
pub use tensor::{Tape, Tensor, Var};
