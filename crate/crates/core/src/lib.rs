//! Graph-informed deep knowledge tracing.

pub mod checkpoint;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod node2vec;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

pub use checkpoint::Checkpoint;
pub use dataset::{Batch, InteractionRecord, Schema, SplitMode, SplitSpec, StudentSequence, SynthConfig};
pub use embedding::EmbeddingTable;
pub use experiment::{Arm, CellResult, ExperimentConfig, ResultsGrid};
pub use graph::SkillGraph;
pub use metrics::auc;
pub use model::{KtModel, ModelConfig};
pub use node2vec::WalkConfig;
pub use optim::{AdamConfig, AdamState};
pub use train::{EpochMetrics, ExperimentResult, TrainConfig};
