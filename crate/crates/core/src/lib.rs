//! Scene graph prediction from point-cloud instances with an oracle
//! multi-modal branch used only during training.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and reverse-mode autodiff.
//! - [`scene`]: scenes, instances, ground-truth graphs and the scene file format.
//! - [`world`]: seeded synthetic long-tailed scenes and surrogate embeddings.
//! - [`encoders`]: node, edge and oracle-node feature encoders.
//! - [`reasoning`]: message passing, attention, cross-stream collaboration, classifiers.
//! - [`train`]: losses, optimizer, training loop and checkpoints.
//! - [`metrics`]: top-k accuracy, triplet accuracy and recall-based evaluation.
//! - [`experiment`]: end-to-end pipeline used by the command line tool.

pub mod config;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod reasoning;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod world;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use metrics::{EvalReport, PredictionDump, ScenePrediction};
pub use reasoning::{Mode, ModelConfig, SceneGraphModel};
pub use scene::{InstanceAttributes, SceneGraphSample, Vocabulary};
pub use tensor::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
pub use world::{EmbeddingProvider, WorldConfig};

/// Version string embedded into every emitted artifact.
pub const TOOL_VERSION: &str = concat!("sgf ", env!("CARGO_PKG_VERSION"));
