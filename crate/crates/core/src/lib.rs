//! Hierarchical topic models whose words and topics are diagonal Gaussian
//! embeddings in one shared space, optionally guided by a concept taxonomy.
//!
//! The decoder is a gamma belief network whose loading matrices come from the
//! expected-likelihood kernel between adjacent layers; inference uses a
//! Weibull upward-downward encoder trained by reparameterisation.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod objective;
pub mod special;
pub mod synthetic;
pub mod taxonomy;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Mode, RunConfig};
pub use corpus::{CorpusFormat, Document, HeldoutSplit, SparseCorpus, Vocabulary};
pub use error::{Error, Result};
pub use geometry::GaussianEmbedding;
pub use model::{Architecture, InitConfig, ModelParams, Phis};
pub use objective::{AdamState, GradientSet, LossBreakdown, ObjectiveConfig};
pub use taxonomy::{TopicTree, TreeIndex};
pub use train::{LogRecord, TrainOptions, Trainer};
