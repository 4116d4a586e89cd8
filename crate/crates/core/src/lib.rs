//! Composed image retrieval over frozen embeddings: a small composition
//! network, its contrastive training loop, and Recall@K evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod combiner;
pub mod error;
pub mod forge;
pub mod loss;
pub mod optim;
pub mod retrieval;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use combiner::{CombinerDims, CombinerParams, ForwardCache, Gradients, Mode};
pub use error::{Error, ErrorClass, Result};
pub use forge::{GrammarRule, LlmEndpointConfig, Transport};
pub use loss::{LossBreakdown, LossConfig};
pub use optim::{AdamWConfig, AdamWState};
pub use retrieval::{EvalContext, EvalReport, GalleryIndex, QueryMode, RankedResult};
pub use store::{EmbeddingTable, EvalQuery, TextTriplet, TrainingExample};
pub use tensor::{Matrix, Rng, Scalar};
pub use trainer::{TargetSource, TrainConfig, TrainOutcome, TrainStart};
