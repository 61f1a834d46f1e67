//! Training, unlearning, and evaluation for a multi-modal graph recommender.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`] owns interaction data: ingestion, per-user splitting, forget
//!   request resolution, and the normalized bipartite adjacency.
//! * [`model`] holds trainable parameters, graph propagation, the modality
//!   fuser, scoring, top-K retrieval, and checkpoints.
//! * [`losses`] implements every objective together with its analytic
//!   gradient with respect to [`model::ModelParams`].
//! * [`unlearn`] drives training, gold retraining, and the two unlearning
//!   procedures (preserve/impair and reverse-only).
//! * [`metrics`] computes user- and item-centric ranking metrics and the
//!   property gaps between an unlearned model and its gold reference.
//! * [`synth`] generates planted-cluster datasets for desk-scale experiments.

pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod unlearn;

pub use error::{Error, Result};
pub use graph::{
    build_normalized_adjacency, load_interactions, mark_forget, split_dataset, DatasetSplit,
    Edge, ForgetKind, ForgetSpec, InteractionGraph, NormAdj, Partition, UserItems,
};
pub use losses::{LossReport, TripleBatch};
pub use metrics::{evaluate, property_gaps, EvalReport, EvalSet, MetricValues, PropertyGaps, View};
pub use model::{Encoder, HyperParams, ModelParams, PropagatedState};
pub use unlearn::{Mode, RunResult, StopReason, TrainConfig};
