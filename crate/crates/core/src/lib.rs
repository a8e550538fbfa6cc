//! Side-structure ladder tuning for text-attributed graphs.
//!
//! A frozen layer-wise text encoder ([`backbone`]) produces per-layer node
//! embeddings, optionally cached on disk. A stack of trainable G-Ladders
//! ([`sidenet`]) reads those embeddings at the inserted layers, passes
//! messages over each target's sampled subgraph ([`graph`]) and blends the
//! result into a running side state. Gradients come from a small reverse-mode
//! tape ([`autodiff`]) that never sees backbone parameters; [`training`]
//! fits the stack with AdamW and [`inference`] adds patience early exit.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod inference;
pub mod rng;
pub mod sidenet;
pub mod training;

pub use backbone::{
    precompute_cache, readout_mean, BackboneSignature, EmbeddingCache, InsertionSchedule, LayerwiseEncoder,
    NodeEmbeddings, ToyTransformer, ToyTransformerConfig,
};
pub use config::{Ablation, RunConfig, ScheduleSpec};
pub use error::{Error, Result};
pub use graph::{load_graph, parse_graph, sample, SamplerConfig, SamplerKind, Split, Subgraph, TextualGraph};
pub use inference::{exit_histogram, infer_early_exit, infer_full, ExitDecision, ExitStats, PatienceConfig};
pub use sidenet::{stack_forward, Checkpoint, GLadderStack, GateMode, GnnKind, LadderConfig, Mode, Norm};
pub use training::{evaluate, train, AdamW, AdamWConfig, LossReport, TrainConfig, TrainOutcome};
