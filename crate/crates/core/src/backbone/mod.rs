//! Frozen layer-wise encoders and the pooled-embedding cache.
//!
//! Two encoders share the [`LayerwiseEncoder`] interface: [`ToyTransformer`]
//! computes embeddings on the fly, [`EmbeddingCache`] serves them from a
//! precomputed file. Side-network code cannot tell them apart.

mod cache;
pub mod tokenizer;
mod toy;

pub use cache::{precompute_cache, EmbeddingCache, CACHE_MAGIC, CACHE_VERSION};
pub use toy::{positional, BlockWeights, ToyTransformer, ToyTransformerConfig};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::graph::TextualGraph;

/// Backbone layers at which pooled embeddings are exposed (and ladders
/// attached). Strictly ascending, within `0..=L`, ending at `L`. Layer 0 is
/// the embedding layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertionSchedule {
    layers: Vec<usize>,
}

impl InsertionSchedule {
    pub fn new(layers: Vec<usize>, num_layers: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("insertion schedule is empty".into()));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "insertion schedule {layers:?} must be strictly ascending"
            )));
        }
        if *layers.last().unwrap() != num_layers {
            return Err(Error::Validation(format!(
                "insertion schedule {layers:?} must end at the last layer {num_layers}"
            )));
        }
        Ok(Self { layers })
    }

    /// `0, step, 2*step, ...` while a full step remains before the last
    /// layer, then `num_layers`: `every(5, 32)` is `{0, 5, ..., 25, 32}`.
    pub fn every(step: usize, num_layers: usize) -> Result<Self> {
        if step == 0 {
            return Err(Error::Validation("insertion step must be positive".into()));
        }
        let mut layers: Vec<usize> = (0..num_layers)
            .step_by(step)
            .filter(|&l| l == 0 || l + step <= num_layers)
            .collect();
        layers.push(num_layers);
        Self::new(layers, num_layers)
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.layers.last().unwrap()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }
}

/// `L`, `D` and the exposed layers: what a checkpoint or cache must agree on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSignature {
    pub num_layers: usize,
    pub model_dim: usize,
    pub inserted_layers: Vec<usize>,
}

/// Token-level states `H^l` for a batch, `B x Q x D`. Rows shorter than `Q`
/// are zero-filled beyond `lengths[b]`; `pad[b][q]` marks pad tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTokenStates {
    pub layer: usize,
    pub states: Array3<f32>,
    pub lengths: Vec<usize>,
    pub pad: Vec<Vec<bool>>,
}

impl LayerTokenStates {
    /// States with no pad tokens and full-length rows.
    pub fn dense(layer: usize, states: Array3<f32>) -> Self {
        let (b, q, _) = states.dim();
        Self {
            layer,
            states,
            lengths: vec![q; b],
            pad: vec![vec![false; q]; b],
        }
    }
}

/// Pooled node vectors `Z^l`, one row per entry of `nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub layer: usize,
    pub nodes: Vec<usize>,
    pub values: Array2<f32>,
}

/// Mean over the non-pad positions of each row; a row that is all pad is
/// averaged over all of its positions. Accumulates in f64.
pub fn readout_mean(h: &LayerTokenStates) -> Array2<f32> {
    let (b, _, d) = h.states.dim();
    let mut out = Array2::zeros((b, d));
    for row in 0..b {
        let len = h.lengths[row].max(1);
        let mut positions: Vec<usize> = (0..len).filter(|&q| !h.pad[row][q]).collect();
        if positions.is_empty() {
            positions = (0..len).collect();
        }
        let count = positions.len() as f64;
        for j in 0..d {
            let sum: f64 = positions.iter().map(|&q| h.states[[row, q, j]] as f64).sum();
            out[[row, j]] = (sum / count) as f32;
        }
    }
    out
}

/// A frozen encoder exposing pooled embeddings at its inserted layers.
pub trait LayerwiseEncoder: Sync {
    fn num_layers(&self) -> usize;
    fn model_dim(&self) -> usize;
    fn inserted_layers(&self) -> &[usize];

    /// Pooled embeddings of `nodes` at each of `layers`, in the order given.
    fn embed(&self, graph: &TextualGraph, layers: &[usize], nodes: &[usize]) -> Result<Vec<NodeEmbeddings>>;

    fn signature(&self) -> BackboneSignature {
        BackboneSignature {
            num_layers: self.num_layers(),
            model_dim: self.model_dim(),
            inserted_layers: self.inserted_layers().to_vec(),
        }
    }
}
