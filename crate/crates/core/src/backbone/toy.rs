//! Deterministic frozen transformer standing in for a pretrained encoder.
//!
//! Forward equations for one sequence of `n` token ids `t`:
//!
//! ```text
//! H0[q]  = E[t_q] + P[q]
//!          P[q][2i]   = sin(q / 10000^(2i/D))
//!          P[q][2i+1] = cos(q / 10000^(2i/D))
//! for l in 1..=L, with X = H(l-1):
//!   per head h (width dh = D / heads, columns h*dh..(h+1)*dh):
//!     Qh = X Wq_h   Kh = X Wk_h   Vh = X Wv_h
//!     Ah[q] = sum_k softmax_k(Qh[q].Kh[k] / sqrt(dh)) Vh[k]   over allowed keys k
//!   U  = X + concat_h(Ah) Wo
//!   Y  = U + tanh(U W1 + b1) W2 + b2            (W1: D x 2D, W2: 2D x D)
//!   Hl = (Y - mean(Y)) / sqrt(var(Y) + 1e-5)     row-wise, no affine
//! ```
//!
//! Allowed keys are the non-pad positions, or every position when the
//! sequence is all pad. Each sequence is computed independently so the
//! result never depends on how nodes are batched.
//!
//! Weights are drawn once from [`crate::rng::stream`]`(init_seed, 0)` in
//! the order: embedding table (`vocab x D`), then per layer `Wq, Wk, Wv, Wo,
//! W1, b1, W2, b2`, each row-major. Every value is `(2u - 1) * s` with `u`
//! from [`crate::rng::unit_f64`], `s = 1` for the embedding table,
//! `s = 1/sqrt(fan_in)` for matrices and `s = 0.1` for biases.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::graph::TextualGraph;
use crate::rng;

use super::{readout_mean, tokenizer, InsertionSchedule, LayerTokenStates, LayerwiseEncoder, NodeEmbeddings};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformerConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub init_seed: u64,
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            num_layers: 4,
            model_dim: 64,
            heads: 4,
            max_len: 32,
            init_seed: 7,
        }
    }
}

impl ToyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Validation("vocab_size must be at least 2".into()));
        }
        if self.num_layers == 0 || self.model_dim == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::Validation("backbone layers, dim, heads and max_len must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Validation(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    pub w2: Array2<f32>,
    pub b2: Array1<f32>,
}

#[derive(Debug)]
pub struct ToyTransformer {
    cfg: ToyTransformerConfig,
    schedule: InsertionSchedule,
    embedding: Array2<f32>,
    blocks: Vec<BlockWeights>,
    forward_calls: AtomicUsize,
}

impl ToyTransformer {
    pub fn new(cfg: ToyTransformerConfig, schedule: InsertionSchedule) -> Result<Self> {
        cfg.validate()?;
        if schedule.last() != cfg.num_layers {
            return Err(Error::ScheduleMismatch(format!(
                "schedule {:?} must end at the backbone's last layer {}",
                schedule.layers(),
                cfg.num_layers
            )));
        }
        let d = cfg.model_dim;
        let f = 2 * d;
        let mut stream = rng::stream(cfg.init_seed, 0);
        let mut draw = |rows: usize, cols: usize, scale: f32| {
            Array2::from_shape_fn((rows, cols), |_| ((2.0 * rng::unit_f64(&mut stream) - 1.0) as f32) * scale)
        };
        let embedding = draw(cfg.vocab_size, d, 1.0);
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let sd = 1.0 / (d as f32).sqrt();
            let sf = 1.0 / (f as f32).sqrt();
            let wq = draw(d, d, sd);
            let wk = draw(d, d, sd);
            let wv = draw(d, d, sd);
            let wo = draw(d, d, sd);
            let w1 = draw(d, f, sd);
            let b1 = draw(1, f, 0.1).remove_axis(ndarray::Axis(0));
            let w2 = draw(f, d, sf);
            let b2 = draw(1, d, 0.1).remove_axis(ndarray::Axis(0));
            blocks.push(BlockWeights { wq, wk, wv, wo, w1, b1, w2, b2 });
        }
        Ok(Self {
            cfg,
            schedule,
            embedding,
            blocks,
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ToyTransformerConfig {
        &self.cfg
    }

    pub fn embedding_table(&self) -> &Array2<f32> {
        &self.embedding
    }

    /// Weights of transformer layer `layer` (1-based; layer 0 is the embedding).
    pub fn block(&self, layer: usize) -> &BlockWeights {
        &self.blocks[layer - 1]
    }

    /// Number of sequences pushed through the backbone so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Little-endian bytes of every backbone parameter, in generation order.
    pub fn parameter_snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |values: &mut dyn Iterator<Item = &f32>| {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(&mut self.embedding.iter());
        for b in &self.blocks {
            push(&mut b.wq.iter());
            push(&mut b.wk.iter());
            push(&mut b.wv.iter());
            push(&mut b.wo.iter());
            push(&mut b.w1.iter());
            push(&mut b.b1.iter());
            push(&mut b.w2.iter());
            push(&mut b.b2.iter());
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenizer::tokenize(text, self.cfg.vocab_size, self.cfg.max_len)
    }

    /// Runs the backbone on a batch and returns `H^0..=H^L`.
    pub fn forward(&self, batch: &[Vec<u32>]) -> Result<Vec<LayerTokenStates>> {
        let layers: Vec<usize> = (0..=self.cfg.num_layers).collect();
        self.forward_layers(batch, &layers)
    }

    /// Like [`forward`](Self::forward) but keeps only the requested layers,
    /// in the order given.
    pub fn forward_layers(&self, batch: &[Vec<u32>], keep: &[usize]) -> Result<Vec<LayerTokenStates>> {
        let d = self.cfg.model_dim;
        if let Some(&bad) = keep.iter().find(|&&l| l > self.cfg.num_layers) {
            return Err(Error::NotInserted(bad));
        }
        for seq in batch {
            if seq.is_empty() {
                return Err(Error::Shape("token sequences must be non-empty".into()));
            }
            if seq.len() > self.cfg.max_len {
                return Err(Error::SequenceTooLong {
                    len: seq.len(),
                    max: self.cfg.max_len,
                });
            }
            if let Some(&tok) = seq.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
                return Err(Error::Validation(format!("token id {tok} outside vocabulary")));
            }
        }
        self.forward_calls.fetch_add(batch.len(), Ordering::Relaxed);

        let q_max = batch.iter().map(Vec::len).max().unwrap_or(1);
        let mut out: Vec<LayerTokenStates> = keep
            .iter()
            .map(|&layer| LayerTokenStates {
                layer,
                states: Array3::zeros((batch.len(), q_max, d)),
                lengths: batch.iter().map(Vec::len).collect(),
                pad: batch
                    .iter()
                    .map(|seq| {
                        let mut row = vec![true; q_max];
                        for (slot, &t) in row.iter_mut().zip(seq) {
                            *slot = t == tokenizer::PAD;
                        }
                        row
                    })
                    .collect(),
            })
            .collect();

        for (b, seq) in batch.iter().enumerate() {
            let mut h = self.embed(seq);
            self.store(&mut out, keep, 0, b, &h);
            let allowed: Vec<usize> = {
                let real: Vec<usize> = (0..seq.len()).filter(|&q| seq[q] != tokenizer::PAD).collect();
                if real.is_empty() {
                    (0..seq.len()).collect()
                } else {
                    real
                }
            };
            let last_needed = keep.iter().copied().max().unwrap_or(0);
            for layer in 1..=last_needed {
                h = self.layer_forward(self.block(layer), &h, &allowed);
                self.store(&mut out, keep, layer, b, &h);
            }
        }
        Ok(out)
    }

    fn store(&self, out: &mut [LayerTokenStates], keep: &[usize], layer: usize, b: usize, h: &Array2<f32>) {
        for (slot, &l) in out.iter_mut().zip(keep) {
            if l == layer {
                slot.states.slice_mut(s![b, ..h.nrows(), ..]).assign(h);
            }
        }
    }

    fn embed(&self, seq: &[u32]) -> Array2<f32> {
        let d = self.cfg.model_dim;
        let mut h = Array2::zeros((seq.len(), d));
        for (q, &tok) in seq.iter().enumerate() {
            let mut row = h.row_mut(q);
            row.assign(&self.embedding.row(tok as usize));
            for (j, v) in row.iter_mut().enumerate() {
                *v += positional(q, j, d);
            }
        }
        h
    }

    fn layer_forward(&self, w: &BlockWeights, x: &Array2<f32>, allowed: &[usize]) -> Array2<f32> {
        let n = x.nrows();
        let d = self.cfg.model_dim;
        let dh = d / self.cfg.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let q = x.dot(&w.wq);
        let k = x.dot(&w.wk);
        let v = x.dot(&w.wv);
        let mut concat = Array2::<f32>::zeros((n, d));
        let mut scores = vec![0f32; allowed.len()];
        for head in 0..self.cfg.heads {
            let cols = head * dh..(head + 1) * dh;
            for qi in 0..n {
                let qrow = q.slice(s![qi, cols.clone()]);
                let mut max = f32::NEG_INFINITY;
                for (slot, &ki) in scores.iter_mut().zip(allowed) {
                    *slot = qrow.dot(&k.slice(s![ki, cols.clone()])) * scale;
                    max = max.max(*slot);
                }
                let mut total = 0f32;
                for slot in scores.iter_mut() {
                    *slot = (*slot - max).exp();
                    total += *slot;
                }
                let mut dst = concat.slice_mut(s![qi, cols.clone()]);
                for (&weight, &ki) in scores.iter().zip(allowed) {
                    dst.scaled_add(weight / total, &v.slice(s![ki, cols.clone()]));
                }
            }
        }
        let u = x + &concat.dot(&w.wo);
        let mut hidden = u.dot(&w.w1) + &w.b1;
        hidden.mapv_inplace(f32::tanh);
        let mut y = &u + &(hidden.dot(&w.w2) + &w.b2);
        for mut row in y.rows_mut() {
            let mean = row.sum() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        y
    }
}

/// Sinusoidal position term for position `q`, channel `j` of a width-`d` model.
pub fn positional(q: usize, j: usize, d: usize) -> f32 {
    let pair = (j / 2 * 2) as f64;
    let angle = q as f64 / 10000f64.powf(pair / d as f64);
    (if j % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
}

impl LayerwiseEncoder for ToyTransformer {
    fn num_layers(&self) -> usize {
        self.cfg.num_layers
    }

    fn model_dim(&self) -> usize {
        self.cfg.model_dim
    }

    fn inserted_layers(&self) -> &[usize] {
        self.schedule.layers()
    }

    fn embed(&self, graph: &TextualGraph, layers: &[usize], nodes: &[usize]) -> Result<Vec<NodeEmbeddings>> {
        if let Some(&bad) = layers.iter().find(|l| !self.schedule.contains(**l)) {
            return Err(Error::NotInserted(bad));
        }
        if let Some(&bad) = nodes.iter().find(|&&n| n >= graph.num_nodes()) {
            return Err(Error::Validation(format!("node {bad} out of range")));
        }
        let batch: Vec<Vec<u32>> = nodes.iter().map(|&n| self.tokenize(graph.text(n))).collect();
        let states = self.forward_layers(&batch, layers)?;
        Ok(states
            .iter()
            .map(|h| NodeEmbeddings {
                layer: h.layer,
                nodes: nodes.to_vec(),
                values: readout_mean(h),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyTransformer {
        let cfg = ToyTransformerConfig {
            vocab_size: 16,
            num_layers: 2,
            model_dim: 4,
            heads: 2,
            max_len: 6,
            init_seed: 7,
        };
        ToyTransformer::new(cfg, InsertionSchedule::new(vec![0, 2], 2).unwrap()).unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let model = small();
        let batch = vec![vec![3, 5], vec![1, 2, 3]];
        let a = model.forward(&batch).unwrap();
        let b = model.forward(&batch).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(small().parameter_snapshot(), model.parameter_snapshot());
    }

    #[test]
    fn pad_only_node_is_finite() {
        let model = small();
        let states = model.forward(&[vec![tokenizer::PAD]]).unwrap();
        for h in &states {
            assert!(h.states.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn batching_does_not_change_rows() {
        let model = small();
        let alone = model.forward(&[vec![3, 5]]).unwrap();
        let batched = model.forward(&[vec![1, 2, 3, 4], vec![3, 5]]).unwrap();
        for (a, b) in alone.iter().zip(&batched) {
            assert_eq!(a.states.slice(s![0, ..2, ..]), b.states.slice(s![1, ..2, ..]));
        }
    }

    #[test]
    fn rejects_long_sequences() {
        let model = small();
        let err = model.forward(&[vec![1; 7]]).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 7, max: 6 }));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ToyTransformerConfig::default();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let cfg = ToyTransformerConfig::default();
        assert!(ToyTransformer::new(cfg, InsertionSchedule::new(vec![0, 2], 2).unwrap()).is_err());
    }
}
