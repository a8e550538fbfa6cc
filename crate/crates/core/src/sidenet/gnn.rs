use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::RngCore;

use crate::autodiff::{NodeId, ParamId, ParamStore, SparseOperator, Tape};
use crate::error::Result;

use super::glorot;

pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnnKind {
    /// Symmetric-normalized aggregation with self-loops.
    Gcn,
    /// `x_i W_self + b + mean_{j∈N(i)} x_j W_nbr`; empty neighborhoods give zero.
    Sage,
    /// Single-head attention over the neighborhood plus self.
    Gat,
}

impl fmt::Display for GnnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GnnKind::Gcn => "gcn",
            GnnKind::Sage => "sage",
            GnnKind::Gat => "gat",
        })
    }
}

impl FromStr for GnnKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gcn" => Ok(GnnKind::Gcn),
            "sage" => Ok(GnnKind::Sage),
            "gat" => Ok(GnnKind::Gat),
            other => Err(format!("unknown gnn `{other}` (expected gcn, sage or gat)")),
        }
    }
}

/// Weights of one message-passing layer (`K -> K`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnnWeights {
    Sage {
        w_self: ParamId,
        bias: ParamId,
        w_nbr: ParamId,
    },
    Gcn {
        weight: ParamId,
        bias: ParamId,
    },
    Gat {
        weight: ParamId,
        bias: ParamId,
        att_src: ParamId,
        att_dst: ParamId,
    },
}

impl GnnWeights {
    pub(super) fn register<R: RngCore + ?Sized>(
        kind: GnnKind,
        params: &mut ParamStore,
        prefix: &str,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            GnnKind::Sage => GnnWeights::Sage {
                w_self: params.register(format!("{prefix}.w_self"), glorot(rng, k, k), true)?,
                bias: params.register(format!("{prefix}.bias"), Array2::zeros((1, k)), true)?,
                w_nbr: params.register(format!("{prefix}.w_nbr"), glorot(rng, k, k), true)?,
            },
            GnnKind::Gcn => GnnWeights::Gcn {
                weight: params.register(format!("{prefix}.weight"), glorot(rng, k, k), true)?,
                bias: params.register(format!("{prefix}.bias"), Array2::zeros((1, k)), true)?,
            },
            GnnKind::Gat => GnnWeights::Gat {
                weight: params.register(format!("{prefix}.weight"), glorot(rng, k, k), true)?,
                bias: params.register(format!("{prefix}.bias"), Array2::zeros((1, k)), true)?,
                att_src: params.register(format!("{prefix}.att_src"), glorot(rng, 1, k), true)?,
                att_dst: params.register(format!("{prefix}.att_dst"), glorot(rng, 1, k), true)?,
            },
        })
    }

    /// Pre-activation output. Without message passing every variant
    /// reduces to `x W + b`.
    pub(super) fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: NodeId,
        adjacency: &[Vec<usize>],
        message_passing: bool,
    ) -> Result<NodeId> {
        match *self {
            GnnWeights::Sage { w_self, bias, w_nbr } => {
                let ws = tape.param(params, w_self)?;
                let b = tape.param(params, bias)?;
                let own = tape.affine(x, ws, Some(b))?;
                if !message_passing {
                    return Ok(own);
                }
                let wn = tape.param(params, w_nbr)?;
                let mean = tape.propagate(x, SparseOperator::neighbor_mean(adjacency))?;
                let nbr = tape.affine(mean, wn, None)?;
                tape.add(own, nbr)
            }
            GnnWeights::Gcn { weight, bias } => {
                let w = tape.param(params, weight)?;
                let b = tape.param(params, bias)?;
                if !message_passing {
                    return tape.affine(x, w, Some(b));
                }
                let agg = tape.propagate(x, SparseOperator::symmetric_normalized(adjacency))?;
                tape.affine(agg, w, Some(b))
            }
            GnnWeights::Gat {
                weight,
                bias,
                att_src,
                att_dst,
            } => {
                let w = tape.param(params, weight)?;
                let b = tape.param(params, bias)?;
                if !message_passing {
                    return tape.affine(x, w, Some(b));
                }
                let h = tape.affine(x, w, None)?;
                let s = tape.param(params, att_src)?;
                let d = tape.param(params, att_dst)?;
                let att = tape.attention(h, s, d, adjacency, GAT_NEGATIVE_SLOPE)?;
                tape.add(att, b)
            }
        }
    }
}
