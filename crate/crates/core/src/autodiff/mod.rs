//! Reverse-mode differentiation over the side network's closed operation set.
//!
//! A [`Tape`] records affine maps, neighborhood aggregations, activations,
//! the sigmoid gate, convex blends and softmax cross-entropy. Parameters
//! enter only through a [`ParamStore`]; backbone outputs enter only as
//! constants, so no gradient can reach the backbone.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check_fd, GradCheck};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{sigmoid, Activation, NodeId, OpKind, Origin, SparseOperator, Tape, LAYER_NORM_EPS};
pub(crate) use tape::softmax_xent;
