use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

use super::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Where a leaf value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// A side-network parameter, copied from a [`ParamStore`].
    Param(ParamId),
    /// Pooled backbone output at a layer. Enters as a constant.
    BackboneOutput { layer: usize },
    Constant,
    Computed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Elu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

/// A fixed sparse linear operator `out[row] += weight * x[col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    pub size: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseOperator {
    /// Row-wise neighbor mean; rows with no neighbors produce zeros.
    pub fn neighbor_mean(adjacency: &[Vec<usize>]) -> Self {
        let mut entries = Vec::new();
        for (i, nbrs) in adjacency.iter().enumerate() {
            let w = 1.0 / nbrs.len().max(1) as f64;
            entries.extend(nbrs.iter().map(|&j| (i, j, w)));
        }
        Self {
            size: adjacency.len(),
            entries,
        }
    }

    /// `D^-1/2 (A + I) D^-1/2` with degrees counted after adding self-loops.
    pub fn symmetric_normalized(adjacency: &[Vec<usize>]) -> Self {
        let deg: Vec<f64> = adjacency.iter().map(|n| (n.len() + 1) as f64).collect();
        let mut entries = Vec::new();
        for (i, nbrs) in adjacency.iter().enumerate() {
            entries.push((i, i, 1.0 / deg[i]));
            entries.extend(nbrs.iter().map(|&j| (i, j, 1.0 / (deg[i] * deg[j]).sqrt())));
        }
        Self {
            size: adjacency.len(),
            entries,
        }
    }
}

/// The closed set of operations a tape can record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Affine,
    Add,
    Propagate,
    Attention,
    Activate,
    Dropout,
    LayerNorm,
    Gate,
    Blend,
    SelectRow,
    Detach,
    SoftmaxCrossEntropy,
    WeightedSum,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Leaf,
        OpKind::Affine,
        OpKind::Add,
        OpKind::Propagate,
        OpKind::Attention,
        OpKind::Activate,
        OpKind::Dropout,
        OpKind::LayerNorm,
        OpKind::Gate,
        OpKind::Blend,
        OpKind::SelectRow,
        OpKind::Detach,
        OpKind::SoftmaxCrossEntropy,
        OpKind::WeightedSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Affine => "affine",
            OpKind::Add => "add",
            OpKind::Propagate => "propagate",
            OpKind::Attention => "attention",
            OpKind::Activate => "activate",
            OpKind::Dropout => "dropout",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gate => "gate",
            OpKind::Blend => "blend",
            OpKind::SelectRow => "select_row",
            OpKind::Detach => "detach",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::WeightedSum => "weighted_sum",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnsupportedOp(s.to_string()))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    Propagate { x: NodeId, op: SparseOperator },
    Attention {
        h: NodeId,
        a_src: NodeId,
        a_dst: NodeId,
        /// Per row: `(neighbor, alpha, pre-activation score)`, self included.
        weights: Vec<Vec<(usize, f64, f64)>>,
        slope: f64,
    },
    Activate { x: NodeId, kind: Activation },
    Dropout { x: NodeId, mask: Array2<f64> },
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    Gate { omega: NodeId, temperature: f64 },
    Blend { lambda: NodeId, a: NodeId, b: NodeId },
    SelectRow { x: NodeId, row: usize },
    Detach,
    SoftmaxCrossEntropy { logits: NodeId, label: usize, probs: Vec<f64> },
    WeightedSum(Vec<(NodeId, f64)>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Affine { .. } => OpKind::Affine,
            Op::Add(..) => OpKind::Add,
            Op::Propagate { .. } => OpKind::Propagate,
            Op::Attention { .. } => OpKind::Attention,
            Op::Activate { .. } => OpKind::Activate,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gate { .. } => OpKind::Gate,
            Op::Blend { .. } => OpKind::Blend,
            Op::SelectRow { .. } => OpKind::SelectRow,
            Op::Detach => OpKind::Detach,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::WeightedSum(_) => OpKind::WeightedSum,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    origin: Origin,
    value: Array2<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Append-only record of side-network operations for reverse-mode
/// differentiation. Backbone outputs can only enter as constants, and the
/// only parameters a tape can read come from a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Array2<f64> {
        &self.nodes[node.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, node: NodeId) -> f64 {
        self.nodes[node.0].value[[0, 0]]
    }

    pub fn origin(&self, node: NodeId) -> Origin {
        self.nodes[node.0].origin
    }

    /// Count of recorded nodes per operation kind.
    pub fn op_histogram(&self) -> BTreeMap<OpKind, usize> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            *out.entry(n.op.kind()).or_insert(0) += 1;
        }
        out
    }

    pub fn origins(&self) -> impl Iterator<Item = Origin> + '_ {
        self.nodes.iter().map(|n| n.origin)
    }

    fn push(&mut self, op: Op, origin: Origin, value: Array2<f64>) -> Result<NodeId> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of `{}`", op.kind())));
        }
        self.nodes.push(Node { op, origin, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        self.push(Op::Leaf, Origin::Param(id), store.value(id).clone())
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Result<NodeId> {
        self.push(Op::Leaf, Origin::Constant, value)
    }

    pub fn backbone_output(&mut self, layer: usize, value: Array2<f64>) -> Result<NodeId> {
        self.push(Op::Leaf, Origin::BackboneOutput { layer }, value)
    }

    /// `x W + b`, with `b` a `1 x k` row broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != wv.nrows() {
            return Err(Error::Shape(format!(
                "affine input width {} vs weight rows {}",
                xv.ncols(),
                wv.nrows()
            )));
        }
        let mut out = xv.dot(wv);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.dim() != (1, out.ncols()) {
                return Err(Error::Shape(format!("bias {:?} vs output width {}", bv.dim(), out.ncols())));
            }
            out += bv;
        }
        self.push(Op::Affine { x, w, b }, Origin::Computed, out)
    }

    /// Elementwise `a + b`; a `1 x k` `b` is broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = bv.nrows() == 1 && bv.ncols() == av.ncols();
        if av.dim() != bv.dim() && !broadcast {
            return Err(Error::Shape(format!("add {:?} + {:?}", av.dim(), bv.dim())));
        }
        let out = av + bv;
        self.push(Op::Add(a, b), Origin::Computed, out)
    }

    pub fn propagate(&mut self, x: NodeId, op: SparseOperator) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.nrows() != op.size {
            return Err(Error::Shape(format!("operator over {} rows, input has {}", op.size, xv.nrows())));
        }
        if let Some(&(r, c, _)) = op.entries.iter().find(|&&(r, c, _)| r >= op.size || c >= op.size) {
            return Err(Error::Shape(format!("edge index ({r}, {c}) out of range for {} rows", op.size)));
        }
        let mut out = Array2::zeros(xv.raw_dim());
        for &(r, c, w) in &op.entries {
            out.row_mut(r).scaled_add(w, &xv.row(c));
        }
        self.push(Op::Propagate { x, op }, Origin::Computed, out)
    }

    /// Single-head attention aggregation over `neighbors[i] ∪ {i}`:
    /// `e_ij = leaky(a_dst·h_i + a_src·h_j)`, `out_i = Σ_j softmax_j(e_ij) h_j`.
    pub fn attention(
        &mut self,
        h: NodeId,
        a_src: NodeId,
        a_dst: NodeId,
        neighbors: &[Vec<usize>],
        slope: f64,
    ) -> Result<NodeId> {
        let hv = self.value(h);
        let (n, k) = hv.dim();
        let (sv, dv) = (self.value(a_src), self.value(a_dst));
        if sv.dim() != (1, k) || dv.dim() != (1, k) {
            return Err(Error::Shape(format!("attention vectors must be 1x{k}")));
        }
        if neighbors.len() != n {
            return Err(Error::Shape(format!("{} neighbor lists for {n} rows", neighbors.len())));
        }
        let src_score: Vec<f64> = hv.rows().into_iter().map(|r| r.dot(&sv.row(0))).collect();
        let dst_score: Vec<f64> = hv.rows().into_iter().map(|r| r.dot(&dv.row(0))).collect();
        let mut out = Array2::zeros((n, k));
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let mut group: Vec<usize> = neighbors[i].iter().copied().filter(|&j| j != i).collect();
            if let Some(&bad) = group.iter().find(|&&j| j >= n) {
                return Err(Error::Shape(format!("edge index {bad} out of range for {n} rows")));
            }
            group.push(i);
            let pre: Vec<f64> = group.iter().map(|&j| dst_score[i] + src_score[j]).collect();
            let e: Vec<f64> = pre.iter().map(|&p| if p > 0.0 { p } else { slope * p }).collect();
            let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = e.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let row: Vec<(usize, f64, f64)> = group
                .iter()
                .zip(exps.iter().zip(&pre))
                .map(|(&j, (&ex, &p))| (j, ex / total, p))
                .collect();
            for &(j, alpha, _) in &row {
                out.row_mut(i).scaled_add(alpha, &hv.row(j));
            }
            weights.push(row);
        }
        self.push(
            Op::Attention {
                h,
                a_src,
                a_dst,
                weights,
                slope,
            },
            Origin::Computed,
            out,
        )
    }

    pub fn activate(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let out = self.value(x).mapv(|v| kind.apply(v));
        self.push(Op::Activate { x, kind }, Origin::Computed, out)
    }

    /// Elementwise product with a fixed mask (entries `0` or `1/(1-p)`).
    pub fn dropout(&mut self, x: NodeId, mask: Array2<f64>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.dim() != mask.dim() {
            return Err(Error::Shape("dropout mask shape".into()));
        }
        let out = xv * &mask;
        self.push(Op::Dropout { x, mask }, Origin::Computed, out)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        let k = out.ncols() as f64;
        let mut inv_std = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / k;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(Op::LayerNorm { x, inv_std }, Origin::Computed, out)
    }

    /// `λ = sigmoid(ω / T)` for a 1x1 `ω`.
    pub fn gate(&mut self, omega: NodeId, temperature: f64) -> Result<NodeId> {
        let ov = self.value(omega);
        if ov.dim() != (1, 1) {
            return Err(Error::Shape("gate logit must be 1x1".into()));
        }
        let lambda = sigmoid(ov[[0, 0]] / temperature);
        self.push(
            Op::Gate { omega, temperature },
            Origin::Computed,
            Array2::from_elem((1, 1), lambda),
        )
    }

    /// `λ a + (1 - λ) b` for a 1x1 `λ`.
    pub fn blend(&mut self, lambda: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let l = self.scalar(lambda);
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::Shape(format!("blend {:?} with {:?}", av.dim(), bv.dim())));
        }
        let out = av * l + bv * (1.0 - l);
        self.push(Op::Blend { lambda, a, b }, Origin::Computed, out)
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if row >= xv.nrows() {
            return Err(Error::Shape(format!("row {row} of {}", xv.nrows())));
        }
        let out = xv.select(Axis(0), &[row]);
        self.push(Op::SelectRow { x, row }, Origin::Computed, out)
    }

    /// Same value, no gradient flow back into `x`.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).clone();
        self.push(Op::Detach, Origin::Computed, out)
    }

    /// `-log softmax(logits)[label]` for a `1 x C` row, with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.nrows() != 1 || label >= lv.ncols() {
            return Err(Error::Shape(format!("cross entropy on {:?} with label {label}", lv.dim())));
        }
        let row: Vec<f64> = lv.row(0).to_vec();
        let (loss, probs) = softmax_xent(&row, label);
        self.push(
            Op::SoftmaxCrossEntropy { logits, label, probs },
            Origin::Computed,
            Array2::from_elem((1, 1), loss),
        )
    }

    /// `Σ w_i x_i` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> Result<NodeId> {
        let first = terms.first().ok_or_else(|| Error::Shape("empty weighted sum".into()))?.0;
        let mut out = Array2::zeros(self.value(first).raw_dim());
        for &(n, w) in &terms {
            let v = self.value(n);
            if v.dim() != out.dim() {
                return Err(Error::Shape("weighted sum over mixed shapes".into()));
            }
            out.scaled_add(w, v);
        }
        self.push(Op::WeightedSum(terms), Origin::Computed, out)
    }

    /// Propagates `d loss / d node` in reverse record order and collects
    /// gradients for every parameter of `store`.
    pub fn backward(&mut self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let (rows, cols) = self.value(loss).dim();
        if (rows, cols) != (1, 1) {
            return Err(Error::LossNotScalar { rows, cols });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        let mut out = Gradients {
            by_param: store.iter().map(|(_, p)| Array2::zeros(p.value.raw_dim())).collect(),
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if let Origin::Param(id) = node.origin {
                        let slot = out
                            .by_param
                            .get_mut(id.0)
                            .ok_or_else(|| Error::Shape(format!("parameter {} not in store", id.0)))?;
                        if slot.dim() != g.dim() {
                            return Err(Error::Shape(format!("parameter {} changed shape", id.0)));
                        }
                        *slot += &g;
                    }
                }
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    accumulate(&mut grads, *x, g.dot(&wv.t()));
                    accumulate(&mut grads, *w, xv.t().dot(&g));
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::Add(a, b) => {
                    let gb = if self.nodes[b.0].value.dim() == g.dim() {
                        g.clone()
                    } else {
                        g.sum_axis(Axis(0)).insert_axis(Axis(0))
                    };
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Propagate { x, op } => {
                    let mut gx = Array2::zeros(g.raw_dim());
                    for &(r, c, w) in &op.entries {
                        gx.row_mut(c).scaled_add(w, &g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention {
                    h,
                    a_src,
                    a_dst,
                    weights,
                    slope,
                } => {
                    let hv = &self.nodes[h.0].value;
                    let sv = self.nodes[a_src.0].value.row(0).to_owned();
                    let dv = self.nodes[a_dst.0].value.row(0).to_owned();
                    let mut gh = Array2::zeros(hv.raw_dim());
                    let mut gs = Array2::zeros((1, hv.ncols()));
                    let mut gd = Array2::zeros((1, hv.ncols()));
                    for (i, row) in weights.iter().enumerate() {
                        let gi = g.row(i);
                        let dalpha: Vec<f64> = row.iter().map(|&(j, _, _)| gi.dot(&hv.row(j))).collect();
                        let mean: f64 = row.iter().zip(&dalpha).map(|(&(_, a, _), &d)| a * d).sum();
                        for (&(j, alpha, pre), &da) in row.iter().zip(&dalpha) {
                            gh.row_mut(j).scaled_add(alpha, &gi);
                            let de = alpha * (da - mean);
                            let dpre = de * if pre > 0.0 { 1.0 } else { *slope };
                            gd.row_mut(0).scaled_add(dpre, &hv.row(i));
                            gh.row_mut(i).scaled_add(dpre, &dv);
                            gs.row_mut(0).scaled_add(dpre, &hv.row(j));
                            gh.row_mut(j).scaled_add(dpre, &sv);
                        }
                    }
                    accumulate(&mut grads, *h, gh);
                    accumulate(&mut grads, *a_src, gs);
                    accumulate(&mut grads, *a_dst, gd);
                }
                Op::Activate { x, kind } => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = g;
                    gx.zip_mut_with(xv, |gv, &v| *gv *= kind.derivative(v));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads, *x, g * mask);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let k = y.ncols() as f64;
                    let mut gx = Array2::zeros(g.raw_dim());
                    for r in 0..y.nrows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.sum() / k;
                        let mean_gy = gr.dot(&yr) / k;
                        for c in 0..y.ncols() {
                            gx[[r, c]] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gate { omega, temperature } => {
                    let l = node.value[[0, 0]];
                    let d = g[[0, 0]] * l * (1.0 - l) / temperature;
                    accumulate(&mut grads, *omega, Array2::from_elem((1, 1), d));
                }
                Op::Blend { lambda, a, b } => {
                    let l = self.nodes[lambda.0].value[[0, 0]];
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let dl: f64 = g.iter().zip(av.iter().zip(bv.iter())).map(|(gv, (x, y))| gv * (x - y)).sum();
                    accumulate(&mut grads, *lambda, Array2::from_elem((1, 1), dl));
                    accumulate(&mut grads, *a, &g * l);
                    accumulate(&mut grads, *b, &g * (1.0 - l));
                }
                Op::SelectRow { x, row } => {
                    let mut gx = Array2::zeros(self.nodes[x.0].value.raw_dim());
                    gx.row_mut(*row).assign(&g.row(0));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Detach => {}
                Op::SoftmaxCrossEntropy { logits, label, probs } => {
                    let up = g[[0, 0]];
                    let mut gl = Array2::from_shape_vec((1, probs.len()), probs.clone()).expect("row");
                    gl[[0, *label]] -= 1.0;
                    gl *= up;
                    accumulate(&mut grads, *logits, gl);
                }
                Op::WeightedSum(terms) => {
                    for &(n, w) in terms {
                        accumulate(&mut grads, n, &g * w);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], node: NodeId, g: Array2<f64>) {
    match &mut grads[node.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and softmax probabilities for one logit row.
pub(crate) fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|v| v - max).collect();
    let log_total = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    let probs = shifted.iter().map(|v| (v - log_total).exp()).collect();
    (log_total - shifted[label], probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_chain_gradient_is_one() {
        let mut store = ParamStore::new();
        let omega = store.register("omega", array![[0.3]], true).unwrap();
        let other = store.register("other", array![[1.0, 2.0]], true).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, omega).unwrap();
        let _unused = tape.param(&store, other).unwrap();
        let grads = tape.backward(w, &store).unwrap();
        assert_eq!(grads.get(omega), &array![[1.0]]);
        assert_eq!(grads.get(other), &array![[0.0, 0.0]]);
    }

    #[test]
    fn backward_errors() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0]]).unwrap();
        assert!(matches!(tape.backward(x, &store), Err(Error::LossNotScalar { rows: 1, cols: 2 })));
        let s = tape.constant(array![[1.0]]).unwrap();
        tape.backward(s, &store).unwrap();
        assert!(matches!(tape.backward(s, &store), Err(Error::TapeConsumed)));
    }

    #[test]
    fn unsupported_ops_are_rejected_by_name() {
        assert_eq!("blend".parse::<OpKind>().unwrap(), OpKind::Blend);
        assert!(matches!("conv2d".parse::<OpKind>(), Err(Error::UnsupportedOp(_))));
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }

    #[test]
    fn cross_entropy_uniform_gradient() {
        let mut store = ParamStore::new();
        let logits = store.register("logits", array![[0.0, 0.0, 0.0]], true).unwrap();
        let mut tape = Tape::new();
        let l = tape.param(&store, logits).unwrap();
        let loss = tape.softmax_cross_entropy(l, 2).unwrap();
        assert!((tape.scalar(loss) - 3f64.ln()).abs() < 1e-12);
        let g = tape.backward(loss, &store).unwrap();
        let expected = [1.0 / 3.0, 1.0 / 3.0, -2.0 / 3.0];
        for (a, b) in g.get(logits).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let p = store.register("p", array![[2.0]], true).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, p).unwrap();
        let d = tape.detach(x).unwrap();
        let s = tape.weighted_sum(vec![(d, 3.0)]).unwrap();
        let g = tape.backward(s, &store).unwrap();
        assert_eq!(g.get(p)[[0, 0]], 0.0);
    }

    #[test]
    fn propagate_rejects_out_of_range_edges() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0], [2.0]]).unwrap();
        let op = SparseOperator {
            size: 2,
            entries: vec![(0, 5, 1.0)],
        };
        assert!(matches!(tape.propagate(x, op), Err(Error::Shape(_))));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1e4), 1.0);
        assert_eq!(sigmoid(-1e4), 0.0);
    }
}
