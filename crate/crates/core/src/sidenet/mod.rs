//! The G-Ladder side network.
//!
//! One ladder per inserted backbone layer `l`:
//!
//! ```text
//! Ẑ^l = λ^l · GNN^l(P^l(Z^l), A) + (1 - λ^l) · Ẑ^{l-1},   λ^l = sigmoid(ω^l / T)
//! ```
//!
//! The state before the first ladder is that ladder's own projection
//! `P^first(Z^first)`. The target's row of the last state feeds the final
//! classifier; each ladder also carries a single-layer exit head.

mod checkpoint;
mod gnn;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gnn::{GnnKind, GnnWeights};

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::RngCore;

use crate::autodiff::{sigmoid, Activation, NodeId, ParamId, ParamStore, Tape};
use crate::backbone::{InsertionSchedule, NodeEmbeddings};
use crate::error::{Error, Result};
use crate::graph::Subgraph;
use crate::rng;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// `sigmoid(omega / temperature)`.
pub fn gate_lambda(omega: f64, temperature: f64) -> f64 {
    assert!(temperature > 0.0, "gate temperature must be positive");
    sigmoid(omega / temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Identity,
    LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Learnable,
    /// ω pinned at zero, so every λ stays 0.5.
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderConfig {
    /// Side width `K`.
    pub hidden: usize,
    pub gnn: GnnKind,
    pub gnn_layers: usize,
    pub activation: Activation,
    pub norm: Norm,
    pub dropout: f64,
    pub temperature: f64,
    pub gate: GateMode,
    /// `false` drops every neighbor term (the structure ablation).
    pub message_passing: bool,
    pub exit_heads: bool,
    /// Let exit-head gradients flow back into the ladders.
    pub joint_exit_heads: bool,
    pub init_seed: u64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gnn: GnnKind::Sage,
            gnn_layers: 1,
            activation: Activation::Elu,
            norm: Norm::Identity,
            dropout: 0.5,
            temperature: DEFAULT_TEMPERATURE,
            gate: GateMode::Learnable,
            message_passing: true,
            exit_heads: true,
            joint_exit_heads: false,
            init_seed: 0,
        }
    }
}

impl LadderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Validation("ladder hidden size must be positive".into()));
        }
        if !(1..=2).contains(&self.gnn_layers) {
            return Err(Error::Validation(format!(
                "gnn_layers must be 1 or 2, got {}",
                self.gnn_layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Validation("gate temperature must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count for a stack with backbone
    /// width `d` and `c` classes over `ladders` inserted layers.
    pub fn trainable_parameter_count(&self, d: usize, c: usize, ladders: usize) -> usize {
        let k = self.hidden;
        let gnn_layer = match self.gnn {
            GnnKind::Sage => 2 * k * k + k,
            GnnKind::Gcn => k * k + k,
            GnnKind::Gat => k * k + 3 * k,
        };
        let gate = usize::from(self.gate == GateMode::Learnable);
        let head = k * c + c;
        let per_ladder = d * k + k + self.gnn_layers * gnn_layer + gate + if self.exit_heads { head } else { 0 };
        ladders * per_ladder + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter handles of one ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct GLadderLayer {
    pub layer: usize,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub gnn: Vec<GnnWeights>,
    pub omega: ParamId,
}

/// Forward mode. Dropout is drawn only in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone)]
pub struct GLadderStack {
    schedule: InsertionSchedule,
    input_dim: usize,
    num_classes: usize,
    cfg: LadderConfig,
    params: ParamStore,
    ladders: Vec<GLadderLayer>,
    final_head: Head,
    exit_heads: Vec<Head>,
}

fn glorot<R: RngCore + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| (2.0 * rng::unit_f64(rng) - 1.0) * a)
}

impl GLadderStack {
    /// Builds a freshly initialized stack. Ladder and final-head weights
    /// come from one seeded stream, exit heads from another, so adding or
    /// removing exit heads leaves the main path's initialization unchanged.
    pub fn new(schedule: InsertionSchedule, input_dim: usize, num_classes: usize, cfg: LadderConfig) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Validation("input_dim and num_classes must be positive".into()));
        }
        let k = cfg.hidden;
        let mut main = rng::stream(cfg.init_seed, rng::streams::LADDER_INIT);
        let mut heads_rng = rng::stream(cfg.init_seed, rng::streams::EXIT_HEAD_INIT);
        let mut params = ParamStore::new();
        let mut ladders = Vec::with_capacity(schedule.len());
        let mut exit_heads = Vec::new();

        for (i, &layer) in schedule.layers().iter().enumerate() {
            let prefix = format!("ladder.{i}");
            let proj_weight = params.register(format!("{prefix}.proj.weight"), glorot(&mut main, input_dim, k), true)?;
            let proj_bias = params.register(format!("{prefix}.proj.bias"), Array2::zeros((1, k)), true)?;
            let gnn = (0..cfg.gnn_layers)
                .map(|j| GnnWeights::register(cfg.gnn, &mut params, &format!("{prefix}.gnn.{j}"), k, &mut main))
                .collect::<Result<Vec<_>>>()?;
            let omega = params.register(
                format!("{prefix}.omega"),
                Array2::zeros((1, 1)),
                cfg.gate == GateMode::Learnable,
            )?;
            ladders.push(GLadderLayer {
                layer,
                proj_weight,
                proj_bias,
                gnn,
                omega,
            });
        }
        let final_head = Head {
            weight: params.register("final.weight", glorot(&mut main, k, num_classes), true)?,
            bias: params.register("final.bias", Array2::zeros((1, num_classes)), true)?,
        };
        if cfg.exit_heads {
            for i in 0..schedule.len() {
                exit_heads.push(Head {
                    weight: params.register(format!("exit.{i}.weight"), glorot(&mut heads_rng, k, num_classes), true)?,
                    bias: params.register(format!("exit.{i}.bias"), Array2::zeros((1, num_classes)), true)?,
                });
            }
        }

        Ok(Self {
            schedule,
            input_dim,
            num_classes,
            cfg,
            params,
            ladders,
            final_head,
            exit_heads,
        })
    }

    pub fn schedule(&self) -> &InsertionSchedule {
        &self.schedule
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn config(&self) -> &LadderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn ladders(&self) -> &[GLadderLayer] {
        &self.ladders
    }

    pub fn final_head(&self) -> Head {
        self.final_head
    }

    pub fn exit_heads(&self) -> &[Head] {
        &self.exit_heads
    }

    pub fn has_exit_heads(&self) -> bool {
        !self.exit_heads.is_empty()
    }

    /// Current `λ` of every ladder.
    pub fn lambdas(&self) -> Vec<f64> {
        self.ladders
            .iter()
            .map(|l| gate_lambda(self.params.value(l.omega)[[0, 0]], self.cfg.temperature))
            .collect()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Converts per-layer embeddings (rows aligned with `sub.members`) into
    /// ladder inputs ordered by the schedule.
    pub fn inputs_from(&self, per_layer: &[NodeEmbeddings], sub: &Subgraph) -> Result<Vec<Array2<f64>>> {
        self.schedule
            .layers()
            .iter()
            .map(|&layer| self.inputs_from_layer(per_layer, layer, sub))
            .collect()
    }

    /// Ladder input for a single `layer` out of `per_layer`.
    pub fn inputs_from_layer(&self, per_layer: &[NodeEmbeddings], layer: usize, sub: &Subgraph) -> Result<Array2<f64>> {
        let z = per_layer
            .iter()
            .find(|z| z.layer == layer)
            .ok_or(Error::MissingLayer(layer))?;
        if z.nodes != sub.members {
            return Err(Error::Shape(format!(
                "embeddings at layer {layer} are not aligned with subgraph members"
            )));
        }
        Ok(z.values.mapv(f64::from))
    }

    /// Starts an incremental forward pass over `sub`.
    pub fn run<'s>(&'s self, sub: &Subgraph) -> LadderRun<'s> {
        LadderRun {
            stack: self,
            tape: Tape::new(),
            adjacency: sub.local_adjacency(),
            rows: sub.len(),
            state: None,
            next: 0,
        }
    }

    /// `P^l(z)` for ladder index `ladder`, in evaluation mode.
    pub fn project(&self, ladder: usize, z: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let input = tape.constant(z.clone())?;
        let out = self.project_on(&mut tape, ladder, input)?;
        Ok(tape.value(out).clone())
    }

    /// The ladder's GNN applied to `x` over `sub`, in evaluation mode.
    pub fn gnn_forward(&self, ladder: usize, x: &Array2<f64>, sub: &Subgraph) -> Result<Array2<f64>> {
        if x.nrows() != sub.len() {
            return Err(Error::Shape(format!("{} rows for {} members", x.nrows(), sub.len())));
        }
        let mut tape = Tape::new();
        let input = tape.constant(x.clone())?;
        let out = self.gnn_on(&mut tape, ladder, input, &sub.local_adjacency(), &mut Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// One ladder update `λ·GNN(P(z)) + (1-λ)·prev`, in evaluation mode.
    /// `prev = None` means this is the first ladder.
    pub fn ladder_forward(
        &self,
        ladder: usize,
        z: &Array2<f64>,
        prev: Option<&Array2<f64>>,
        sub: &Subgraph,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let prev = prev.map(|p| tape.constant(p.clone())).transpose()?;
        let adjacency = sub.local_adjacency();
        let out = self.ladder_on(&mut tape, ladder, z, prev, &adjacency, &mut Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    fn project_on(&self, tape: &mut Tape, ladder: usize, z: NodeId) -> Result<NodeId> {
        let l = &self.ladders[ladder];
        let zv = tape.value(z);
        if zv.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "projector expects width {}, got {}",
                self.input_dim,
                zv.ncols()
            )));
        }
        let w = tape.param(&self.params, l.proj_weight)?;
        let b = tape.param(&self.params, l.proj_bias)?;
        tape.affine(z, w, Some(b))
    }

    fn gnn_on(
        &self,
        tape: &mut Tape,
        ladder: usize,
        x: NodeId,
        adjacency: &[Vec<usize>],
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        let mut h = x;
        for weights in &self.ladders[ladder].gnn {
            if mode.is_train() && self.cfg.dropout > 0.0 {
                let Mode::Train(rng) = mode else { unreachable!() };
                let mask = dropout_mask(tape.value(h).dim(), self.cfg.dropout, &mut **rng);
                h = tape.dropout(h, mask)?;
            }
            h = weights.forward(tape, &self.params, h, adjacency, self.cfg.message_passing)?;
            if self.cfg.norm == Norm::LayerNorm {
                h = tape.layer_norm(h)?;
            }
            h = tape.activate(h, self.cfg.activation)?;
        }
        Ok(h)
    }

    fn ladder_on(
        &self,
        tape: &mut Tape,
        ladder: usize,
        z: &Array2<f64>,
        prev: Option<NodeId>,
        adjacency: &[Vec<usize>],
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        let l = &self.ladders[ladder];
        if z.nrows() != adjacency.len() {
            return Err(Error::Shape(format!(
                "{} embedding rows for {} members",
                z.nrows(),
                adjacency.len()
            )));
        }
        let z = tape.backbone_output(l.layer, z.clone())?;
        let projected = self.project_on(tape, ladder, z)?;
        let structural = self.gnn_on(tape, ladder, projected, adjacency, mode)?;
        let prev = prev.unwrap_or(projected);
        if tape.value(prev).dim() != tape.value(structural).dim() {
            return Err(Error::Shape(format!(
                "previous state {:?} vs ladder output {:?}",
                tape.value(prev).dim(),
                tape.value(structural).dim()
            )));
        }
        let omega = tape.param(&self.params, l.omega)?;
        let lambda = tape.gate(omega, self.cfg.temperature)?;
        tape.blend(lambda, structural, prev)
    }

    fn head_on(&self, tape: &mut Tape, head: Head, input: NodeId) -> Result<NodeId> {
        let w = tape.param(&self.params, head.weight)?;
        let b = tape.param(&self.params, head.bias)?;
        tape.affine(input, w, Some(b))
    }
}

fn dropout_mask(dim: (usize, usize), p: f64, rng: &mut dyn RngCore) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn(dim, |_| if rng::unit_f64(rng) < p { 0.0 } else { keep })
}

/// One ladder's contribution to a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LadderStep {
    pub state: NodeId,
    pub exit_logits: Option<NodeId>,
}

/// Incremental forward pass: ladders are evaluated one at a time in
/// schedule order, so callers can stop early.
pub struct LadderRun<'s> {
    stack: &'s GLadderStack,
    pub tape: Tape,
    adjacency: Vec<Vec<usize>>,
    rows: usize,
    state: Option<NodeId>,
    next: usize,
}

impl LadderRun<'_> {
    /// Ladders evaluated so far.
    pub fn evaluated(&self) -> usize {
        self.next
    }

    pub fn remaining(&self) -> usize {
        self.stack.ladders.len() - self.next
    }

    /// Runs the next ladder on `z` (rows aligned with the subgraph members)
    /// and, if the stack has exit heads, its exit classifier on the target.
    pub fn step(&mut self, z: &Array2<f64>, mode: &mut Mode<'_>) -> Result<LadderStep> {
        let ladder = self.next;
        if ladder >= self.stack.ladders.len() {
            return Err(Error::Validation("every ladder has already been evaluated".into()));
        }
        if z.nrows() != self.rows {
            return Err(Error::Shape(format!("{} embedding rows for {} members", z.nrows(), self.rows)));
        }
        let state = self
            .stack
            .ladder_on(&mut self.tape, ladder, z, self.state, &self.adjacency, mode)?;
        self.state = Some(state);
        self.next += 1;
        let exit_logits = match self.stack.exit_heads.get(ladder) {
            Some(&head) => {
                let row = self.tape.select_row(state, 0)?;
                let input = if self.stack.cfg.joint_exit_heads {
                    row
                } else {
                    self.tape.detach(row)?
                };
                Some(self.stack.head_on(&mut self.tape, head, input)?)
            }
            None => None,
        };
        Ok(LadderStep { state, exit_logits })
    }

    /// Final classifier on the target row of the last state. Requires every
    /// ladder to have run.
    pub fn final_logits(&mut self) -> Result<NodeId> {
        if self.remaining() != 0 {
            return Err(Error::Validation(format!("{} ladders not yet evaluated", self.remaining())));
        }
        let state = self.state.expect("at least one ladder");
        let row = self.tape.select_row(state, 0)?;
        self.stack.head_on(&mut self.tape, self.stack.final_head, row)
    }
}

/// Result of a full stack forward pass.
pub struct StackOutput {
    pub tape: Tape,
    pub final_logits: NodeId,
    pub exit_logits: Vec<NodeId>,
    pub states: Vec<NodeId>,
}

impl StackOutput {
    pub fn final_values(&self) -> Vec<f64> {
        self.tape.value(self.final_logits).row(0).to_vec()
    }

    pub fn exit_values(&self) -> Vec<Vec<f64>> {
        self.exit_logits.iter().map(|&n| self.tape.value(n).row(0).to_vec()).collect()
    }
}

/// Folds every ladder over the schedule and applies the final and exit
/// classifiers to the target row. `inputs` are ordered by the schedule.
pub fn stack_forward(
    stack: &GLadderStack,
    inputs: &[Array2<f64>],
    sub: &Subgraph,
    mode: &mut Mode<'_>,
) -> Result<StackOutput> {
    if inputs.len() != stack.ladders.len() {
        let missing = stack.schedule.layers()[inputs.len().min(stack.ladders.len() - 1)];
        return Err(Error::MissingLayer(missing));
    }
    let mut run = stack.run(sub);
    let mut exit_logits = Vec::new();
    let mut states = Vec::new();
    for z in inputs {
        let step = run.step(z, mode)?;
        states.push(step.state);
        exit_logits.extend(step.exit_logits);
    }
    let final_logits = run.final_logits()?;
    Ok(StackOutput {
        tape: run.tape,
        final_logits,
        exit_logits,
        states,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Identity => "none",
            Norm::LayerNorm => "layer",
        })
    }
}

impl FromStr for Norm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" | "id" | "identity" => Ok(Norm::Identity),
            "layer" | "ln" | "layer_norm" => Ok(Norm::LayerNorm),
            other => Err(format!("unknown norm `{other}` (expected none or layer)")),
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Learnable => "learnable",
            GateMode::Constant => "constant",
        })
    }
}

impl FromStr for GateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "learnable" => Ok(GateMode::Learnable),
            "constant" => Ok(GateMode::Constant),
            other => Err(format!("unknown gate mode `{other}` (expected learnable or constant)")),
        }
    }
}

pub fn activation_name(a: Activation) -> String {
    match a {
        Activation::Identity => "identity".into(),
        Activation::Relu => "relu".into(),
        Activation::Elu => "elu".into(),
        Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
    }
}

pub fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    match s {
        "identity" | "none" => Ok(Activation::Identity),
        "relu" => Ok(Activation::Relu),
        "elu" => Ok(Activation::Elu),
        other => match other.strip_prefix("leaky_relu:") {
            Some(slope) => slope
                .parse()
                .map(Activation::LeakyRelu)
                .map_err(|e| format!("bad leaky_relu slope: {e}")),
            None => Err(format!("unknown activation `{other}`")),
        },
    }
}
