//! Training loop, evaluation, and metrics.
//!
//! Each step samples the target's subgraph, fetches per-layer embeddings
//! from the encoder (live backbone or cache; the loop cannot tell), runs
//! the stack, and backpropagates
//! `CE(final) + exit_loss_weight * mean_l CE(exit_l)` through the tape.
//! Gradients of `accumulation` consecutive targets are averaged into one
//! AdamW step.

mod adamw;
mod loss;

pub use adamw::{AdamW, AdamWConfig};
pub use loss::cross_entropy;

use serde::Serialize;

use crate::backbone::LayerwiseEncoder;
use crate::error::{Error, Result};
use crate::graph::{sample, SamplerConfig, Split, Subgraph, TextualGraph};
use crate::rng;
use crate::sidenet::{argmax, stack_forward, GLadderStack, Mode};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    /// Epochs without validation improvement before stopping; `None` trains
    /// every epoch.
    pub early_stop_patience: Option<usize>,
    /// Targets per optimizer step.
    pub accumulation: usize,
    pub exit_loss_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            optimizer: AdamWConfig::default(),
            early_stop_patience: Some(20),
            accumulation: 16,
            exit_loss_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if self.accumulation == 0 {
            return Err(Error::Validation("accumulation must be at least 1".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Validation("early-stop patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch metrics; serialized as one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub exit_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    /// Total loss of every training target, in visiting order.
    pub step_losses: Vec<f64>,
    pub optimizer_steps: u64,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Subgraphs for every node, sampled once; samplers are deterministic.
pub struct SubgraphTable {
    subgraphs: Vec<Subgraph>,
}

impl SubgraphTable {
    pub fn build(graph: &TextualGraph, sampler: &SamplerConfig) -> Result<Self> {
        let subgraphs = (0..graph.num_nodes())
            .map(|n| sample(graph, n, sampler))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { subgraphs })
    }

    pub fn get(&self, node: usize) -> &Subgraph {
        &self.subgraphs[node]
    }
}

/// Checks that `encoder` exposes every scheduled layer at the stack's width.
pub fn check_encoder(encoder: &dyn LayerwiseEncoder, stack: &GLadderStack) -> Result<()> {
    if encoder.model_dim() != stack.input_dim() {
        return Err(Error::ScheduleMismatch(format!(
            "encoder width {} but ladders expect {}",
            encoder.model_dim(),
            stack.input_dim()
        )));
    }
    let available = encoder.inserted_layers();
    if let Some(missing) = stack.schedule().layers().iter().find(|l| !available.contains(l)) {
        return Err(Error::ScheduleMismatch(format!(
            "scheduled layer {missing} not provided (encoder exposes {available:?})"
        )));
    }
    Ok(())
}

/// Per-layer ladder inputs for `sub`, fetched from `encoder`.
pub fn fetch_inputs(
    graph: &TextualGraph,
    encoder: &dyn LayerwiseEncoder,
    stack: &GLadderStack,
    sub: &Subgraph,
) -> Result<Vec<ndarray::Array2<f64>>> {
    let per_layer = encoder.embed(graph, stack.schedule().layers(), &sub.members)?;
    stack.inputs_from(&per_layer, sub)
}

/// Trains `stack` in place and restores the parameters of the epoch with
/// the best validation accuracy (ties keep the earlier epoch).
pub fn train(
    graph: &TextualGraph,
    encoder: &dyn LayerwiseEncoder,
    stack: &mut GLadderStack,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(graph, encoder, stack, sampler, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    graph: &TextualGraph,
    encoder: &dyn LayerwiseEncoder,
    stack: &mut GLadderStack,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_encoder(encoder, stack)?;
    if stack.num_classes() != graph.num_classes() {
        return Err(Error::Validation(format!(
            "stack predicts {} classes, graph has {}",
            stack.num_classes(),
            graph.num_classes()
        )));
    }
    let mut train_nodes = graph.split_nodes(Split::Train);
    if train_nodes.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let val_nodes = graph.split_nodes(Split::Val);
    let test_nodes = graph.split_nodes(Split::Test);
    let table = SubgraphTable::build(graph, sampler)?;

    let mut optimizer = AdamW::new(stack.params(), cfg.optimizer);
    let mut shuffle_rng = rng::stream(cfg.seed, rng::streams::SHUFFLE);
    let mut dropout_rng = rng::stream(cfg.seed, rng::streams::DROPOUT);

    let mut reports = Vec::new();
    let mut step_losses = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, stack.params().clone());
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        rng::shuffle(&mut train_nodes, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut exit_sums = vec![0.0; stack.exit_heads().len()];

        for group in train_nodes.chunks(cfg.accumulation) {
            stack.params_mut().zero_grad();
            for &target in group {
                let sub = table.get(target);
                let inputs = fetch_inputs(graph, encoder, stack, sub)?;
                let mut out = stack_forward(stack, &inputs, sub, &mut Mode::Train(&mut dropout_rng))?;
                let label = graph.label(target);
                let final_ce = out.tape.softmax_cross_entropy(out.final_logits, label)?;
                let mut terms = vec![(final_ce, 1.0)];
                if !out.exit_logits.is_empty() {
                    let w = cfg.exit_loss_weight / out.exit_logits.len() as f64;
                    for (i, &logits) in out.exit_logits.clone().iter().enumerate() {
                        let ce = out.tape.softmax_cross_entropy(logits, label)?;
                        exit_sums[i] += out.tape.scalar(ce);
                        terms.push((ce, w));
                    }
                }
                let total = out.tape.weighted_sum(terms)?;
                let loss = out.tape.scalar(total);
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}, target {target}")));
                }
                step_losses.push(loss);
                epoch_loss += loss;
                let grads = out.tape.backward(total, stack.params())?;
                stack.params_mut().accumulate(&grads, 1.0 / group.len() as f64)?;
            }
            optimizer.step(stack.params_mut())?;
        }

        let n = train_nodes.len() as f64;
        let val_accuracy = accuracy_over(graph, encoder, stack, &table, &val_nodes)?.unwrap_or(0.0);
        let test_accuracy = accuracy_over(graph, encoder, stack, &table, &test_nodes)?.unwrap_or(0.0);
        let report = LossReport {
            epoch,
            train_loss: epoch_loss / n,
            val_accuracy,
            test_accuracy,
            exit_losses: exit_sums.iter().map(|s| s / n).collect(),
        };
        on_epoch(&report);
        reports.push(report);

        // Without validation nodes there is nothing to select on, so the
        // latest epoch always counts as the best.
        if val_nodes.is_empty() || val_accuracy > best.0 {
            best = (val_accuracy, epoch, stack.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }

    stack.params_mut().copy_values_from(&best.2)?;
    Ok(TrainOutcome {
        reports,
        step_losses,
        optimizer_steps: optimizer.steps(),
        best_epoch: best.1,
        best_val_accuracy: best.0,
    })
}

fn accuracy_over(
    graph: &TextualGraph,
    encoder: &dyn LayerwiseEncoder,
    stack: &GLadderStack,
    table: &SubgraphTable,
    nodes: &[usize],
) -> Result<Option<f64>> {
    if nodes.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for &node in nodes {
        if predict_with(graph, encoder, stack, table.get(node))? == graph.label(node) {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / nodes.len() as f64))
}

/// Full-depth prediction for the target of `sub` (argmax, lowest index on ties).
pub fn predict_with(
    graph: &TextualGraph,
    encoder: &dyn LayerwiseEncoder,
    stack: &GLadderStack,
    sub: &Subgraph,
) -> Result<usize> {
    let inputs = fetch_inputs(graph, encoder, stack, sub)?;
    let out = stack_forward(stack, &inputs, sub, &mut Mode::Eval)?;
    Ok(argmax(&out.final_values()))
}

/// Accuracy of full (non-early-exit) inference over `split`.
pub fn evaluate(
    graph: &TextualGraph,
    encoder: &dyn LayerwiseEncoder,
    stack: &GLadderStack,
    sampler: &SamplerConfig,
    split: Split,
) -> Result<f64> {
    let nodes = graph.split_nodes(split);
    if nodes.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    check_encoder(encoder, stack)?;
    let mut correct = 0usize;
    for &node in &nodes {
        let sub = sample(graph, node, sampler)?;
        if predict_with(graph, encoder, stack, &sub)? == graph.label(node) {
            correct += 1;
        }
    }
    Ok(correct as f64 / nodes.len() as f64)
}
