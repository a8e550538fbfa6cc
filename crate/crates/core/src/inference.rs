//! Full-depth and patience-based early-exit inference.
//!
//! Early exit walks the schedule one ladder at a time and fetches each
//! layer's embeddings only when that ladder runs, so nothing past the exit
//! point is computed. The patience counter includes the current ladder:
//! two agreeing adjacent exit heads satisfy `p = 2`. The final classifier
//! never votes; it is the fallback when patience is not reached.

use serde::Serialize;

use crate::backbone::LayerwiseEncoder;
use crate::error::{Error, Result};
use crate::graph::{sample, SamplerConfig, Subgraph, TextualGraph};
use crate::sidenet::{argmax, GLadderStack, Mode};
use crate::training::predict_with;

pub const DEFAULT_PATIENCE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatienceConfig {
    pub patience: usize,
    pub enabled: bool,
}

impl Default for PatienceConfig {
    fn default() -> Self {
        Self {
            patience: DEFAULT_PATIENCE,
            enabled: true,
        }
    }
}

impl PatienceConfig {
    pub fn new(patience: usize) -> Result<Self> {
        let cfg = Self { patience, enabled: true };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn disabled() -> Self {
        Self {
            patience: DEFAULT_PATIENCE,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Validation("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Index of the exit head at which the patience rule fires for the given
/// per-head predictions, if any.
pub fn patience_exit(predictions: &[usize], patience: usize) -> Option<usize> {
    let mut run = 0;
    for (i, &pred) in predictions.iter().enumerate() {
        run = if i > 0 && predictions[i - 1] == pred { run + 1 } else { 1 };
        if run >= patience {
            return Some(i);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExitDecision {
    pub class: usize,
    /// Position in the schedule of the ladder that produced `class`.
    pub exit_index: usize,
    /// Backbone layer of that ladder.
    pub exit_layer: usize,
    pub ladders_evaluated: usize,
    pub early: bool,
}

/// Argmax of the final classifier for the target of `sub`.
pub fn infer_full(
    graph: &TextualGraph,
    encoder: &dyn LayerwiseEncoder,
    stack: &GLadderStack,
    sub: &Subgraph,
) -> Result<usize> {
    predict_with(graph, encoder, stack, sub)
}

/// Patience early exit for the target of `sub`. With patience disabled (or
/// a stack without exit heads) every ladder runs and the final classifier
/// decides.
pub fn infer_early_exit(
    graph: &TextualGraph,
    encoder: &dyn LayerwiseEncoder,
    stack: &GLadderStack,
    sub: &Subgraph,
    cfg: PatienceConfig,
) -> Result<ExitDecision> {
    cfg.validate()?;
    let layers = stack.schedule().layers();
    let use_exits = cfg.enabled && stack.has_exit_heads();
    let mut run = stack.run(sub);
    let mut previous: Option<usize> = None;
    let mut streak = 0;

    for (i, &layer) in layers.iter().enumerate() {
        let fetched = encoder.embed(graph, &[layer], &sub.members)?;
        let z = stack.inputs_from_layer(&fetched, layer, sub)?;
        let step = run.step(&z, &mut Mode::Eval)?;
        if !use_exits {
            continue;
        }
        let logits = step.exit_logits.expect("stack has exit heads");
        let pred = argmax(&run.tape.value(logits).row(0).to_vec());
        streak = if previous == Some(pred) { streak + 1 } else { 1 };
        previous = Some(pred);
        if streak >= cfg.patience {
            return Ok(ExitDecision {
                class: pred,
                exit_index: i,
                exit_layer: layer,
                ladders_evaluated: run.evaluated(),
                early: true,
            });
        }
    }
    let logits = run.final_logits()?;
    let class = argmax(&run.tape.value(logits).row(0).to_vec());
    Ok(ExitDecision {
        class,
        exit_index: layers.len() - 1,
        exit_layer: stack.schedule().last(),
        ladders_evaluated: run.evaluated(),
        early: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitStats {
    /// Nodes exiting at each schedule position; the last bin also holds
    /// nodes decided by the final classifier.
    pub histogram: Vec<usize>,
    /// Backbone layer of each bin.
    pub layers: Vec<usize>,
    /// Nodes decided by the final classifier.
    pub final_head: usize,
    pub accuracy: f64,
    pub mean_layers: f64,
    pub nodes: usize,
}

/// Per-node decisions and aggregated statistics over `nodes`.
pub fn exit_histogram(
    graph: &TextualGraph,
    encoder: &dyn LayerwiseEncoder,
    stack: &GLadderStack,
    sampler: &SamplerConfig,
    nodes: &[usize],
    cfg: PatienceConfig,
) -> Result<(Vec<ExitDecision>, ExitStats)> {
    if nodes.is_empty() {
        return Err(Error::EmptyNodes);
    }
    let mut decisions = Vec::with_capacity(nodes.len());
    for &node in nodes {
        if node >= graph.num_nodes() {
            return Err(Error::Validation(format!(
                "node {node} out of range for a graph with {} nodes",
                graph.num_nodes()
            )));
        }
        let sub = sample(graph, node, sampler)?;
        decisions.push(infer_early_exit(graph, encoder, stack, &sub, cfg)?);
    }
    let stats = summarize(graph, stack, nodes, &decisions);
    Ok((decisions, stats))
}

fn summarize(graph: &TextualGraph, stack: &GLadderStack, nodes: &[usize], decisions: &[ExitDecision]) -> ExitStats {
    let mut histogram = vec![0; stack.schedule().len()];
    let mut correct = 0;
    let mut evaluated = 0;
    let mut final_head = 0;
    for (&node, d) in nodes.iter().zip(decisions) {
        histogram[d.exit_index] += 1;
        evaluated += d.ladders_evaluated;
        if !d.early {
            final_head += 1;
        }
        if d.class == graph.label(node) {
            correct += 1;
        }
    }
    let n = nodes.len() as f64;
    ExitStats {
        histogram,
        layers: stack.schedule().layers().to_vec(),
        final_head,
        accuracy: correct as f64 / n,
        mean_layers: evaluated as f64 / n,
        nodes: nodes.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_rule_vectors() {
        assert_eq!(patience_exit(&[3, 3, 1], 2), Some(1));
        assert_eq!(patience_exit(&[1, 2, 1, 2], 2), None);
        assert_eq!(patience_exit(&[5, 0], 1), Some(0));
        assert_eq!(patience_exit(&[4, 4, 4], 3), Some(2));
        assert_eq!(patience_exit(&[4, 4, 4], 4), None);
    }

    #[test]
    fn run_resets_on_change() {
        assert_eq!(patience_exit(&[1, 1, 2, 2, 2], 3), Some(4));
    }

    #[test]
    fn zero_patience_rejected() {
        assert!(PatienceConfig::new(0).is_err());
        assert_eq!(PatienceConfig::default().patience, 2);
    }
}
