use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::rng;

use super::TextualGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    KHop,
    Rwr,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::KHop => "khop",
            SamplerKind::Rwr => "rwr",
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "khop" => Ok(SamplerKind::KHop),
            "rwr" => Ok(SamplerKind::Rwr),
            other => Err(format!("unknown sampler `{other}` (expected khop or rwr)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub hops: usize,
    pub walk_length: usize,
    pub restart_prob: f64,
    pub num_walks: usize,
    pub max_nodes: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::KHop,
            hops: 1,
            walk_length: 16,
            restart_prob: 0.5,
            num_walks: 8,
            max_nodes: 32,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn khop(hops: usize, max_nodes: usize) -> Self {
        Self {
            kind: SamplerKind::KHop,
            hops,
            max_nodes,
            ..Self::default()
        }
    }

    pub fn rwr(num_walks: usize, walk_length: usize, restart_prob: f64, max_nodes: usize, seed: u64) -> Self {
        Self {
            kind: SamplerKind::Rwr,
            num_walks,
            walk_length,
            restart_prob,
            max_nodes,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.restart_prob) {
            return Err(Error::Validation(format!(
                "restart_prob {} must lie in [0, 1]",
                self.restart_prob
            )));
        }
        if self.hops == 0 {
            return Err(Error::Validation("hops must be at least 1".into()));
        }
        if self.max_nodes == 0 {
            return Err(Error::Validation("max_nodes must be at least 1".into()));
        }
        Ok(())
    }
}

/// A target-centred subgraph. `members[0]` is the target; `local_edges`
/// index into `members` and are stored as `(lo, hi)` position pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub target: usize,
    pub members: Vec<usize>,
    pub local_edges: Vec<(usize, usize)>,
}

impl Subgraph {
    /// Builds a subgraph from explicit members and local edges, checking
    /// the positional invariants.
    pub fn new(members: Vec<usize>, local_edges: Vec<(usize, usize)>) -> Result<Self> {
        let target = *members
            .first()
            .ok_or_else(|| Error::Validation("subgraph needs at least the target".into()))?;
        let mut sorted = members.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("subgraph members must be unique".into()));
        }
        if let Some(&(a, b)) = local_edges.iter().find(|&&(a, b)| a >= members.len() || b >= members.len()) {
            return Err(Error::Shape(format!(
                "local edge ({a}, {b}) outside {} members",
                members.len()
            )));
        }
        Ok(Self {
            target,
            members,
            local_edges,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Local neighbor lists (positions), ascending.
    pub fn local_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.members.len()];
        for &(a, b) in &self.local_edges {
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// The same subgraph with message passing removed: members kept,
    /// edges dropped.
    pub fn without_edges(&self) -> Self {
        Self {
            target: self.target,
            members: self.members.clone(),
            local_edges: Vec::new(),
        }
    }
}

/// Edges of `graph` with both endpoints in `members`, re-indexed to
/// positions, sorted.
pub fn induced_edges(graph: &TextualGraph, members: &[usize]) -> Vec<(usize, usize)> {
    let position: HashMap<usize, usize> = members.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut edges = Vec::new();
    for (i, &node) in members.iter().enumerate() {
        for nbr in graph.neighbors(node) {
            if let Some(&j) = position.get(nbr) {
                if i < j {
                    edges.push((i, j));
                }
            }
        }
    }
    edges.sort_unstable();
    edges
}

pub fn sample(graph: &TextualGraph, target: usize, cfg: &SamplerConfig) -> Result<Subgraph> {
    match cfg.kind {
        SamplerKind::KHop => sample_khop(graph, target, cfg),
        SamplerKind::Rwr => sample_rwr(graph, target, cfg),
    }
}

/// Ego graph of radius `cfg.hops`, closest nodes first with ascending-id
/// tie-break, truncated to `cfg.max_nodes`.
pub fn sample_khop(graph: &TextualGraph, target: usize, cfg: &SamplerConfig) -> Result<Subgraph> {
    check_target(graph, target)?;
    cfg.validate()?;

    let mut dist = vec![usize::MAX; graph.num_nodes()];
    dist[target] = 0;
    let mut queue = VecDeque::from([target]);
    let mut reached = vec![(0usize, target)];
    while let Some(node) = queue.pop_front() {
        if dist[node] == cfg.hops {
            continue;
        }
        for &nbr in graph.neighbors(node) {
            if dist[nbr] == usize::MAX {
                dist[nbr] = dist[node] + 1;
                reached.push((dist[nbr], nbr));
                queue.push_back(nbr);
            }
        }
    }
    reached.sort_unstable();
    reached.truncate(cfg.max_nodes);
    let members: Vec<usize> = reached.into_iter().map(|(_, n)| n).collect();
    let local_edges = induced_edges(graph, &members);
    Ok(Subgraph {
        target,
        members,
        local_edges,
    })
}

/// Random walks with restart from `target`.
///
/// Walk `w` draws from [`rng::walk_stream`]`(seed, target, w)`. Each step
/// consumes one [`rng::unit_f64`]: below `restart_prob` the walker jumps
/// back to the target. Otherwise, if the current node has neighbors, one
/// [`rng::bounded_index`] over its ascending neighbor list picks the next
/// node; a degree-0 node keeps the walker in place without a second draw.
/// Members are the target followed by other nodes in first-visit order.
pub fn sample_rwr(graph: &TextualGraph, target: usize, cfg: &SamplerConfig) -> Result<Subgraph> {
    check_target(graph, target)?;
    cfg.validate()?;

    let mut members = vec![target];
    let mut visited = vec![false; graph.num_nodes()];
    visited[target] = true;
    'walks: for walk in 0..cfg.num_walks {
        let mut stream = rng::walk_stream(cfg.seed, target, walk);
        let mut current = target;
        for _ in 0..cfg.walk_length {
            if members.len() >= cfg.max_nodes {
                break 'walks;
            }
            if rng::unit_f64(&mut stream) < cfg.restart_prob {
                current = target;
            } else {
                let nbrs = graph.neighbors(current);
                if !nbrs.is_empty() {
                    current = nbrs[rng::bounded_index(&mut stream, nbrs.len())];
                }
            }
            if !visited[current] {
                visited[current] = true;
                members.push(current);
            }
        }
    }
    members.truncate(cfg.max_nodes);
    let local_edges = induced_edges(graph, &members);
    Ok(Subgraph {
        target,
        members,
        local_edges,
    })
}

fn check_target(graph: &TextualGraph, target: usize) -> Result<()> {
    if target >= graph.num_nodes() {
        return Err(Error::Validation(format!(
            "target {target} out of range for {} nodes",
            graph.num_nodes()
        )));
    }
    Ok(())
}
