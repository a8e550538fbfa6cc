//! Text-attributed graph model, ingestion format, and subgraph samplers.
//!
//! Ingestion format (UTF-8):
//!
//! ```text
//! nodes=<N> classes=<C>
//! <id>\t<label>\t<split>\t<text>      one line per node, text may be empty
//! edges
//! <src>\t<dst>                        one line per edge
//! ```
//!
//! Edges are treated as undirected. Self-loops are dropped and duplicate
//! pairs collapse to one edge.

mod sampler;

pub use sampler::{induced_edges, sample, sample_khop, sample_rwr, SamplerConfig, SamplerKind, Subgraph};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

/// A validated text-attributed graph. Read-only once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TextualGraph {
    num_nodes: usize,
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    texts: Vec<String>,
    labels: Vec<usize>,
    splits: Vec<Split>,
}

impl TextualGraph {
    /// Builds a graph, normalizing edges to `(min, max)` pairs, dropping
    /// self-loops and duplicates, and checking every invariant.
    pub fn new(
        num_classes: usize,
        texts: Vec<String>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let num_nodes = texts.len();
        if labels.len() != num_nodes || splits.len() != num_nodes {
            return Err(Error::Validation(format!(
                "per-node arrays disagree: {} texts, {} labels, {} splits",
                num_nodes,
                labels.len(),
                splits.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Validation("num_classes must be at least 1".into()));
        }
        if let Some((node, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {label} of node {node} is not below num_classes {num_classes}"
            )));
        }

        let mut normalized = Vec::new();
        for (a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::Validation(format!(
                    "endpoint out of range: edge ({a}, {b}) on a graph with {num_nodes} nodes"
                )));
            }
            if a != b {
                normalized.push((a.min(b), a.max(b)));
            }
        }
        normalized.sort_unstable();
        normalized.dedup();

        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(a, b) in &normalized {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }

        Ok(Self {
            num_nodes,
            num_classes,
            edges: normalized,
            adjacency,
            texts,
            labels,
            splits,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Undirected edges as `(min, max)` pairs in ascending order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbors of `node`, ascending.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn text(&self, node: usize) -> &str {
        &self.texts[node]
    }

    pub fn label(&self, node: usize) -> usize {
        self.labels[node]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self, node: usize) -> Split {
        self.splits[node]
    }

    /// Node ids tagged with `split`, ascending.
    pub fn split_nodes(&self, split: Split) -> Vec<usize> {
        (0..self.num_nodes).filter(|&n| self.splits[n] == split).collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    /// Renders the graph in the ingestion format.
    pub fn to_ingestion_string(&self) -> String {
        let mut out = format!("nodes={} classes={}\n", self.num_nodes, self.num_classes);
        for n in 0..self.num_nodes {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                n, self.labels[n], self.splits[n], self.texts[n]
            ));
        }
        out.push_str("edges\n");
        for &(a, b) in &self.edges {
            out.push_str(&format!("{a}\t{b}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ingestion_string()).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a graph in the ingestion format.
pub fn load_graph(path: &Path) -> Result<TextualGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text)
}

pub fn parse_graph(input: &str) -> Result<TextualGraph> {
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));

    let (line_no, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header `nodes=<N> classes=<C>`".into(),
    })?;
    let (num_nodes, num_classes) = parse_header(header).map_err(|message| Error::Parse { line: line_no, message })?;

    let mut texts: Vec<Option<String>> = vec![None; num_nodes];
    let mut labels = vec![0usize; num_nodes];
    let mut splits = vec![Split::Train; num_nodes];
    let mut seen = 0usize;
    let mut saw_edges_marker = false;

    for (line_no, line) in lines.by_ref() {
        if line == "edges" {
            saw_edges_marker = true;
            break;
        }
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        let mut fields = line.splitn(4, '\t');
        let id: usize = parse_field(fields.next(), "id").map_err(parse_err)?;
        let label: usize = parse_field(fields.next(), "label").map_err(parse_err)?;
        let split: Split = fields
            .next()
            .ok_or_else(|| parse_err("missing split field".into()))?
            .parse()
            .map_err(parse_err)?;
        let text = fields.next().unwrap_or("").to_string();
        if id >= num_nodes {
            return Err(Error::Validation(format!(
                "node id {id} on line {line_no} is out of range for {num_nodes} nodes"
            )));
        }
        if texts[id].is_some() {
            return Err(Error::Validation(format!("node {id} listed twice (line {line_no})")));
        }
        texts[id] = Some(text);
        labels[id] = label;
        splits[id] = split;
        seen += 1;
    }
    if !saw_edges_marker {
        return Err(Error::Parse {
            line: input.lines().count() + 1,
            message: "missing `edges` section marker".into(),
        });
    }
    if seen != num_nodes {
        let missing = texts.iter().position(Option::is_none).unwrap_or(0);
        return Err(Error::Validation(format!(
            "every node needs exactly one split tag: {seen} of {num_nodes} nodes listed, node {missing} missing"
        )));
    }

    let mut edges = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        let mut fields = line.split('\t');
        let a: usize = parse_field(fields.next(), "src").map_err(parse_err)?;
        let b: usize = parse_field(fields.next(), "dst").map_err(parse_err)?;
        if fields.next().is_some() {
            return Err(parse_err("edge lines take exactly two fields".into()));
        }
        edges.push((a, b));
    }

    let texts = texts.into_iter().map(Option::unwrap_or_default).collect();
    TextualGraph::new(num_classes, texts, labels, splits, edges)
}

fn parse_header(line: &str) -> std::result::Result<(usize, usize), String> {
    let mut nodes = None;
    let mut classes = None;
    for part in line.split_whitespace() {
        match part.split_once('=') {
            Some(("nodes", v)) => nodes = Some(v.parse::<usize>().map_err(|e| format!("bad node count: {e}"))?),
            Some(("classes", v)) => classes = Some(v.parse::<usize>().map_err(|e| format!("bad class count: {e}"))?),
            _ => return Err(format!("unexpected header token `{part}`")),
        }
    }
    match (nodes, classes) {
        (Some(n), Some(c)) => Ok((n, c)),
        _ => Err("header must be `nodes=<N> classes=<C>`".into()),
    }
}

fn parse_field<T: FromStr>(field: Option<&str>, name: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    let raw = field.ok_or_else(|| format!("missing {name} field"))?;
    raw.trim().parse().map_err(|e| format!("bad {name} `{raw}`: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const PATH3: &str = "nodes=3 classes=2\n0\t0\ttrain\tfirst node\n1\t1\tval\t\n2\t0\ttest\tthird\nedges\n0\t1\n1\t2\n";

    #[test]
    fn parses_three_node_path() {
        let g = parse_graph(PATH3).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.edges().len(), 2);
        assert_eq!(g.degree(1), 2);
        assert_eq!(g.text(1), "");
        assert_eq!(g.split(2), Split::Test);
    }

    #[test]
    fn rejects_out_of_range_endpoint() {
        let bad = PATH3.replace("1\t2\n", "0\t5\n");
        let err = parse_graph(&bad).unwrap_err();
        assert!(err.to_string().contains("endpoint out of range"), "{err}");
    }

    #[test]
    fn dedups_repeated_and_reversed_edges() {
        let dup = PATH3.replace("1\t2\n", "1\t0\n0\t1\n");
        let g = parse_graph(&dup).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn drops_self_loops() {
        let g = parse_graph(&PATH3.replace("1\t2\n", "2\t2\n")).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = PATH3.replace("2\t0\ttest", "2\tx\ttest");
        match parse_graph(&bad).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other}"),
        }
        match parse_graph(&PATH3.replace("0\t1\n1\t2", "0\t1\n1")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 7),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_label_out_of_range_and_missing_nodes() {
        let bad = PATH3.replace("1\t1\tval", "1\t7\tval");
        assert!(parse_graph(&bad).unwrap_err().to_string().contains("num_classes"));
        let missing = PATH3.replace("2\t0\ttest\tthird\n", "");
        assert!(parse_graph(&missing).unwrap_err().to_string().contains("split tag"));
    }

    #[test]
    fn ingestion_round_trip() {
        let g = parse_graph(PATH3).unwrap();
        assert_eq!(parse_graph(&g.to_ingestion_string()).unwrap(), g);
    }
}
