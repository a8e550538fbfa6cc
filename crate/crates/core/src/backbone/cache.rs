//! On-disk store of pooled node embeddings.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "GLEC"                       magic
//! u16                          version (1)
//! u64                          N, node count
//! u32                          D, embedding width
//! u32                          number of inserted layers
//! u32 * count                  inserted layer indices, ascending
//! u8                           dtype tag (0 = f32)
//! f32 * N * D, once per layer  row-major block per inserted layer, node-id order
//! ```

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::TextualGraph;

use super::{LayerwiseEncoder, NodeEmbeddings};

pub const CACHE_MAGIC: &[u8; 4] = b"GLEC";
pub const CACHE_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Nodes embedded per backbone batch while precomputing.
const PRECOMPUTE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    num_nodes: usize,
    dim: usize,
    layers: Vec<usize>,
    /// One `N x D` block per entry of `layers`.
    blocks: Vec<Array2<f32>>,
}

impl EmbeddingCache {
    pub fn from_blocks(layers: Vec<usize>, blocks: Vec<Array2<f32>>) -> Result<Self> {
        if layers.len() != blocks.len() || layers.is_empty() {
            return Err(Error::CacheCorrupt(format!(
                "{} layers but {} blocks",
                layers.len(),
                blocks.len()
            )));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::CacheCorrupt(format!("layers {layers:?} are not ascending")));
        }
        let (num_nodes, dim) = blocks[0].dim();
        if blocks.iter().any(|b| b.dim() != (num_nodes, dim)) {
            return Err(Error::CacheCorrupt("blocks disagree on shape".into()));
        }
        if blocks.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(Error::CacheCorrupt("non-finite embedding value".into()));
        }
        Ok(Self {
            num_nodes,
            dim,
            layers,
            blocks,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Rows for `nodes` at `layer`, in the requested order.
    pub fn lookup(&self, layer: usize, nodes: &[usize]) -> Result<NodeEmbeddings> {
        let idx = self.layers.binary_search(&layer).map_err(|_| Error::NotInserted(layer))?;
        let block = &self.blocks[idx];
        let mut values = Array2::zeros((nodes.len(), self.dim));
        for (row, &node) in nodes.iter().enumerate() {
            if node >= self.num_nodes {
                return Err(Error::CacheCorrupt(format!(
                    "no entry for node {node} (cache holds {} nodes)",
                    self.num_nodes
                )));
            }
            values.row_mut(row).assign(&block.row(node));
        }
        Ok(NodeEmbeddings {
            layer,
            nodes: nodes.to_vec(),
            values,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.blocks.len() * self.num_nodes * self.dim * 4);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_nodes as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for &l in &self.layers {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for block in &self.blocks {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CACHE_MAGIC {
            return Err(Error::CacheCorrupt("bad magic, not a GLEC file".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != CACHE_VERSION {
            return Err(Error::CacheCorrupt(format!("unsupported version {version}")));
        }
        let num_nodes = u64::from_le_bytes(r.array()?) as usize;
        let dim = u32::from_le_bytes(r.array()?) as usize;
        let count = u32::from_le_bytes(r.array()?) as usize;
        let layers = (0..count)
            .map(|_| Ok(u32::from_le_bytes(r.array()?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::CacheCorrupt(format!("unsupported dtype tag {dtype}")));
        }
        let expected = count
            .checked_mul(num_nodes)
            .and_then(|v| v.checked_mul(dim))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::CacheCorrupt("header sizes overflow".into()))?;
        let payload = &bytes[r.pos..];
        if payload.len() != expected {
            return Err(Error::CacheCorrupt(format!(
                "payload holds {} bytes, header promises {expected}",
                payload.len()
            )));
        }
        let block_len = num_nodes * dim * 4;
        let blocks = (0..count)
            .map(|i| {
                let raw = &payload[i * block_len..(i + 1) * block_len];
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Array2::from_shape_vec((num_nodes, dim), values).expect("length checked")
            })
            .collect();
        Self::from_blocks(layers, blocks)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::CacheCorrupt("truncated header".into()));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

impl LayerwiseEncoder for EmbeddingCache {
    fn num_layers(&self) -> usize {
        *self.layers.last().unwrap()
    }

    fn model_dim(&self) -> usize {
        self.dim
    }

    fn inserted_layers(&self) -> &[usize] {
        &self.layers
    }

    fn embed(&self, graph: &TextualGraph, layers: &[usize], nodes: &[usize]) -> Result<Vec<NodeEmbeddings>> {
        if graph.num_nodes() != self.num_nodes {
            return Err(Error::Validation(format!(
                "cache holds {} nodes but the graph has {}",
                self.num_nodes,
                graph.num_nodes()
            )));
        }
        layers.iter().map(|&l| self.lookup(l, nodes)).collect()
    }
}

/// Embeds every node of `graph` at every inserted layer of `encoder` and
/// writes the cache to `out`. Nodes may be split across `threads` workers;
/// the file is always assembled in node-id order.
pub fn precompute_cache(
    encoder: &dyn LayerwiseEncoder,
    graph: &TextualGraph,
    out: &Path,
    threads: usize,
) -> Result<EmbeddingCache> {
    let layers = encoder.inserted_layers().to_vec();
    let n = graph.num_nodes();
    let d = encoder.model_dim();
    let chunks: Vec<Vec<usize>> = (0..n)
        .step_by(PRECOMPUTE_CHUNK)
        .map(|start| (start..(start + PRECOMPUTE_CHUNK).min(n)).collect())
        .collect();

    let embed_chunks = |group: &[Vec<usize>]| -> Result<Vec<Vec<NodeEmbeddings>>> {
        group.iter().map(|nodes| encoder.embed(graph, &layers, nodes)).collect()
    };
    let results: Vec<Vec<NodeEmbeddings>> = if threads <= 1 || chunks.len() <= 1 {
        embed_chunks(&chunks)?
    } else {
        let per_worker = chunks.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .chunks(per_worker)
                .map(|group| scope.spawn(move || embed_chunks(group)))
                .collect();
            let mut all = Vec::with_capacity(chunks.len());
            for h in handles {
                all.extend(h.join().expect("precompute worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };

    let mut blocks: Vec<Array2<f32>> = layers.iter().map(|_| Array2::zeros((n, d))).collect();
    for (chunk, per_layer) in chunks.iter().zip(&results) {
        for (block, emb) in blocks.iter_mut().zip(per_layer) {
            if emb.values.ncols() != d {
                return Err(Error::Shape(format!(
                    "encoder produced width {} but declares {d}",
                    emb.values.ncols()
                )));
            }
            for (row, &node) in chunk.iter().enumerate() {
                block.row_mut(node).assign(&emb.values.row(row));
            }
        }
    }
    let cache = EmbeddingCache::from_blocks(layers, blocks)?;
    cache.write(out)?;
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_layer() -> EmbeddingCache {
        EmbeddingCache::from_blocks(
            vec![0, 2],
            vec![array![[0.0f32, 1.0], [2.0, 3.0], [4.0, 5.0]], array![[6.0f32, 7.0], [8.0, 9.0], [10.0, 11.0]]],
        )
        .unwrap()
    }

    #[test]
    fn lookup_keeps_requested_order() {
        let c = two_layer();
        let z = c.lookup(2, &[2, 0]).unwrap();
        assert_eq!(z.values, array![[10.0f32, 11.0], [6.0, 7.0]]);
        assert_eq!(z.nodes, vec![2, 0]);
    }

    #[test]
    fn lookup_errors() {
        let c = two_layer();
        assert!(matches!(c.lookup(1, &[0]), Err(Error::NotInserted(1))));
        assert!(matches!(c.lookup(0, &[3]), Err(Error::CacheCorrupt(_))));
    }

    #[test]
    fn bytes_round_trip_and_header() {
        let c = two_layer();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"GLEC");
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 3);
        assert_eq!(EmbeddingCache::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn truncated_files_are_rejected() {
        let bytes = two_layer().to_bytes();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(EmbeddingCache::from_bytes(&bytes[..cut]), Err(Error::CacheCorrupt(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EmbeddingCache::from_bytes(&bad).is_err());
    }
}
