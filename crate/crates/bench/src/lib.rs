//! Shared setup for the criterion benches in `benches/`.

use gladder_core::fixtures::{homophilous_graph, homophily_run_config, HomophilyConfig};
use gladder_core::*;

pub struct Fixture {
    pub graph: TextualGraph,
    pub cfg: RunConfig,
    pub backbone: ToyTransformer,
    pub cache: EmbeddingCache,
    pub stack: GLadderStack,
}

/// The 300-node homophilous graph with a 4-layer, 64-wide backbone and a
/// stack trained for `epochs` epochs from the cache.
pub fn fixture(epochs: usize) -> Fixture {
    let graph = homophilous_graph(&HomophilyConfig::default());
    let mut cfg = homophily_run_config(0);
    cfg.train.epochs = epochs;
    let backbone = cfg.build_backbone().expect("fixture config is valid");
    let path = std::env::temp_dir().join(format!("gladder-bench-{}.glec", std::process::id()));
    let cache = precompute_cache(&backbone, &graph, &path, 1).expect("precompute");
    let _ = std::fs::remove_file(&path);
    let mut stack = cfg.build_stack(graph.num_classes()).expect("stack");
    if epochs > 0 {
        train(&graph, &cache, &mut stack, &cfg.sampler, &cfg.train).expect("training");
    }
    Fixture {
        graph,
        cfg,
        backbone,
        cache,
        stack,
    }
}
