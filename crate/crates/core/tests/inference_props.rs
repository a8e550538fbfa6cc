use std::sync::{Mutex, OnceLock};

use gladder_core::fixtures::{homophilous_graph, separable_pair, HomophilyConfig};
use gladder_core::*;

struct Trained {
    graph: TextualGraph,
    cfg: RunConfig,
    cache: EmbeddingCache,
    stack: GLadderStack,
}

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone.num_layers = 4;
    cfg.backbone.model_dim = 16;
    cfg.backbone.heads = 2;
    cfg.backbone.max_len = 16;
    cfg.schedule = ScheduleSpec::Every(1);
    cfg.ladder.hidden = 16;
    cfg.ladder.dropout = 0.1;
    cfg.sampler = SamplerConfig::khop(1, 12);
    cfg.train.epochs = 15;
    cfg.train.accumulation = 8;
    cfg.train.optimizer.learning_rate = 1e-2;
    cfg.set_seed(seed);
    cfg
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let graph = homophilous_graph(&HomophilyConfig {
            nodes: 90,
            seed: 11,
            ..Default::default()
        });
        let cfg = small_config(3);
        let bb = cfg.build_backbone().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = precompute_cache(&bb, &graph, &dir.path().join("emb.glec"), 1).unwrap();
        let mut stack = cfg.build_stack(graph.num_classes()).unwrap();
        train(&graph, &cache, &mut stack, &cfg.sampler, &cfg.train).unwrap();
        Trained { graph, cfg, cache, stack }
    })
}

fn all_nodes(t: &Trained) -> Vec<usize> {
    (0..t.graph.num_nodes()).collect()
}

#[test]
fn patience_beyond_head_count_matches_full_inference() {
    let t = trained();
    let heads = t.stack.exit_heads().len();
    for p in [heads + 1, heads + 5, 999] {
        let cfg = PatienceConfig::new(p).unwrap();
        for node in all_nodes(t) {
            let sub = sample(&t.graph, node, &t.cfg.sampler).unwrap();
            let d = infer_early_exit(&t.graph, &t.cache, &t.stack, &sub, cfg).unwrap();
            let full = infer_full(&t.graph, &t.cache, &t.stack, &sub).unwrap();
            assert_eq!(d.class, full, "node {node} p {p}");
            assert!(!d.early);
            assert_eq!(d.ladders_evaluated, heads);
        }
    }
}

#[test]
fn cost_does_not_grow_as_patience_shrinks() {
    let t = trained();
    let nodes = all_nodes(t);
    let mean = |cfg: PatienceConfig| {
        exit_histogram(&t.graph, &t.cache, &t.stack, &t.cfg.sampler, &nodes, cfg)
            .unwrap()
            .1
            .mean_layers
    };
    let costs = [
        mean(PatienceConfig::disabled()),
        mean(PatienceConfig::new(4).unwrap()),
        mean(PatienceConfig::new(3).unwrap()),
        mean(PatienceConfig::new(2).unwrap()),
    ];
    assert_eq!(costs[0], t.stack.schedule().len() as f64);
    for w in costs.windows(2) {
        assert!(w[1] <= w[0], "{costs:?}");
    }
    assert!(costs[3] < costs[0], "{costs:?}");
}

#[test]
fn disabled_patience_puts_everything_in_the_last_bin() {
    let t = trained();
    let nodes = all_nodes(t);
    let (_, stats) = exit_histogram(&t.graph, &t.cache, &t.stack, &t.cfg.sampler, &nodes, PatienceConfig::disabled()).unwrap();
    let last = stats.histogram.len() - 1;
    assert_eq!(stats.histogram[last], nodes.len());
    assert!(stats.histogram[..last].iter().all(|&c| c == 0));
    assert_eq!(stats.final_head, nodes.len());
    assert_eq!(stats.layers, t.stack.schedule().layers());
}

#[test]
fn single_node_histogram_has_unit_mass() {
    let t = trained();
    let (ds, stats) =
        exit_histogram(&t.graph, &t.cache, &t.stack, &t.cfg.sampler, &[5], PatienceConfig::default()).unwrap();
    assert_eq!(stats.histogram.iter().sum::<usize>(), 1);
    assert_eq!(stats.nodes, 1);
    assert_eq!(ds.len(), 1);
    assert_eq!(stats.histogram[ds[0].exit_index], 1);
}

#[test]
fn histogram_rejects_bad_node_lists() {
    let t = trained();
    let p = PatienceConfig::default();
    assert!(matches!(
        exit_histogram(&t.graph, &t.cache, &t.stack, &t.cfg.sampler, &[], p),
        Err(Error::EmptyNodes)
    ));
    assert!(exit_histogram(&t.graph, &t.cache, &t.stack, &t.cfg.sampler, &[10_000], p)
        .unwrap_err()
        .is_validation());
}

/// Records every layer requested from the wrapped encoder.
struct Recording<'a> {
    inner: &'a dyn LayerwiseEncoder,
    requested: Mutex<Vec<usize>>,
}

impl LayerwiseEncoder for Recording<'_> {
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    fn model_dim(&self) -> usize {
        self.inner.model_dim()
    }

    fn inserted_layers(&self) -> &[usize] {
        self.inner.inserted_layers()
    }

    fn embed(&self, graph: &TextualGraph, layers: &[usize], nodes: &[usize]) -> Result<Vec<NodeEmbeddings>> {
        self.requested.lock().unwrap().extend_from_slice(layers);
        self.inner.embed(graph, layers, nodes)
    }
}

#[test]
fn ladders_past_the_exit_are_never_run() {
    let t = trained();
    let mut early = 0;
    for node in all_nodes(t) {
        let rec = Recording {
            inner: &t.cache,
            requested: Mutex::new(Vec::new()),
        };
        let sub = sample(&t.graph, node, &t.cfg.sampler).unwrap();
        let d = infer_early_exit(&t.graph, &rec, &t.stack, &sub, PatienceConfig::default()).unwrap();
        let requested = rec.requested.into_inner().unwrap();
        assert_eq!(d.ladders_evaluated, d.exit_index + 1);
        assert_eq!(requested, t.stack.schedule().layers()[..=d.exit_index]);
        assert_eq!(d.exit_layer, t.stack.schedule().layers()[d.exit_index]);
        if d.early {
            early += 1;
        }
    }
    assert!(early > 0);
}

#[test]
fn live_backbone_skips_layers_after_the_exit() {
    let t = trained();
    let bb = t.cfg.build_backbone().unwrap();
    let sub = sample(&t.graph, 0, &t.cfg.sampler).unwrap();
    let before = bb.forward_calls();
    let d = infer_early_exit(&t.graph, &bb, &t.stack, &sub, PatienceConfig::default()).unwrap();
    assert_eq!(bb.forward_calls() - before, d.ladders_evaluated * sub.len());
    let via_cache = infer_early_exit(&t.graph, &t.cache, &t.stack, &sub, PatienceConfig::default()).unwrap();
    assert_eq!(d, via_cache);
}

#[test]
fn constant_heads_predict_class_zero() {
    let t = trained();
    let mut stack = t.stack.clone();
    let heads: Vec<_> = stack.exit_heads().iter().copied().chain([stack.final_head()]).collect();
    for h in heads {
        stack.params_mut().value_mut(h.weight).fill(0.0);
        stack.params_mut().value_mut(h.bias).fill(0.25);
    }
    for node in [0, 7, 42] {
        let sub = sample(&t.graph, node, &t.cfg.sampler).unwrap();
        let d = infer_early_exit(&t.graph, &t.cache, &stack, &sub, PatienceConfig::default()).unwrap();
        assert_eq!((d.class, d.exit_index, d.early), (0, 1, true));
        assert_eq!(infer_full(&t.graph, &t.cache, &stack, &sub).unwrap(), 0);
    }
}

#[test]
fn separable_pair_exits_early_and_matches_evaluate() {
    let g = separable_pair();
    let mut cfg = small_config(1);
    cfg.ladder.dropout = 0.0;
    cfg.train.epochs = 80;
    cfg.train.accumulation = 1;
    let bb = cfg.build_backbone().unwrap();
    let mut stack = cfg.build_stack(2).unwrap();
    train(&g, &bb, &mut stack, &cfg.sampler, &cfg.train).unwrap();
    let (ds, stats) = exit_histogram(&g, &bb, &stack, &cfg.sampler, &[0, 1], PatienceConfig::default()).unwrap();
    assert!(stats.mean_layers < stack.schedule().len() as f64, "{stats:?}");
    assert_eq!(evaluate(&g, &bb, &stack, &cfg.sampler, Split::Train).unwrap(), 1.0);
    for (node, d) in ds.iter().enumerate() {
        let sub = sample(&g, node, &cfg.sampler).unwrap();
        assert_eq!(infer_full(&g, &bb, &stack, &sub).unwrap(), g.label(node));
        assert_eq!(d.class, g.label(node));
    }
}
