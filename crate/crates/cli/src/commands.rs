use std::path::{Path, PathBuf};
use std::time::Instant;

use gladder_core::training::train_with;
use gladder_core::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::manifest::{self, sidecar, Artifact, RunManifest};
use crate::{AblateArg, BenchArgs, Common, EvalArgs, InferArgs, PrecomputeArgs, TrainArgs, VerifyArgs, CACHE_DIR_ENV};

const DEFAULT_CACHE_DIR: &str = ".gladder-cache";

enum Source {
    Live(ToyTransformer),
    Cached(EmbeddingCache),
}

impl Source {
    fn encoder(&self) -> &dyn LayerwiseEncoder {
        match self {
            Source::Live(b) => b,
            Source::Cached(c) => c,
        }
    }
}

fn load_setup(common: &Common, ablate: Option<AblateArg>) -> Result<(RunConfig, TextualGraph)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    match ablate {
        Some(AblateArg::NoStruct) => Ablation::NoStruct.apply(&mut cfg),
        Some(AblateArg::ConstLambda) => Ablation::ConstLambda.apply(&mut cfg),
        None => {}
    }
    cfg.validate()?;
    if common.threads == 0 {
        return Err(Error::Validation("--threads must be at least 1".into()));
    }
    let graph = load_graph(&common.graph)?;
    Ok((cfg, graph))
}

/// Cache file for this graph and backbone under `GLADDER_CACHE_DIR`
/// (default `.gladder-cache`). The name hashes the graph bytes and every
/// setting that changes the embeddings.
fn default_cache_path(graph_path: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR));
    let mut h = Sha256::new();
    h.update(manifest::read_file(graph_path)?);
    for line in cfg
        .canonical()
        .lines()
        .filter(|l| l.starts_with("backbone.") || l.starts_with("ladder.schedule"))
    {
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    let stem = graph_path.file_stem().and_then(|s| s.to_str()).unwrap_or("graph");
    Ok(dir.join(format!("{stem}-{}.glec", &hex::encode(h.finalize())[..16])))
}

fn resolve_cache(arg: &Option<Option<PathBuf>>, graph_path: &Path, cfg: &RunConfig) -> Result<Option<PathBuf>> {
    match arg {
        None => Ok(None),
        Some(None) => default_cache_path(graph_path, cfg).map(Some),
        Some(Some(p)) => Ok(Some(p.clone())),
    }
}

fn open_cache(path: &Path, cfg: &RunConfig, graph: &TextualGraph) -> Result<EmbeddingCache> {
    let cache = EmbeddingCache::read(path)?;
    let schedule = cfg.insertion_schedule()?;
    if cache.layers() != schedule.layers() || cache.dim() != cfg.backbone.model_dim {
        return Err(Error::ScheduleMismatch(format!(
            "{} holds layers {:?} at width {}, config schedules {:?} at width {}",
            path.display(),
            cache.layers(),
            cache.dim(),
            schedule.layers(),
            cfg.backbone.model_dim
        )));
    }
    if cache.num_nodes() != graph.num_nodes() {
        return Err(Error::Validation(format!(
            "{} holds {} nodes but the graph has {}",
            path.display(),
            cache.num_nodes(),
            graph.num_nodes()
        )));
    }
    Ok(cache)
}

fn open_source(cache: Option<&Path>, cfg: &RunConfig, graph: &TextualGraph) -> Result<Source> {
    match cache {
        Some(p) => open_cache(p, cfg, graph).map(Source::Cached),
        None => cfg.build_backbone().map(Source::Live),
    }
}

/// Restores a checkpoint. Its stored config is used unless `--config` is given.
fn load_model(common: &Common, checkpoint: &Path) -> Result<(RunConfig, TextualGraph, GLadderStack)> {
    let ck = Checkpoint::read(checkpoint)?;
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse(&ck.config_text)?,
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    let graph = load_graph(&common.graph)?;
    let stack = ck.restore(cfg.ladder.clone(), &cfg.signature()?)?;
    if stack.num_classes() != graph.num_classes() {
        return Err(Error::Validation(format!(
            "checkpoint predicts {} classes, graph has {}",
            stack.num_classes(),
            graph.num_classes()
        )));
    }
    Ok((cfg, graph, stack))
}

fn manifest_for(command: &str, cfg: &RunConfig, graph: &Path, started: u128) -> Result<RunManifest> {
    Ok(RunManifest {
        command: command.into(),
        config_hash: cfg.hash_hex(),
        seed: cfg.train.seed,
        graph: Artifact::of(graph)?,
        cache: None,
        checkpoint: None,
        outputs: Vec::new(),
        started_at_ms: started,
        finished_at_ms: 0,
    })
}

fn finish(mut m: RunManifest, path: &Path) -> Result<()> {
    m.finished_at_ms = manifest::now_ms();
    m.write(path)
}

pub fn precompute(a: PrecomputeArgs) -> Result<()> {
    let started = manifest::now_ms();
    let (cfg, graph) = load_setup(&a.common, None)?;
    let out = match a.out {
        Some(p) => p,
        None => default_cache_path(&a.common.graph, &cfg)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let backbone = cfg.build_backbone()?;
    let cache = precompute_cache(&backbone, &graph, &out, a.common.threads)?;

    let mut m = manifest_for("precompute", &cfg, &a.common.graph, started)?;
    m.cache = Some(Artifact::of(&out)?);
    finish(m, &sidecar(&out, "manifest.json"))?;
    println!(
        "{}: {} nodes, layers {:?}, width {}",
        out.display(),
        cache.num_nodes(),
        cache.layers(),
        cache.dim()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let started = manifest::now_ms();
    let (cfg, graph) = load_setup(&a.common, a.ablate)?;
    let cache_path = resolve_cache(&a.cache, &a.common.graph, &cfg)?;
    let source = open_source(cache_path.as_deref(), &cfg, &graph)?;
    let mut stack = cfg.build_stack(graph.num_classes())?;

    let mut log = String::new();
    let outcome = train_with(&graph, source.encoder(), &mut stack, &cfg.sampler, &cfg.train, |r| {
        log.push_str(&serde_json::to_string(r).expect("report serializes"));
        log.push('\n');
    })?;
    let metrics = a.metrics.unwrap_or_else(|| sidecar(&a.checkpoint, "metrics.jsonl"));
    manifest::write_file(&metrics, log.as_bytes())?;
    let ck = Checkpoint::from_stack(&stack, cfg.signature()?, cfg.canonical());
    manifest::write_file(&a.checkpoint, &ck.to_bytes())?;

    let best = &outcome.reports[outcome.best_epoch - 1];
    println!(
        "best epoch {} of {}: val_accuracy {:.4} test_accuracy {:.4}",
        outcome.best_epoch,
        outcome.reports.len(),
        best.val_accuracy,
        best.test_accuracy
    );

    let mut m = manifest_for("train", &cfg, &a.common.graph, started)?;
    m.cache = cache_path.as_deref().map(Artifact::of).transpose()?;
    m.checkpoint = Some(Artifact::of(&a.checkpoint)?);
    m.outputs.push(Artifact::of(&metrics)?);
    finish(m, &sidecar(&a.checkpoint, "manifest.json"))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, graph, stack) = load_model(&a.common, &a.checkpoint)?;
    let split: Split = a.split.parse().map_err(Error::Validation)?;
    let cache_path = resolve_cache(&a.cache, &a.common.graph, &cfg)?;
    let source = open_source(cache_path.as_deref(), &cfg, &graph)?;
    let accuracy = evaluate(&graph, source.encoder(), &stack, &cfg.sampler, split)?;
    let report = serde_json::json!({
        "split": split.to_string(),
        "nodes": graph.split_nodes(split).len(),
        "accuracy": accuracy,
    });
    println!("{report}");
    Ok(())
}

fn parse_nodes(spec: &str, graph: &TextualGraph) -> Result<Vec<usize>> {
    let nodes = match spec {
        "all" => (0..graph.num_nodes()).collect(),
        "train" | "val" | "test" => graph.split_nodes(spec.parse().map_err(Error::Validation)?),
        list => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Validation(format!("bad node id `{s}` in --nodes: {e}")))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    if let Some(&bad) = nodes.iter().find(|&&n| n >= graph.num_nodes()) {
        return Err(Error::Validation(format!(
            "node {bad} out of range for a graph with {} nodes",
            graph.num_nodes()
        )));
    }
    Ok(nodes)
}

pub fn infer(a: InferArgs) -> Result<()> {
    let started = manifest::now_ms();
    let (cfg, graph, stack) = load_model(&a.common, &a.checkpoint)?;
    let cache_path = resolve_cache(&a.cache, &a.common.graph, &cfg)?;
    let source = open_source(cache_path.as_deref(), &cfg, &graph)?;
    let nodes = parse_nodes(&a.nodes, &graph)?;
    let patience = PatienceConfig::new(a.patience.unwrap_or(cfg.patience))?;
    let patience = if a.early_exit { patience } else { PatienceConfig::disabled() };

    let (decisions, stats) = exit_histogram(&graph, source.encoder(), &stack, &cfg.sampler, &nodes, patience)?;
    let mut tsv = String::new();
    for (node, d) in nodes.iter().zip(&decisions) {
        tsv.push_str(&format!("{node}\t{}\t{}\n", d.class, d.exit_layer));
    }
    manifest::write_file(&a.out, tsv.as_bytes())?;
    let stats_path = a.stats.unwrap_or_else(|| sidecar(&a.out, "stats.json"));
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    manifest::write_file(&stats_path, format!("{json}\n").as_bytes())?;
    println!(
        "{} nodes: accuracy {:.4}, mean ladders {:.3} of {}",
        stats.nodes,
        stats.accuracy,
        stats.mean_layers,
        stack.schedule().len()
    );

    let mut m = manifest_for("infer", &cfg, &a.common.graph, started)?;
    m.cache = cache_path.as_deref().map(Artifact::of).transpose()?;
    m.checkpoint = Some(Artifact::of(&a.checkpoint)?);
    m.outputs.push(Artifact::of(&a.out)?);
    m.outputs.push(Artifact::of(&stats_path)?);
    finish(m, &sidecar(&a.out, "manifest.json"))
}

#[derive(Debug, Serialize)]
struct InferenceTiming {
    full_seconds: f64,
    early_exit_seconds: f64,
    full_accuracy: f64,
    early_exit_accuracy: f64,
    mean_layers: f64,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    graph: PathBuf,
    nodes: usize,
    config_hash: String,
    backbone_layers: usize,
    backbone_dim: usize,
    schedule: Vec<usize>,
    precompute_seconds: f64,
    timed_epochs: usize,
    epoch_seconds_uncached: f64,
    epoch_seconds_cached: f64,
    trainable_parameters: usize,
    trainable_parameters_closed_form: usize,
    patience: usize,
    inference_live: InferenceTiming,
    inference_cached: InferenceTiming,
}

fn time_inference(
    graph: &TextualGraph,
    encoder: &dyn LayerwiseEncoder,
    stack: &GLadderStack,
    sampler: &SamplerConfig,
    nodes: &[usize],
    patience: PatienceConfig,
) -> Result<InferenceTiming> {
    let start = Instant::now();
    let mut correct = 0usize;
    for &n in nodes {
        let sub = sample(graph, n, sampler)?;
        if infer_full(graph, encoder, stack, &sub)? == graph.label(n) {
            correct += 1;
        }
    }
    let full_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let (_, stats) = exit_histogram(graph, encoder, stack, sampler, nodes, patience)?;
    Ok(InferenceTiming {
        full_seconds,
        early_exit_seconds: start.elapsed().as_secs_f64(),
        full_accuracy: correct as f64 / nodes.len() as f64,
        early_exit_accuracy: stats.accuracy,
        mean_layers: stats.mean_layers,
    })
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let (cfg, graph) = load_setup(&a.common, None)?;
    if a.epochs == 0 {
        return Err(Error::Validation("--epochs must be at least 1".into()));
    }
    let backbone = cfg.build_backbone()?;
    let cache_path = default_cache_path(&a.common.graph, &cfg)?;
    if let Some(dir) = cache_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let start = Instant::now();
    let cache = precompute_cache(&backbone, &graph, &cache_path, a.common.threads)?;
    let precompute_seconds = start.elapsed().as_secs_f64();

    let mut timed = cfg.train.clone();
    timed.epochs = a.epochs;
    timed.early_stop_patience = None;
    let time_epochs = |encoder: &dyn LayerwiseEncoder| -> Result<f64> {
        let mut stack = cfg.build_stack(graph.num_classes())?;
        let start = Instant::now();
        gladder_core::train(&graph, encoder, &mut stack, &cfg.sampler, &timed)?;
        Ok(start.elapsed().as_secs_f64() / a.epochs as f64)
    };
    let epoch_seconds_uncached = time_epochs(&backbone)?;
    let epoch_seconds_cached = time_epochs(&cache)?;

    let stack = match &a.checkpoint {
        Some(p) => Checkpoint::read(p)?.restore(cfg.ladder.clone(), &cfg.signature()?)?,
        None => {
            let mut stack = cfg.build_stack(graph.num_classes())?;
            gladder_core::train(&graph, &cache, &mut stack, &cfg.sampler, &cfg.train)?;
            stack
        }
    };
    let patience = PatienceConfig::new(a.patience.unwrap_or(cfg.patience))?;
    let nodes: Vec<usize> = (0..graph.num_nodes()).collect();

    let report = BenchReport {
        graph: a.common.graph.clone(),
        nodes: graph.num_nodes(),
        config_hash: cfg.hash_hex(),
        backbone_layers: cfg.backbone.num_layers,
        backbone_dim: cfg.backbone.model_dim,
        schedule: stack.schedule().layers().to_vec(),
        precompute_seconds,
        timed_epochs: a.epochs,
        epoch_seconds_uncached,
        epoch_seconds_cached,
        trainable_parameters: stack.trainable_parameter_count(),
        trainable_parameters_closed_form: cfg.ladder.trainable_parameter_count(
            cfg.backbone.model_dim,
            graph.num_classes(),
            stack.schedule().len(),
        ),
        patience: patience.patience,
        inference_live: time_inference(&graph, &backbone, &stack, &cfg.sampler, &nodes, patience)?,
        inference_cached: time_inference(&graph, &cache, &stack, &cfg.sampler, &nodes, patience)?,
    };
    let json = format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes"));
    match &a.out {
        Some(p) => manifest::write_file(p, json.as_bytes()),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let m = RunManifest::read(&a.manifest)?;
    m.verify()?;
    let files = 1 + m.cache.iter().count() + m.checkpoint.iter().count() + m.outputs.len();
    println!("{}: {} files match", a.manifest.display(), files);
    Ok(())
}
