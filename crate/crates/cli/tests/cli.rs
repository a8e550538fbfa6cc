use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gladder_core::fixtures::{homophilous_graph, HomophilyConfig};
use gladder_core::{EmbeddingCache, GateMode, GnnKind, Norm, RunConfig, Split, TextualGraph};
use tempfile::TempDir;

const CONFIG: &str = "\
backbone.layers = 4
backbone.dim = 16
backbone.heads = 2
backbone.max_len = 16
ladder.schedule = every:1
ladder.hidden = 8
sampler.kind = khop
sampler.hops = 1
sampler.max_nodes = 8
train.epochs = 3
train.accumulation = 4
";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("run.cfg"), CONFIG).unwrap();
        let graph = homophilous_graph(&HomophilyConfig {
            nodes: 40,
            seed: 5,
            ..Default::default()
        });
        ws.write_graph("graph.tsv", &graph);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write_graph(&self, name: &str, g: &TextualGraph) {
        g.write(&self.path(name)).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_gladder"))
            .args(args)
            .current_dir(self.dir.path())
            .env("GLADDER_CACHE_DIR", self.path("cache"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn train(&self, checkpoint: &str, extra: &[&str]) -> String {
        let mut args = vec!["train", "--graph", "graph.tsv", "--config", "run.cfg", "--checkpoint", checkpoint];
        args.extend_from_slice(extra);
        self.ok(&args)
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap()
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn sha(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn precompute_three_node_graph() {
    let ws = Workspace::new();
    let g = TextualGraph::new(
        2,
        vec!["red apple".into(), "blue sky".into(), "red cherry".into()],
        vec![0, 1, 0],
        vec![Split::Train, Split::Val, Split::Test],
        vec![(0, 2), (0, 1)],
    )
    .unwrap();
    ws.write_graph("three.tsv", &g);
    ws.ok(&["precompute", "--graph", "three.tsv", "--config", "run.cfg", "--out", "three.glec"]);
    let bytes = ws.read("three.glec");
    assert_eq!(&bytes[..4], b"GLEC");
    let cache = EmbeddingCache::from_bytes(&bytes).unwrap();
    assert_eq!(cache.num_nodes(), 3);
    assert_eq!(cache.layers(), &[0, 1, 2, 3, 4]);
    assert!(ws.path("three.glec.manifest.json").exists());
}

#[test]
fn missing_graph_names_the_path() {
    let ws = Workspace::new();
    let out = ws.run(&["precompute", "--graph", "no-such-graph.tsv", "--out", "x.glec"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no-such-graph.tsv"), "{}", stderr(&out));
}

#[test]
fn precompute_rerun_is_byte_identical() {
    let ws = Workspace::new();
    ws.ok(&["precompute", "--graph", "graph.tsv", "--config", "run.cfg", "--out", "a.glec"]);
    ws.ok(&["precompute", "--graph", "graph.tsv", "--config", "run.cfg", "--out", "b.glec", "--threads", "3"]);
    assert_eq!(sha(&ws.path("a.glec")), sha(&ws.path("b.glec")));
}

#[test]
fn default_cache_location_is_shared_by_precompute_and_train() {
    let ws = Workspace::new();
    let printed = ws.ok(&["precompute", "--graph", "graph.tsv", "--config", "run.cfg"]);
    assert!(printed.starts_with(ws.path("cache").to_str().unwrap()), "{printed}");
    ws.train("ck.glck", &["--cache"]);
    let manifest: serde_json::Value = serde_json::from_slice(&ws.read("ck.glck.manifest.json")).unwrap();
    let cache = manifest["cache"]["path"].as_str().unwrap();
    assert!(Path::new(cache).starts_with(ws.path("cache")), "{cache}");
}

#[test]
fn metrics_are_byte_identical_across_reruns() {
    let ws = Workspace::new();
    ws.train("a.glck", &["--seed", "9"]);
    ws.train("b.glck", &["--seed", "9"]);
    let a = ws.read("a.glck.metrics.jsonl");
    assert_eq!(a, ws.read("b.glck.metrics.jsonl"));
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 3);
    assert_eq!(ws.read("a.glck"), ws.read("b.glck"));
}

#[test]
fn cached_and_live_training_write_the_same_metrics() {
    let ws = Workspace::new();
    ws.ok(&["precompute", "--graph", "graph.tsv", "--config", "run.cfg", "--out", "e.glec"]);
    ws.train("live.glck", &[]);
    ws.train("cached.glck", &["--cache", "e.glec"]);
    let parse = |name: &str| -> Vec<serde_json::Value> {
        String::from_utf8(ws.read(name))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let (live, cached) = (parse("live.glck.metrics.jsonl"), parse("cached.glck.metrics.jsonl"));
    for (l, c) in live.iter().zip(&cached) {
        let (a, b) = (l["train_loss"].as_f64().unwrap(), c["train_loss"].as_f64().unwrap());
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        assert_eq!(l["val_accuracy"], c["val_accuracy"]);
    }
}

#[test]
fn train_reports_final_accuracies() {
    let ws = Workspace::new();
    let out = ws.train("ck.glck", &[]);
    assert!(out.contains("val_accuracy") && out.contains("test_accuracy"), "{out}");
}

#[test]
fn wrong_cache_schedule_is_a_validation_error() {
    let ws = Workspace::new();
    std::fs::write(ws.path("sparse.cfg"), CONFIG.replace("every:1", "every:2")).unwrap();
    ws.ok(&["precompute", "--graph", "graph.tsv", "--config", "sparse.cfg", "--out", "sparse.glec"]);
    let out = ws.run(&[
        "train", "--graph", "graph.tsv", "--config", "run.cfg", "--cache", "sparse.glec", "--checkpoint", "ck.glck",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("schedule mismatch"), "{}", stderr(&out));
    assert!(!ws.path("ck.glck").exists());
}

#[test]
fn high_patience_matches_plain_inference() {
    let ws = Workspace::new();
    ws.train("ck.glck", &[]);
    let base = ["infer", "--graph", "graph.tsv", "--checkpoint", "ck.glck"];
    let with = |extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        ws.ok(&args);
    };
    with(&["--out", "plain.tsv"]);
    with(&["--early-exit", "--patience", "999", "--out", "p999.tsv"]);
    assert_eq!(ws.read("plain.tsv"), ws.read("p999.tsv"));
    assert_eq!(ws.read("plain.tsv.stats.json"), ws.read("p999.tsv.stats.json"));
}

#[test]
fn default_patience_is_two() {
    let ws = Workspace::new();
    ws.train("ck.glck", &[]);
    let base = ["infer", "--graph", "graph.tsv", "--checkpoint", "ck.glck", "--early-exit"];
    ws.ok(&[&base[..], &["--out", "default.tsv"]].concat());
    ws.ok(&[&base[..], &["--patience", "2", "--out", "two.tsv"]].concat());
    assert_eq!(ws.read("default.tsv"), ws.read("two.tsv"));
}

#[test]
fn one_prediction_line_per_requested_node() {
    let ws = Workspace::new();
    ws.train("ck.glck", &[]);
    for (nodes, expected) in [("all", 40), ("3,7,7,11", 4), ("test", 8)] {
        ws.ok(&[
            "infer", "--graph", "graph.tsv", "--checkpoint", "ck.glck", "--early-exit", "--nodes", nodes, "--out",
            "pred.tsv",
        ]);
        let text = String::from_utf8(ws.read("pred.tsv")).unwrap();
        assert_eq!(text.lines().count(), expected, "{nodes}");
        for line in text.lines() {
            assert_eq!(line.split('\t').count(), 3, "{line}");
        }
        let stats: serde_json::Value = serde_json::from_slice(&ws.read("pred.tsv.stats.json")).unwrap();
        assert_eq!(stats["nodes"], expected);
    }
}

#[test]
fn out_of_range_node_is_a_validation_error() {
    let ws = Workspace::new();
    ws.train("ck.glck", &[]);
    let out = ws.run(&["infer", "--graph", "graph.tsv", "--checkpoint", "ck.glck", "--nodes", "400", "--out", "p.tsv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_for_another_backbone_is_rejected() {
    let ws = Workspace::new();
    ws.train("ck.glck", &[]);
    std::fs::write(ws.path("other.cfg"), CONFIG.replace("backbone.dim = 16", "backbone.dim = 8")).unwrap();
    let out = ws.run(&[
        "eval", "--graph", "graph.tsv", "--config", "other.cfg", "--checkpoint", "ck.glck",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn eval_reports_split_accuracy() {
    let ws = Workspace::new();
    ws.train("ck.glck", &[]);
    let out = ws.ok(&["eval", "--graph", "graph.tsv", "--checkpoint", "ck.glck", "--split", "val"]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["split"], "val");
    assert_eq!(v["nodes"], 8);
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let again = ws.ok(&["eval", "--graph", "graph.tsv", "--checkpoint", "ck.glck", "--split", "val"]);
    assert_eq!(out, again);
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["train"]).status.code(), Some(1));
    assert_eq!(ws.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ws.run(&["train", "--graph", "g", "--checkpoint", "c", "--ablate", "nope"]).status.code(), Some(1));
    let help = ws.run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("precompute"));
}

#[test]
fn bad_config_value_exits_two() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.cfg"), "ladder.dropout = 1.5\n").unwrap();
    let out = ws.run(&["train", "--graph", "graph.tsv", "--config", "bad.cfg", "--checkpoint", "ck.glck"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn ablation_flags_land_in_the_checkpoint_config() {
    let ws = Workspace::new();
    ws.train("ns.glck", &["--ablate", "no-struct"]);
    ws.train("cl.glck", &["--ablate", "const-lambda"]);
    let config_of = |name: &str| {
        let ck = gladder_core::Checkpoint::read(&ws.path(name)).unwrap();
        RunConfig::parse(&ck.config_text).unwrap()
    };
    let ns = config_of("ns.glck");
    assert!(!ns.ladder.message_passing);
    let cl = config_of("cl.glck");
    assert_eq!(cl.ladder.gate, GateMode::Constant);
    assert!(cl.ladder.message_passing);
}

#[test]
fn bench_parameter_count_matches_closed_form() {
    let ws = Workspace::new();
    let out = ws.ok(&["bench", "--graph", "graph.tsv", "--config", "run.cfg", "--out", "bench.json"]);
    assert!(out.is_empty());
    let r: serde_json::Value = serde_json::from_slice(&ws.read("bench.json")).unwrap();
    let cfg = RunConfig::parse(CONFIG).unwrap();
    let (d, k, c, ladders) = (16usize, cfg.ladder.hidden, 3usize, 5usize);
    // projector + GNN + gate per ladder, one exit head per ladder, final head
    assert_eq!((cfg.ladder.gnn, cfg.ladder.norm, cfg.ladder.gnn_layers), (GnnKind::Sage, Norm::Identity, 1));
    let per_ladder = (d * k + k) + (2 * k * k + k) + 1 + (k * c + c);
    let expected = ladders * per_ladder + (k * c + c);
    assert_eq!(r["trainable_parameters_closed_form"], expected);
    assert_eq!(r["trainable_parameters"], expected);
    for key in ["epoch_seconds_uncached", "epoch_seconds_cached", "precompute_seconds"] {
        assert!(r[key].as_f64().unwrap() > 0.0, "{key}");
    }
    for path in ["inference_live", "inference_cached"] {
        let m = r[path]["mean_layers"].as_f64().unwrap();
        assert!(m > 0.0 && m <= ladders as f64);
    }
}

#[test]
fn manifests_verify_and_detect_tampering() {
    let ws = Workspace::new();
    ws.train("ck.glck", &[]);
    ws.ok(&["infer", "--graph", "graph.tsv", "--checkpoint", "ck.glck", "--out", "pred.tsv"]);
    for m in ["ck.glck.manifest.json", "pred.tsv.manifest.json"] {
        ws.ok(&["verify", m]);
    }
    let manifest: serde_json::Value = serde_json::from_slice(&ws.read("ck.glck.manifest.json")).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["checkpoint"]["sha256"], sha(&ws.path("ck.glck")));
    std::fs::write(ws.path("pred.tsv"), "tampered\n").unwrap();
    let out = ws.run(&["verify", "pred.tsv.manifest.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("pred.tsv"));
}
