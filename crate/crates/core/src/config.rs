//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Keys are grouped by prefix:
//! `backbone.*`, `ladder.*`, `sampler.*`, `train.*`, `infer.*`, plus the
//! top-level `seed`, which sets the sampler, ladder-init and training seeds
//! at once (the backbone keeps its own `backbone.seed`). Unknown keys are
//! errors. [`RunConfig::canonical`] renders every resolved key in a fixed
//! order; its sha256 is the config hash stored in checkpoints and manifests.

use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::{BackboneSignature, InsertionSchedule, ToyTransformer, ToyTransformerConfig};
use crate::error::{Error, Result};
use crate::graph::SamplerConfig;
use crate::inference::{PatienceConfig, DEFAULT_PATIENCE};
use crate::sidenet::{activation_name, parse_activation, GLadderStack, GateMode, LadderConfig};
use crate::training::TrainConfig;

/// How inserted layers are chosen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleSpec {
    /// `{0, n, 2n, ...} ∪ {L}`.
    Every(usize),
    List(Vec<usize>),
}

impl ScheduleSpec {
    pub fn resolve(&self, num_layers: usize) -> Result<InsertionSchedule> {
        match self {
            ScheduleSpec::Every(n) => InsertionSchedule::every(*n, num_layers),
            ScheduleSpec::List(layers) => InsertionSchedule::new(layers.clone(), num_layers),
        }
    }
}

impl std::fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleSpec::Every(n) => write!(f, "every:{n}"),
            ScheduleSpec::List(layers) => {
                let parts: Vec<String> = layers.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for ScheduleSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if let Some(n) = s.strip_prefix("every:") {
            return n.trim().parse().map(ScheduleSpec::Every).map_err(|e| format!("bad step: {e}"));
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad layer `{p}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(ScheduleSpec::List)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: ToyTransformerConfig,
    pub schedule: ScheduleSpec,
    pub ladder: LadderConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub patience: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: ToyTransformerConfig::default(),
            schedule: ScheduleSpec::Every(1),
            ladder: LadderConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            patience: DEFAULT_PATIENCE,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Config {
        key: key.to_string(),
        message: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_with<T>(key: &str, value: &str, f: impl FnOnce(&str) -> std::result::Result<T, String>) -> Result<T> {
    f(value).map_err(|message| Error::Config {
        key: key.to_string(),
        message,
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets a single key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.set_seed(parse_value(key, v)?),
            "backbone.vocab_size" => self.backbone.vocab_size = parse_value(key, v)?,
            "backbone.layers" => self.backbone.num_layers = parse_value(key, v)?,
            "backbone.dim" => self.backbone.model_dim = parse_value(key, v)?,
            "backbone.heads" => self.backbone.heads = parse_value(key, v)?,
            "backbone.max_len" => self.backbone.max_len = parse_value(key, v)?,
            "backbone.seed" => self.backbone.init_seed = parse_value(key, v)?,
            "ladder.schedule" => self.schedule = parse_value(key, v)?,
            "ladder.hidden" => self.ladder.hidden = parse_value(key, v)?,
            "ladder.gnn" => self.ladder.gnn = parse_value(key, v)?,
            "ladder.gnn_layers" => self.ladder.gnn_layers = parse_value(key, v)?,
            "ladder.activation" => self.ladder.activation = parse_with(key, v, parse_activation)?,
            "ladder.norm" => self.ladder.norm = parse_value(key, v)?,
            "ladder.dropout" => self.ladder.dropout = parse_value(key, v)?,
            "ladder.temperature" => self.ladder.temperature = parse_value(key, v)?,
            "ladder.gate" => self.ladder.gate = parse_value(key, v)?,
            "ladder.message_passing" => self.ladder.message_passing = parse_value(key, v)?,
            "ladder.exit_heads" => self.ladder.exit_heads = parse_value(key, v)?,
            "ladder.joint_exit_heads" => self.ladder.joint_exit_heads = parse_value(key, v)?,
            "ladder.seed" => self.ladder.init_seed = parse_value(key, v)?,
            "sampler.kind" => self.sampler.kind = parse_value(key, v)?,
            "sampler.hops" => self.sampler.hops = parse_value(key, v)?,
            "sampler.walk_length" => self.sampler.walk_length = parse_value(key, v)?,
            "sampler.restart_prob" => self.sampler.restart_prob = parse_value(key, v)?,
            "sampler.num_walks" => self.sampler.num_walks = parse_value(key, v)?,
            "sampler.max_nodes" => self.sampler.max_nodes = parse_value(key, v)?,
            "sampler.seed" => self.sampler.seed = parse_value(key, v)?,
            "train.epochs" => self.train.epochs = parse_value(key, v)?,
            "train.learning_rate" => self.train.optimizer.learning_rate = parse_value(key, v)?,
            "train.weight_decay" => self.train.optimizer.weight_decay = parse_value(key, v)?,
            "train.beta1" => self.train.optimizer.beta1 = parse_value(key, v)?,
            "train.beta2" => self.train.optimizer.beta2 = parse_value(key, v)?,
            "train.eps" => self.train.optimizer.eps = parse_value(key, v)?,
            "train.patience" => {
                let p: usize = parse_value(key, v)?;
                self.train.early_stop_patience = (p > 0).then_some(p);
            }
            "train.accumulation" => self.train.accumulation = parse_value(key, v)?,
            "train.exit_loss_weight" => self.train.exit_loss_weight = parse_value(key, v)?,
            "train.seed" => self.train.seed = parse_value(key, v)?,
            "infer.patience" => self.patience = parse_value(key, v)?,
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// One seed for every stochastic side component.
    pub fn set_seed(&mut self, seed: u64) {
        self.sampler.seed = seed;
        self.ladder.init_seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.schedule.resolve(self.backbone.num_layers)?;
        self.ladder.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        PatienceConfig::new(self.patience)?;
        Ok(())
    }

    pub fn insertion_schedule(&self) -> Result<InsertionSchedule> {
        self.schedule.resolve(self.backbone.num_layers)
    }

    pub fn build_backbone(&self) -> Result<ToyTransformer> {
        ToyTransformer::new(self.backbone.clone(), self.insertion_schedule()?)
    }

    pub fn signature(&self) -> Result<BackboneSignature> {
        Ok(BackboneSignature {
            num_layers: self.backbone.num_layers,
            model_dim: self.backbone.model_dim,
            inserted_layers: self.insertion_schedule()?.layers().to_vec(),
        })
    }

    pub fn build_stack(&self, num_classes: usize) -> Result<GLadderStack> {
        GLadderStack::new(
            self.insertion_schedule()?,
            self.backbone.model_dim,
            num_classes,
            self.ladder.clone(),
        )
    }

    /// Every key with its resolved value, one per line, in a fixed order.
    pub fn canonical(&self) -> String {
        let b = &self.backbone;
        let l = &self.ladder;
        let s = &self.sampler;
        let t = &self.train;
        let o = &t.optimizer;
        let lines = [
            ("backbone.vocab_size", b.vocab_size.to_string()),
            ("backbone.layers", b.num_layers.to_string()),
            ("backbone.dim", b.model_dim.to_string()),
            ("backbone.heads", b.heads.to_string()),
            ("backbone.max_len", b.max_len.to_string()),
            ("backbone.seed", b.init_seed.to_string()),
            ("ladder.schedule", self.schedule.to_string()),
            ("ladder.hidden", l.hidden.to_string()),
            ("ladder.gnn", l.gnn.to_string()),
            ("ladder.gnn_layers", l.gnn_layers.to_string()),
            ("ladder.activation", activation_name(l.activation)),
            ("ladder.norm", l.norm.to_string()),
            ("ladder.dropout", l.dropout.to_string()),
            ("ladder.temperature", l.temperature.to_string()),
            ("ladder.gate", l.gate.to_string()),
            ("ladder.message_passing", l.message_passing.to_string()),
            ("ladder.exit_heads", l.exit_heads.to_string()),
            ("ladder.joint_exit_heads", l.joint_exit_heads.to_string()),
            ("ladder.seed", l.init_seed.to_string()),
            ("sampler.kind", s.kind.to_string()),
            ("sampler.hops", s.hops.to_string()),
            ("sampler.walk_length", s.walk_length.to_string()),
            ("sampler.restart_prob", s.restart_prob.to_string()),
            ("sampler.num_walks", s.num_walks.to_string()),
            ("sampler.max_nodes", s.max_nodes.to_string()),
            ("sampler.seed", s.seed.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.learning_rate", o.learning_rate.to_string()),
            ("train.weight_decay", o.weight_decay.to_string()),
            ("train.beta1", o.beta1.to_string()),
            ("train.beta2", o.beta2.to_string()),
            ("train.eps", o.eps.to_string()),
            ("train.patience", t.early_stop_patience.unwrap_or(0).to_string()),
            ("train.accumulation", t.accumulation.to_string()),
            ("train.exit_loss_weight", t.exit_loss_weight.to_string()),
            ("train.seed", t.seed.to_string()),
            ("infer.patience", self.patience.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

/// The two structural ablations exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Message passing removed from every ladder.
    NoStruct,
    /// ω frozen at zero, so λ = 0.5 throughout.
    ConstLambda,
}

impl Ablation {
    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Ablation::NoStruct => cfg.ladder.message_passing = false,
            Ablation::ConstLambda => cfg.ladder.gate = GateMode::Constant,
        }
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "no-struct" => Ok(Ablation::NoStruct),
            "const-lambda" => Ok(Ablation::ConstLambda),
            other => Err(format!("unknown ablation `{other}` (expected no-struct or const-lambda)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sidenet::{GnnKind, Norm};

    #[test]
    fn defaults_round_trip_through_canonical() {
        let cfg = RunConfig::default();
        let again = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash_hex(), cfg.hash_hex());
    }

    #[test]
    fn seed_fans_out() {
        let cfg = RunConfig::parse("seed = 9\n").unwrap();
        assert_eq!(cfg.sampler.seed, 9);
        assert_eq!(cfg.ladder.init_seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.backbone.init_seed, ToyTransformerConfig::default().init_seed);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("ladder.colour = red").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "ladder.colour"));
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let cfg = RunConfig::parse("# header\n\nladder.hidden = 8 # inline\nladder.schedule = 0,2,4\n").unwrap();
        assert_eq!(cfg.ladder.hidden, 8);
        assert_eq!(cfg.insertion_schedule().unwrap().layers(), &[0, 2, 4]);
    }

    #[test]
    fn bad_schedule_fails_validation() {
        assert!(RunConfig::parse("ladder.schedule = 0,2").is_err());
        assert!(RunConfig::parse("ladder.schedule = every:x").is_err());
    }

    #[test]
    fn ablations() {
        let mut cfg = RunConfig::default();
        "no-struct".parse::<Ablation>().unwrap().apply(&mut cfg);
        assert!(!cfg.ladder.message_passing);
        "const-lambda".parse::<Ablation>().unwrap().apply(&mut cfg);
        assert_eq!(cfg.ladder.gate, GateMode::Constant);
        assert!("no-gates".parse::<Ablation>().is_err());
    }

    #[test]
    fn norm_keys() {
        let cfg = RunConfig::parse("ladder.norm = layer\nladder.gnn = gat\n").unwrap();
        assert_eq!(cfg.ladder.norm, Norm::LayerNorm);
        assert_eq!(cfg.ladder.gnn, GnnKind::Gat);
    }
}
