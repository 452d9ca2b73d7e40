//! Run configuration: a flat TOML document with one table per concern.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::manifest::sha256_hex;
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::prompt::{InitKind, InitStrategy, TuneConfig};
use crate::pruning::{Aggregation, PruneContext, PruneSchedule, SelectionRule};
use crate::tasks::{GeneratorKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Saved backbone to load instead of pretraining; empty means pretrain.
    pub checkpoint: String,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            vocab_size: b.vocab_size,
            embed_dim: b.embed_dim,
            layers: b.layers,
            heads: b.heads,
            ffn_dim: b.ffn_dim,
            max_seq_len: b.max_seq_len,
            num_classes: b.num_classes,
            seed: b.seed,
            checkpoint: String::new(),
        }
    }
}

impl BackboneSection {
    pub fn to_config(&self) -> BackboneConfig {
        BackboneConfig {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
    pub corpus_size: usize,
    pub corpus_min_len: usize,
    pub corpus_max_len: usize,
    /// Generator families taught with a cue token during pretraining. Cue
    /// ids are assigned downwards from `vocab_size - 2`.
    pub cued_tasks: Vec<GeneratorKind>,
    pub cued_examples: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            batch_size: 16,
            mask_prob: 0.15,
            seed: 0,
            corpus_size: 2000,
            corpus_min_len: 6,
            corpus_max_len: 12,
            cued_tasks: vec![
                GeneratorKind::MajorityClass,
                GeneratorKind::PatternDetect,
                GeneratorKind::ParityOfMarkers,
            ],
            cued_examples: 1000,
        }
    }
}

impl PretrainSection {
    pub fn to_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            mask_prob: self.mask_prob,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub name: String,
    pub kind: GeneratorKind,
    /// Number of task symbols; also the pretraining corpus alphabet.
    pub vocab_size: usize,
    pub num_classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
    /// JSONL files used instead of the generator when both are set.
    pub train_path: String,
    pub dev_path: String,
    /// Few-shot training subsample size; 0 keeps the full training set.
    pub shots: usize,
    pub shots_seed: u64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            name: "pattern".into(),
            kind: GeneratorKind::PatternDetect,
            vocab_size: 16,
            num_classes: 2,
            min_len: 6,
            max_len: 10,
            train_size: 128,
            dev_size: 128,
            seed: 7,
            train_path: String::new(),
            dev_path: String::new(),
            shots: 0,
            shots_seed: 0,
        }
    }
}

impl TaskSection {
    pub fn to_spec(&self) -> TaskSpec {
        TaskSpec {
            name: self.name.clone(),
            kind: self.kind,
            vocab_size: self.vocab_size,
            num_classes: self.num_classes,
            min_len: self.min_len,
            max_len: self.max_len,
            train_size: self.train_size,
            dev_size: self.dev_size,
            seed: self.seed,
        }
    }

    pub fn uses_files(&self) -> bool {
        !self.train_path.is_empty() || !self.dev_path.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub length: usize,
    pub pieces: usize,
    pub init: InitKind,
    pub uniform_bound: f64,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            length: 20,
            pieces: 16,
            init: InitKind::SampledVocab,
            uniform_bound: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdafactorLite,
            learning_rate: 0.05,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub token_ratios: Vec<f64>,
    pub piece_ratios: Vec<f64>,
    pub selection: SelectionRule,
    pub aggregation: Aggregation,
    pub score_batch_size: usize,
    pub retrain_epochs: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        Self {
            token_ratios: grid.clone(),
            piece_ratios: grid,
            selection: SelectionRule::LowestScore,
            aggregation: Aggregation::PerBatchAbs,
            score_batch_size: 16,
            retrain_epochs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesSection {
    /// Token ratio of the post-hoc negative/random masking comparison.
    pub mask_ratio: f64,
}

impl Default for BaselinesSection {
    fn default() -> Self {
        Self { mask_ratio: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out_dir: "runs/xprompt".into(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub pretrain: PretrainSection,
    pub task: TaskSection,
    pub prompt: PromptSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub prune: PruneSection,
    pub baselines: BaselinesSection,
    pub run: RunSection,
}

const TEMPLATE_HEADER: &str = "\
# XPrompt run configuration. Every key is listed with its default.
# Empty strings mean \"not set\" (backbone.checkpoint, task.train_path,
# task.dev_path).
";

impl RunConfig {
    /// The default configuration rendered as TOML.
    pub fn template() -> String {
        let body = toml::to_string(&RunConfig::default()).expect("default config serializes");
        format!("{TEMPLATE_HEADER}\n{body}")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.out_dir)
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        self.backbone.to_config()
    }

    /// Cue token ids for the cued pretraining tasks, in order.
    pub fn cue_tokens(&self) -> Vec<usize> {
        (0..self.pretrain.cued_tasks.len())
            .map(|i| self.backbone.vocab_size - 2 - i)
            .collect()
    }

    pub fn init_strategy(&self, seed: u64) -> InitStrategy {
        InitStrategy {
            kind: self.prompt.init,
            uniform_bound: self.prompt.uniform_bound,
            seed,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer.kind,
            learning_rate: self.optimizer.learning_rate,
            weight_decay: self.optimizer.weight_decay,
        }
    }

    pub fn tune_config(&self, seed: u64) -> TuneConfig {
        TuneConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed,
        }
    }

    pub fn prune_context(&self, seed: u64) -> PruneContext {
        PruneContext {
            optimizer: self.optimizer_config(),
            retrain: TuneConfig {
                epochs: self.prune.retrain_epochs,
                batch_size: self.train.batch_size,
                seed,
            },
            aggregation: self.prune.aggregation,
            score_batch_size: self.prune.score_batch_size,
        }
    }

    pub fn schedule(&self, rule: SelectionRule, seed: u64) -> PruneSchedule {
        PruneSchedule {
            token_ratios: self.prune.token_ratios.clone(),
            piece_ratios: self.prune.piece_ratios.clone(),
            selection: rule,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bb = self.backbone_config();
        bb.validate()?;
        if self.prompt.length == 0 {
            return Err(Error::config("prompt.length must be at least 1"));
        }
        if self.prompt.pieces == 0 || !bb.embed_dim.is_multiple_of(self.prompt.pieces) {
            return Err(Error::Divisibility {
                what: "backbone.embed_dim by prompt.pieces",
                numerator: bb.embed_dim,
                divisor: self.prompt.pieces,
            });
        }
        if self.prompt.init == InitKind::RandomUniform
            && !(self.prompt.uniform_bound > 0.0 && self.prompt.uniform_bound.is_finite())
        {
            return Err(Error::config("prompt.uniform_bound must be positive"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds must list at least one seed"));
        }
        if self.train.batch_size == 0 || self.prune.score_batch_size == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        self.optimizer_config().validate()?;
        self.schedule(self.prune.selection, 0).validate()?;
        if !(0.0..1.0).contains(&self.baselines.mask_ratio) {
            return Err(Error::config("baselines.mask_ratio must lie in [0, 1)"));
        }
        if self.task.num_classes != bb.num_classes {
            return Err(Error::config(format!(
                "task has {} classes but the backbone head has {}",
                self.task.num_classes, bb.num_classes
            )));
        }
        let cues = self.pretrain.cued_tasks.len();
        if self.task.vocab_size + cues + 1 > bb.vocab_size {
            return Err(Error::config(format!(
                "{} task symbols, {cues} cue tokens and the mask token do not fit a vocabulary of {}",
                self.task.vocab_size, bb.vocab_size
            )));
        }
        if self.task.uses_files() {
            for p in [&self.task.train_path, &self.task.dev_path] {
                if p.is_empty() || !Path::new(p).is_file() {
                    return Err(Error::config(format!("dataset file '{p}' does not exist")));
                }
            }
        } else {
            self.task.to_spec().validate()?;
            bb.check_prompt_fit(self.prompt.length, self.prompt.pieces, self.task.max_len)?;
        }
        if !self.backbone.checkpoint.is_empty() && !Path::new(&self.backbone.checkpoint).is_dir() {
            return Err(Error::config(format!(
                "backbone checkpoint '{}' does not exist",
                self.backbone.checkpoint
            )));
        }
        Ok(())
    }

    /// Digest of every setting that influences results. Output location,
    /// worker count and the seed list are excluded; seeds are tracked per
    /// run directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run = RunSection {
            seeds: Vec::new(),
            out_dir: String::new(),
            jobs: 0,
        };
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Digest of the settings that determine the backbone.
    pub fn backbone_hash(&self) -> String {
        let key = serde_json::json!({
            "backbone": self.backbone,
            "pretrain": self.pretrain,
            "symbols": self.task.vocab_size,
            "min_len": self.task.min_len,
            "max_len": self.task.max_len,
            "classes": self.task.num_classes,
        });
        sha256_hex(key.to_string().as_bytes())
    }
}
