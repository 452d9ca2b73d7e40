//! Per-stage run checkpoints: the prompt bank, the metrics records the
//! stage produced, and a manifest tying them to a config and a backbone.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::metrics::{read_jsonl, write_jsonl, MetricsRecord};
use crate::manifest::Manifest;
use crate::prompt::PromptBank;

const RUN_MANIFEST: &str = "run.txt";
const RECORDS: &str = "records.jsonl";
const BANK_DIR: &str = "prompt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Backbone,
    Tune,
    Prune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Tune => "tune",
            Stage::Prune => "prune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Stage::Backbone),
            "tune" => Ok(Stage::Tune),
            "prune" => Ok(Stage::Prune),
            other => Err(Error::config(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunCheckpoint {
    pub config_hash: String,
    pub backbone_hash: String,
    pub stage: Stage,
    pub seed: u64,
    /// Ratios of the selected grid cell (prune stage only).
    pub ratios: Option<(f64, f64)>,
}

impl RunCheckpoint {
    /// True when a complete checkpoint is present. The manifest is written
    /// last, so a half-written directory does not count.
    pub fn exists(dir: &Path) -> bool {
        dir.join(RUN_MANIFEST).is_file()
    }

    pub fn save(&self, dir: &Path, bank: &PromptBank, records: &[MetricsRecord]) -> Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        bank.save(&dir.join(BANK_DIR), self.stage.name())?;
        write_jsonl(&dir.join(RECORDS), records)?;
        let mut man = Manifest::new();
        man.set("format", "xprompt-run-v1");
        man.set("stage", self.stage);
        man.set("seed", self.seed);
        man.set("config_hash", &self.config_hash);
        man.set("backbone_hash", &self.backbone_hash);
        if let Some((t, p)) = self.ratios {
            man.set("token_ratio", t);
            man.set("piece_ratio", p);
        }
        man.write(&dir.join(RUN_MANIFEST))
    }

    pub fn load(dir: &Path) -> Result<(Self, PromptBank, Vec<MetricsRecord>)> {
        let man = Manifest::read(&dir.join(RUN_MANIFEST))?;
        if man.require("format")? != "xprompt-run-v1" {
            return Err(Error::data(format!("{} is not a run checkpoint", dir.display())));
        }
        let ratios = match (man.get("token_ratio"), man.get("piece_ratio")) {
            (Some(_), Some(_)) => Some((man.parse("token_ratio")?, man.parse("piece_ratio")?)),
            _ => None,
        };
        let ck = Self {
            config_hash: man.require("config_hash")?.to_string(),
            backbone_hash: man.require("backbone_hash")?.to_string(),
            stage: man.require("stage")?.parse()?,
            seed: man.parse("seed")?,
            ratios,
        };
        let (bank, tag) = PromptBank::load(&dir.join(BANK_DIR))?;
        if tag != ck.stage.name() {
            return Err(Error::data(format!(
                "prompt checkpoint is tagged '{tag}' but the run manifest says '{}'",
                ck.stage
            )));
        }
        let records = read_jsonl(&dir.join(RECORDS))?;
        Ok((ck, bank, records))
    }

    /// Resuming under a different config or backbone is fatal.
    pub fn check(&self, config_hash: &str, backbone_hash: &str, seed: u64) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::config(format!(
                "config hash mismatch on resume at stage '{}': checkpoint {} vs current {}",
                self.stage, self.config_hash, config_hash
            )));
        }
        if self.backbone_hash != backbone_hash {
            return Err(Error::config(format!(
                "backbone changed since the '{}' checkpoint was written",
                self.stage
            )));
        }
        if self.seed != seed {
            return Err(Error::config(format!(
                "checkpoint belongs to seed {} not {seed}",
                self.seed
            )));
        }
        Ok(())
    }
}
