//! Comparison runs: post-hoc negative and random masking, the reversed and
//! random sub-prompts, a shorter prompt trained from scratch, and vanilla
//! prompt tuning.

use std::fmt;
use std::fs;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::checkpoint::{RunCheckpoint, Stage};
use crate::harness::config::RunConfig;
use crate::harness::metrics::{param_count, render_medians, render_table, write_jsonl, MetricsRecord};
use crate::harness::pipeline::{load_task, prepare_backbone, run_seed, stage_dir, PipelineOptions};
use crate::pruning::{
    baseline_length_prompt, baseline_token_masking, removal_count, run_cell, MaskSelection, SelectionRule,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Baseline {
    /// Negative-token masking with its random-masking companion.
    Negative,
    /// Random sub-prompt at the XPrompt ratios, rewound and retrained.
    Random,
    /// Highest-importance structures removed at the XPrompt ratios.
    Reversed,
    /// Fresh prompt with as many tokens as XPrompt kept.
    Length,
    Vanilla,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::Vanilla,
        Baseline::Negative,
        Baseline::Reversed,
        Baseline::Random,
        Baseline::Length,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Negative => "negative",
            Baseline::Random => "random",
            Baseline::Reversed => "reversed",
            Baseline::Length => "length",
            Baseline::Vanilla => "vanilla",
        }
    }

    fn needs_xprompt(self) -> bool {
        matches!(self, Baseline::Random | Baseline::Reversed | Baseline::Length)
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::config(format!("unknown baseline '{s}'")))
    }
}

/// Runs the requested baselines for every configured seed and writes
/// `<out>/baselines.jsonl` and a median table to `<out>/baselines.txt`.
pub fn run_baselines(cfg: &RunConfig, which: &[Baseline], opts: &PipelineOptions) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let bb = prepare_backbone(cfg).map_err(|e| e.in_stage("backbone"))?;
    let (train, dev) = load_task(cfg).map_err(|e| e.in_stage("data"))?;
    let (m, e, k) = (cfg.prompt.length, cfg.backbone.embed_dim, cfg.prompt.pieces);
    let mut which = which.to_vec();
    which.sort();
    which.dedup();
    let mut all = Vec::new();

    for &seed in &cfg.run.seeds {
        let tune_dir = stage_dir(cfg, seed, Stage::Tune);
        if !RunCheckpoint::exists(&tune_dir) {
            if which != [Baseline::Vanilla] {
                return Err(Error::Dependency(format!(
                    "no stage-1 checkpoint for seed {seed} in {}",
                    tune_dir.display()
                )));
            }
            let o = PipelineOptions {
                stop_after: Some(Stage::Tune),
                ..opts.clone()
            };
            run_seed(cfg, &bb, &train, &dev, seed, &o)?;
        }
        let (ck, tuned, tune_recs) = RunCheckpoint::load(&tune_dir)?;
        ck.check(&cfg.hash(), &bb.weights_hash(), seed)?;

        let prune_dir = stage_dir(cfg, seed, Stage::Prune);
        let xprompt = if RunCheckpoint::exists(&prune_dir) {
            let (pck, pbank, precs) = RunCheckpoint::load(&prune_dir)?;
            pck.check(&cfg.hash(), &bb.weights_hash(), seed)?;
            let rec = precs
                .into_iter()
                .find(|r| r.stage == "xprompt")
                .ok_or_else(|| Error::data("prune checkpoint has no xprompt record"))?;
            Some((pck.ratios.unwrap_or((0.0, 0.0)), MaskSelection::from_bank(&pbank), rec))
        } else {
            None
        };
        if which.iter().any(|b| b.needs_xprompt()) && xprompt.is_none() {
            return Err(Error::Dependency(format!(
                "no pruning checkpoint for seed {seed} in {}; run `xprompt prune` first",
                prune_dir.display()
            )));
        }
        let ctx = cfg.prune_context(seed);
        let full = param_count(m, e, &MaskSelection::keep_all(m, k))?;

        for &b in &which {
            match b {
                Baseline::Vanilla => {
                    let mut r = tune_recs[0].clone();
                    r.stage = "vanilla".into();
                    all.push(r);
                }
                Baseline::Negative => {
                    let ratio = cfg.baselines.mask_ratio;
                    let kept = m - removal_count(ratio, m);
                    let mut count = full.clone();
                    count.count = kept * e;
                    count.percentage = crate::harness::metrics::render_percentage(kept * e, m * e);
                    for (stage, rule) in [
                        ("negative_masking", SelectionRule::LowestScore),
                        ("random_masking", SelectionRule::Random),
                    ] {
                        let acc = baseline_token_masking(&tuned, &bb, &train, &dev, ratio, rule, seed, &ctx)
                            .map_err(|e| e.in_stage(stage))?;
                        all.push(MetricsRecord::new(stage, seed, acc, kept, &count).with_ratios(ratio, 0.0));
                    }
                }
                Baseline::Reversed | Baseline::Random => {
                    let (ratios, _, _) = xprompt.as_ref().expect("checked above");
                    let (stage, rule) = if b == Baseline::Reversed {
                        ("reversed_xprompt", SelectionRule::Reversed)
                    } else {
                        ("random_prompt", SelectionRule::Random)
                    };
                    let (_, cell) = run_cell(&tuned, &bb, &train, &dev, *ratios, rule, seed, &ctx)
                        .map_err(|e| e.in_stage(stage))?;
                    let count = param_count(m, e, &cell.selection)?;
                    all.push(
                        MetricsRecord::new(stage, seed, cell.dev_acc, cell.selection.kept_token_count(), &count)
                            .with_ratios(ratios.0, ratios.1),
                    );
                }
                Baseline::Length => {
                    let (_, _, rec) = xprompt.as_ref().expect("checked above");
                    let m_kept = rec.kept_tokens;
                    let res = baseline_length_prompt(
                        m_kept,
                        m,
                        k,
                        &cfg.init_strategy(seed),
                        &bb,
                        &train,
                        &dev,
                        cfg.optimizer_config(),
                        &cfg.tune_config(seed),
                    )
                    .map_err(|e| e.in_stage("length_prompt"))?;
                    let mut count = full.clone();
                    count.count = m_kept * e;
                    count.percentage = crate::harness::metrics::render_percentage(m_kept * e, m * e);
                    all.push(MetricsRecord::new(
                        "length_prompt",
                        seed,
                        res.best_dev_acc,
                        m_kept,
                        &count,
                    ));
                }
            }
        }
        if let Some((_, _, rec)) = xprompt {
            all.push(rec);
        }
    }

    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    write_jsonl(&out.join("baselines.jsonl"), &all)?;
    fs::write(
        out.join("baselines.txt"),
        format!("{}\n{}", render_table(&all), render_medians(&all)),
    )?;
    Ok(all)
}
