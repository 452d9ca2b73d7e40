//! Prompt transfer: a prompt found by XPrompt on a source task initializes
//! the prompt of a target task, followed by plain tuning or the full
//! prune-and-rewind procedure.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::info;

use crate::error::{Error, Result};
use crate::harness::checkpoint::RunCheckpoint;
use crate::harness::config::RunConfig;
use crate::harness::metrics::{param_count, render_medians, render_table, write_jsonl, MetricsRecord};
use crate::harness::pipeline::{load_task, prepare_backbone, stage_prune, PipelineOptions};
use crate::prompt::{new_optimizer, tune, PromptBank};
use crate::pruning::MaskSelection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TransferMode {
    /// Tune the transferred prompt only.
    Plain,
    /// Tune, then prune, rewind and retrain on the target task.
    Full,
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(TransferMode::Plain),
            "full" => Ok(TransferMode::Full),
            other => Err(Error::config(format!("unknown transfer mode '{other}'"))),
        }
    }
}

/// Reads the source prompt from a run checkpoint directory or a bare prompt
/// directory. Only the embeddings and masks are carried over.
pub fn load_source(path: &Path) -> Result<PromptBank> {
    let bank = if RunCheckpoint::exists(path) {
        RunCheckpoint::load(path)?.1
    } else {
        PromptBank::load(path)?.0
    };
    let mut fresh = PromptBank::from_parts(bank.embeddings().clone(), bank.pieces())?;
    fresh.set_masks(bank.token_mask().to_vec(), bank.piece_mask().to_vec())?;
    Ok(fresh)
}

/// Runs the requested transfer variants for every configured seed. Records
/// go to `<out>/transfer/`.
pub fn run_transfer(
    cfg: &RunConfig,
    source: &Path,
    modes: &[TransferMode],
    opts: &PipelineOptions,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let src = load_source(source).map_err(|e| e.in_stage("transfer"))?;
    let (m, e, k) = (cfg.prompt.length, cfg.backbone.embed_dim, cfg.prompt.pieces);
    if (src.len(), src.width(), src.pieces()) != (m, e, k) {
        return Err(Error::config(format!(
            "source prompt is {}x{} with {} pieces but the target expects {m}x{e} with {k}",
            src.len(),
            src.width(),
            src.pieces()
        )));
    }
    let bb = prepare_backbone(cfg).map_err(|e| e.in_stage("backbone"))?;
    let (train, dev) = load_task(cfg).map_err(|e| e.in_stage("data"))?;
    let out = cfg.out_dir().join("transfer");
    let carried = param_count(m, e, &MaskSelection::from_bank(&src))?;
    let mut modes = modes.to_vec();
    modes.sort();
    modes.dedup();

    let mut all = Vec::new();
    for &seed in &cfg.run.seeds {
        let mut bank = src.clone();
        let mut opt = new_optimizer(cfg.optimizer_config(), &bank)?;
        let res =
            tune(&mut bank, &bb, &train, &dev, &cfg.tune_config(seed), &mut opt).map_err(|e| e.in_stage("transfer"))?;
        info!(
            "seed {seed}: transferred prompt starts at {:.4}, tunes to {:.4}",
            res.initial_dev_acc, res.best_dev_acc
        );
        let kept = src.live_tokens();
        all.push(MetricsRecord::new(
            "transfer_init",
            seed,
            res.initial_dev_acc,
            kept,
            &carried,
        ));
        if modes.contains(&TransferMode::Plain) {
            all.push(MetricsRecord::new("transfer_o", seed, res.best_dev_acc, kept, &carried));
        }
        if modes.contains(&TransferMode::Full) {
            bank.take_snapshot();
            let dir = out.join(format!("seed-{seed}"));
            let stage = stage_prune(cfg, &bb, &train, &dev, &bank, seed, opts.jobs.max(1), &dir)
                .map_err(|e| e.in_stage("transfer"))?;
            let mut best = stage
                .records
                .into_iter()
                .find(|r| r.stage == "xprompt")
                .ok_or_else(|| Error::state("pruning produced no final record"))?;
            best.stage = "transfer".into();
            all.push(best);
        }
    }

    fs::create_dir_all(&out)?;
    write_jsonl(&out.join("metrics.jsonl"), &all)?;
    fs::write(
        out.join("metrics.txt"),
        format!("{}\n{}", render_table(&all), render_medians(&all)),
    )?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Matrix;

    #[test]
    fn source_masks_are_carried_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = PromptBank::from_parts(Matrix::ones(3, 4), 2).unwrap();
        bank.take_snapshot();
        let tm = vec![true, false, true];
        let pm = vec![true, false, false, false, true, true];
        bank.set_masks(tm.clone(), pm.clone()).unwrap();
        bank.save(dir.path(), "prune").unwrap();
        let src = load_source(dir.path()).unwrap();
        assert_eq!(src.token_mask(), &tm[..]);
        assert_eq!(src.piece_mask(), &pm[..]);
        assert!(src.snapshot().is_none());
    }

    #[test]
    fn modes_parse() {
        assert_eq!("plain".parse::<TransferMode>().unwrap(), TransferMode::Plain);
        assert!("both".parse::<TransferMode>().is_err());
    }
}
