//! The three-stage pipeline: prompt tuning, hierarchical pruning, and
//! rewinding with retraining, run per seed with stage checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use crate::backbone::{CuedTask, FrozenBackbone};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{RunCheckpoint, Stage};
use crate::harness::config::RunConfig;
use crate::harness::metrics::{param_count, render_medians, render_table, write_jsonl, MetricsRecord};
use crate::harness::saliency::export_saliency;
use crate::manifest::Manifest;
use crate::prompt::{new_optimizer, tune, PromptBank};
use crate::pruning::{hierarchical_prune, MaskSelection};
use crate::tasks::{fewshot_subsample, generate, load_jsonl, markov_corpus, Dataset, Example, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Reuse complete stage checkpoints found in the output directory.
    pub resume: bool,
    /// Worker threads for grid cells; 1 runs them in order on this thread.
    pub jobs: usize,
    /// Stop once this stage is finished and checkpointed.
    pub stop_after: Option<Stage>,
    /// Fail instead of running stage 1 when its checkpoint is missing.
    pub require_tuned: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            resume: false,
            jobs: 1,
            stop_after: None,
            require_tuned: false,
        }
    }
}

pub fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.out_dir().join(format!("seed-{seed}"))
}

pub fn stage_dir(cfg: &RunConfig, seed: u64, stage: Stage) -> PathBuf {
    seed_dir(cfg, seed).join(stage.name())
}

fn backbone_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("backbone")
}

/// Loads the configured backbone checkpoint, reuses a matching backbone in
/// the output directory, or pretrains and saves a new one.
pub fn prepare_backbone(cfg: &RunConfig) -> Result<FrozenBackbone> {
    let want = cfg.backbone_config();
    if !cfg.backbone.checkpoint.is_empty() {
        let bb = FrozenBackbone::load(Path::new(&cfg.backbone.checkpoint))?;
        if bb.config() != &want {
            return Err(Error::config(format!(
                "backbone checkpoint {} does not match the [backbone] settings",
                cfg.backbone.checkpoint
            )));
        }
        if !bb.is_frozen() {
            return Err(Error::config("backbone checkpoint is not frozen"));
        }
        return Ok(bb);
    }
    let dir = backbone_dir(cfg);
    let stamp = dir.join("run.txt");
    if stamp.is_file() {
        let man = Manifest::read(&stamp)?;
        if man.get("backbone_hash") == Some(cfg.backbone_hash().as_str()) {
            info!("reusing backbone in {}", dir.display());
            return FrozenBackbone::load(&dir);
        }
    }
    let corpus = markov_corpus(
        cfg.task.vocab_size,
        cfg.pretrain.corpus_size,
        cfg.pretrain.corpus_min_len,
        cfg.pretrain.corpus_max_len,
        cfg.pretrain.seed,
    )?;
    let tasks = cued_tasks(cfg)?;
    let mut bb = FrozenBackbone::init(&want)?;
    let log = bb.pretrain_with_tasks(&corpus, &tasks, &cfg.pretrain.to_config())?;
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    bb.save(&dir)?;
    let losses: String = log.iter().map(|l| format!("{l}\n")).collect();
    fs::write(dir.join("pretrain_loss.txt"), losses)?;
    let mut man = Manifest::new();
    man.set("backbone_hash", cfg.backbone_hash());
    man.set("weights_hash", bb.weights_hash());
    man.set("steps", log.len());
    man.write(&stamp)?;
    Ok(bb)
}

/// Supervised tasks taught with cue tokens during pretraining. Their data
/// comes from seeds disjoint from the task seed range used for tuning.
pub fn cued_tasks(cfg: &RunConfig) -> Result<Vec<CuedTask>> {
    cfg.pretrain
        .cued_tasks
        .iter()
        .zip(cfg.cue_tokens())
        .enumerate()
        .map(|(i, (&kind, cue))| {
            let spec = TaskSpec {
                name: format!("cued-{i}"),
                kind,
                vocab_size: cfg.task.vocab_size,
                num_classes: cfg.task.num_classes,
                min_len: cfg.task.min_len,
                max_len: cfg.task.max_len,
                train_size: cfg.pretrain.cued_examples.max(1),
                dev_size: 1,
                seed: cfg.pretrain.seed.wrapping_add(1_000_003).wrapping_add(i as u64),
            };
            Ok(CuedTask {
                cue,
                examples: generate(&spec)?.train,
            })
        })
        .collect()
}

/// Train and dev splits, few-shot subsampled when configured.
pub fn load_task(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (v, c) = (cfg.task.vocab_size, cfg.task.num_classes);
    let (train, dev) = if cfg.task.uses_files() {
        let train = load_jsonl(Path::new(&cfg.task.train_path), v, c)?;
        let dev = load_jsonl(Path::new(&cfg.task.dev_path), v, c)?;
        (train, dev)
    } else {
        let s = generate(&cfg.task.to_spec())?;
        (s.train, s.dev)
    };
    if train.is_empty() || dev.is_empty() {
        return Err(Error::data("training and dev sets must be non-empty"));
    }
    let limit = cfg.backbone.max_seq_len.saturating_sub(cfg.prompt.length);
    if let Some(ex) = train.iter().chain(&dev).find(|ex| ex.tokens.len() > limit) {
        return Err(Error::Length {
            len: ex.tokens.len() + cfg.prompt.length,
            max: cfg.backbone.max_seq_len,
        });
    }
    let train = if cfg.task.shots > 0 {
        fewshot_subsample(&train, cfg.task.shots, cfg.task.shots_seed)?
    } else {
        train
    };
    Ok((train, dev))
}

/// Stage 1: tune a fresh prompt and snapshot it.
pub fn stage_tune(
    cfg: &RunConfig,
    bb: &FrozenBackbone,
    train: &[Example],
    dev: &[Example],
    seed: u64,
) -> Result<(PromptBank, MetricsRecord)> {
    let t = Instant::now();
    let (m, e, k) = (cfg.prompt.length, cfg.backbone.embed_dim, cfg.prompt.pieces);
    let mut bank = PromptBank::init(m, e, k, &cfg.init_strategy(seed), bb)?;
    let mut opt = new_optimizer(cfg.optimizer_config(), &bank)?;
    let res = tune(&mut bank, bb, train, dev, &cfg.tune_config(seed), &mut opt)?;
    bank.take_snapshot();
    let count = param_count(m, e, &MaskSelection::keep_all(m, k))?;
    info!("seed {seed}: prompt tuning dev accuracy {:.4}", res.best_dev_acc);
    let rec = MetricsRecord::new("tune", seed, res.best_dev_acc, m, &count).with_seconds(t.elapsed().as_secs_f64());
    Ok((bank, rec))
}

pub struct PruneStage {
    pub bank: PromptBank,
    pub records: Vec<MetricsRecord>,
    pub ratios: (f64, f64),
}

/// Stages 2 and 3: grid search over pruning ratios, each cell rewound and
/// retrained; the bank ends in the best cell. Importance and saliency
/// exports are written to `export_dir`.
pub fn stage_prune(
    cfg: &RunConfig,
    bb: &FrozenBackbone,
    train: &[Example],
    dev: &[Example],
    tuned: &PromptBank,
    seed: u64,
    jobs: usize,
    export_dir: &Path,
) -> Result<PruneStage> {
    let t = Instant::now();
    let (m, e) = (tuned.len(), tuned.width());
    let mut bank = tuned.clone();
    let sched = cfg.schedule(cfg.prune.selection, seed);
    let out = hierarchical_prune(&mut bank, bb, train, dev, &sched, &cfg.prune_context(seed), jobs)?;
    let mut records = Vec::with_capacity(out.cells.len() + 1);
    for c in &out.cells {
        let count = param_count(m, e, &c.selection)?;
        records.push(
            MetricsRecord::new("cell", seed, c.dev_acc, c.selection.kept_token_count(), &count)
                .with_ratios(c.token_ratio, c.piece_ratio),
        );
    }
    let best_ratios = (out.best.selection.token_ratio, out.best.selection.piece_ratio);
    let count = param_count(m, e, &out.best.selection)?;
    records.push(
        MetricsRecord::new(
            "xprompt",
            seed,
            out.best.dev_acc,
            out.best.selection.kept_token_count(),
            &count,
        )
        .with_ratios(best_ratios.0, best_ratios.1)
        .with_seconds(t.elapsed().as_secs_f64()),
    );
    fs::create_dir_all(export_dir)?;
    out.token_report.write_jsonl(&export_dir.join("importance.jsonl"))?;
    out.piece_report
        .write_jsonl(&export_dir.join("importance_survivors.jsonl"))?;
    export_saliency(
        &out.token_report,
        &out.best.selection,
        &export_dir.join("saliency.jsonl"),
    )?;
    Ok(PruneStage {
        bank,
        records,
        ratios: best_ratios,
    })
}

fn write_metrics(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("metrics.jsonl"), records)?;
    fs::write(dir.join("metrics.txt"), render_table(records))?;
    Ok(())
}

fn append_timings(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records.iter().filter(|r| r.wall_clock_seconds > 0.0) {
        text.push_str(&format!("{} {:.3}\n", r.stage, r.wall_clock_seconds));
    }
    if !text.is_empty() {
        let path = dir.join("timings.txt");
        let mut all = fs::read_to_string(&path).unwrap_or_default();
        all.push_str(&text);
        fs::write(path, all)?;
    }
    Ok(())
}

/// Runs (or resumes) one seed. Returns the records of every completed stage.
pub fn run_seed(
    cfg: &RunConfig,
    bb: &FrozenBackbone,
    train: &[Example],
    dev: &[Example],
    seed: u64,
    opts: &PipelineOptions,
) -> Result<Vec<MetricsRecord>> {
    let dir = seed_dir(cfg, seed);
    fs::create_dir_all(&dir)?;
    let (hash, bb_hash) = (cfg.hash(), bb.weights_hash());
    let checkpoint = |stage, ratios| RunCheckpoint {
        config_hash: hash.clone(),
        backbone_hash: bb_hash.clone(),
        stage,
        seed,
        ratios,
    };

    let tune_dir = stage_dir(cfg, seed, Stage::Tune);
    let (tuned, mut records) = if (opts.resume || opts.require_tuned) && RunCheckpoint::exists(&tune_dir) {
        let (ck, bank, recs) = RunCheckpoint::load(&tune_dir)?;
        ck.check(&hash, &bb_hash, seed)?;
        info!("seed {seed}: resumed after stage 'tune'");
        (bank, recs)
    } else if opts.require_tuned {
        return Err(Error::Dependency(format!(
            "no stage-1 checkpoint in {}; run `xprompt tune` first",
            tune_dir.display()
        )));
    } else {
        let (bank, rec) = stage_tune(cfg, bb, train, dev, seed).map_err(|e| e.in_stage("tune"))?;
        let recs = vec![rec];
        checkpoint(Stage::Tune, None).save(&tune_dir, &bank, &recs)?;
        append_timings(&dir, &recs)?;
        (bank, recs)
    };
    if opts.stop_after == Some(Stage::Tune) {
        write_metrics(&dir, &records)?;
        return Ok(records);
    }

    let prune_dir = stage_dir(cfg, seed, Stage::Prune);
    let prune_records = if opts.resume && RunCheckpoint::exists(&prune_dir) {
        let (ck, _, recs) = RunCheckpoint::load(&prune_dir)?;
        ck.check(&hash, &bb_hash, seed)?;
        info!("seed {seed}: resumed after stage 'prune'");
        recs
    } else {
        let stage =
            stage_prune(cfg, bb, train, dev, &tuned, seed, opts.jobs.max(1), &dir).map_err(|e| e.in_stage("prune"))?;
        checkpoint(Stage::Prune, Some(stage.ratios)).save(&prune_dir, &stage.bank, &stage.records)?;
        append_timings(&dir, &stage.records)?;
        stage.records
    };
    records.extend(prune_records);
    write_metrics(&dir, &records)?;
    Ok(records)
}

/// Full pipeline over every configured seed. Metrics are written per seed
/// and collected into `<out>/metrics.jsonl` and `<out>/metrics.txt`.
pub fn run_pipeline(cfg: &RunConfig, opts: &PipelineOptions) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let bb = prepare_backbone(cfg).map_err(|e| e.in_stage("backbone"))?;
    if opts.stop_after == Some(Stage::Backbone) {
        return Ok(Vec::new());
    }
    let (train, dev) = load_task(cfg).map_err(|e| e.in_stage("data"))?;
    let mut all = Vec::new();
    for &seed in &cfg.run.seeds {
        all.extend(run_seed(cfg, &bb, &train, &dev, seed, opts)?);
    }
    write_jsonl(&out.join("metrics.jsonl"), &all)?;
    let finals: Vec<MetricsRecord> = all.iter().filter(|r| r.stage != "cell").cloned().collect();
    fs::write(
        out.join("metrics.txt"),
        format!("{}\n{}", render_table(&all), render_medians(&finals)),
    )?;
    Ok(all)
}
