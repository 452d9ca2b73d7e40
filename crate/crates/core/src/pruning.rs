//! Importance scoring, token/piece selection, the hierarchical pruning grid,
//! rewinding, and the ablation masks used as baselines.
//!
//! A token's importance is the average absolute derivative of the batch loss
//! with respect to its mask variable `γ_i`, evaluated at the current masks;
//! pieces use the piece masks `ζ_{i,c}` the same way. Structures that are
//! already pruned are reported with score 0 and a `pruned` flag.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::prompt::{
    batch_loss, evaluate, new_optimizer, tune, InitStrategy, PromptBank, PromptGrad, TuneConfig, TuneResult,
};
use crate::tasks::Example;

/// Guards `floor(ratio · n)` against representation error such as
/// `0.7 · 20 = 13.999…`.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over batches of |∂L_batch/∂mask|.
    PerBatchAbs,
    /// Mean over examples of |∂L_x/∂mask|.
    PerExampleAbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub token_scores: Vec<f64>,
    /// m × k, row-major.
    pub piece_scores: Matrix,
    pub token_pruned: Vec<bool>,
    pub piece_pruned: Vec<bool>,
    pub batches_seen: usize,
    pub aggregation: Aggregation,
}

impl ImportanceReport {
    pub fn tokens(&self) -> usize {
        self.token_scores.len()
    }

    pub fn pieces(&self) -> usize {
        self.piece_scores.cols()
    }

    pub fn piece_score(&self, token: usize, piece: usize) -> f64 {
        self.piece_scores.get(token, piece)
    }

    fn cell_pruned(&self, token: usize, piece: usize) -> bool {
        self.token_pruned[token] || self.piece_pruned[token * self.pieces() + piece]
    }

    /// One JSON record per token: index, score, pruned flag, piece scores and
    /// piece flags.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for i in 0..self.tokens() {
            let k = self.pieces();
            let rec = serde_json::json!({
                "index": i,
                "score": self.token_scores[i],
                "pruned": self.token_pruned[i],
                "piece_scores": self.piece_scores.row(i),
                "piece_pruned": &self.piece_pruned[i * k..(i + 1) * k],
            });
            writeln!(f, "{rec}")?;
        }
        Ok(())
    }
}

/// Computes token and piece importance for the bank's current masks over
/// `data` in its given order.
pub fn score_importance(
    bank: &PromptBank,
    bb: &FrozenBackbone,
    data: &[Example],
    agg: Aggregation,
    batch_size: usize,
) -> Result<ImportanceReport> {
    if data.is_empty() {
        return Err(Error::data("cannot score importance on an empty dataset"));
    }
    let (m, k) = (bank.len(), bank.pieces());
    let size = match agg {
        Aggregation::PerBatchAbs => batch_size.max(1),
        Aggregation::PerExampleAbs => 1,
    };
    let mut token_sum = vec![0.0; m];
    let mut piece_sum = Matrix::zeros(m, k);
    let mut batches = 0usize;
    for chunk in data.chunks(size) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let (mut g, prompt, _, loss) = batch_loss(bank, bb, &batch, PromptGrad::Masks)?;
        g.backward(loss)?;
        let dg = g.grad_or_zeros(prompt.gamma);
        let dz = g.grad_or_zeros(prompt.zeta);
        for (s, v) in token_sum.iter_mut().zip(dg.data()) {
            *s += v.abs();
        }
        for (s, v) in piece_sum.data_mut().iter_mut().zip(dz.data()) {
            *s += v.abs();
        }
        batches += 1;
    }
    let n = batches as f64;
    let token_pruned: Vec<bool> = bank.token_mask().iter().map(|&f| !f).collect();
    let piece_pruned: Vec<bool> = (0..m * k).map(|idx| !bank.cell_live(idx / k, idx % k)).collect();
    let token_scores = token_sum
        .iter()
        .zip(&token_pruned)
        .map(|(s, &p)| if p { 0.0 } else { s / n })
        .collect();
    for (idx, v) in piece_sum.data_mut().iter_mut().enumerate() {
        *v = if piece_pruned[idx] { 0.0 } else { *v / n };
    }
    Ok(ImportanceReport {
        token_scores,
        piece_scores: piece_sum,
        token_pruned,
        piece_pruned,
        batches_seen: batches,
        aggregation: agg,
    })
}

/// Token-level importance. The report also carries piece scores from the
/// same pass.
pub fn score_tokens(
    bank: &PromptBank,
    bb: &FrozenBackbone,
    data: &[Example],
    agg: Aggregation,
    batch_size: usize,
) -> Result<ImportanceReport> {
    score_importance(bank, bb, data, agg, batch_size)
}

/// Piece-level importance over the live pieces of live tokens.
pub fn score_pieces(
    bank: &PromptBank,
    bb: &FrozenBackbone,
    data: &[Example],
    agg: Aggregation,
    batch_size: usize,
) -> Result<ImportanceReport> {
    score_importance(bank, bb, data, agg, batch_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Remove the lowest-scoring structures (the XPrompt rule).
    LowestScore,
    /// Remove uniformly at random (seeded).
    Random,
    /// Remove the highest-scoring structures.
    Reversed,
}

/// Surviving tokens and pieces after pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSelection {
    pub tokens: usize,
    pub pieces: usize,
    pub kept_tokens: BTreeSet<usize>,
    pub kept_pieces: BTreeMap<usize, BTreeSet<usize>>,
    pub token_ratio: f64,
    pub piece_ratio: f64,
}

impl MaskSelection {
    pub fn keep_all(m: usize, k: usize) -> Self {
        Self {
            tokens: m,
            pieces: k,
            kept_tokens: (0..m).collect(),
            kept_pieces: (0..m).map(|i| (i, (0..k).collect())).collect(),
            token_ratio: 0.0,
            piece_ratio: 0.0,
        }
    }

    /// Reads the live structure of a bank.
    pub fn from_bank(bank: &PromptBank) -> Self {
        let (m, k) = (bank.len(), bank.pieces());
        let mut kept_tokens = BTreeSet::new();
        let mut kept_pieces = BTreeMap::new();
        for i in 0..m {
            if !bank.token_mask()[i] {
                continue;
            }
            let live: BTreeSet<usize> = (0..k).filter(|&c| bank.cell_live(i, c)).collect();
            if !live.is_empty() {
                kept_tokens.insert(i);
                kept_pieces.insert(i, live);
            }
        }
        Self {
            tokens: m,
            pieces: k,
            kept_tokens,
            kept_pieces,
            token_ratio: 0.0,
            piece_ratio: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&t) = self.kept_tokens.iter().find(|&&t| t >= self.tokens) {
            return Err(Error::data(format!(
                "kept token {t} outside prompt of {} tokens",
                self.tokens
            )));
        }
        for (t, ps) in &self.kept_pieces {
            if !self.kept_tokens.contains(t) {
                return Err(Error::data(format!("pieces kept for pruned token {t}")));
            }
            if let Some(&p) = ps.iter().find(|&&p| p >= self.pieces) {
                return Err(Error::data(format!("kept piece {p} outside {} pieces", self.pieces)));
            }
        }
        Ok(())
    }

    pub fn kept_token_count(&self) -> usize {
        self.kept_tokens
            .iter()
            .filter(|t| self.kept_pieces.get(t).is_some_and(|p| !p.is_empty()))
            .count()
    }

    pub fn kept_cell_count(&self) -> usize {
        self.kept_tokens
            .iter()
            .map(|t| self.kept_pieces.get(t).map_or(0, BTreeSet::len))
            .sum()
    }

    /// `(γ, ζ)` flags.
    pub fn masks(&self) -> (Vec<bool>, Vec<bool>) {
        let (m, k) = (self.tokens, self.pieces);
        let mut gamma = vec![false; m];
        let mut zeta = vec![false; m * k];
        for &t in &self.kept_tokens {
            gamma[t] = true;
            if let Some(ps) = self.kept_pieces.get(&t) {
                for &p in ps {
                    zeta[t * k + p] = true;
                }
            }
        }
        (gamma, zeta)
    }

    pub fn apply(&self, bank: &mut PromptBank) -> Result<()> {
        if (bank.len(), bank.pieces()) != (self.tokens, self.pieces) {
            return Err(Error::Dimension {
                op: "apply selection",
                lhs: (bank.len(), bank.pieces()),
                rhs: (self.tokens, self.pieces),
            });
        }
        self.validate()?;
        let (g, z) = self.masks();
        bank.set_masks(g, z)
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::range(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// `floor(ratio · live)`, never removing every live structure.
pub fn removal_count(ratio: f64, live: usize) -> usize {
    let p = (ratio * live as f64 + FLOOR_SLACK).floor() as usize;
    p.min(live.saturating_sub(1))
}

/// Picks `p` of `candidates` according to `rule`. Ties go to the lower
/// index first.
fn choose(candidates: &[(usize, f64)], p: usize, rule: SelectionRule, seed: u64) -> BTreeSet<usize> {
    match rule {
        SelectionRule::LowestScore => {
            let mut c = candidates.to_vec();
            c.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            c.iter().take(p).map(|x| x.0).collect()
        }
        SelectionRule::Reversed => {
            let mut c = candidates.to_vec();
            c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            c.iter().take(p).map(|x| x.0).collect()
        }
        SelectionRule::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            index::sample(&mut rng, candidates.len(), p)
                .into_iter()
                .map(|i| candidates[i].0)
                .collect()
        }
    }
}

/// Removes `floor(ratio · live tokens)` tokens.
pub fn select_tokens(report: &ImportanceReport, ratio: f64, rule: SelectionRule, seed: u64) -> Result<MaskSelection> {
    check_ratio(ratio)?;
    let (m, k) = (report.tokens(), report.pieces());
    let live: Vec<(usize, f64)> = (0..m)
        .filter(|&i| !report.token_pruned[i])
        .map(|i| (i, report.token_scores[i]))
        .collect();
    let removed = choose(&live, removal_count(ratio, live.len()), rule, seed);
    let mut sel = MaskSelection {
        tokens: m,
        pieces: k,
        kept_tokens: BTreeSet::new(),
        kept_pieces: BTreeMap::new(),
        token_ratio: ratio,
        piece_ratio: 0.0,
    };
    for &(i, _) in &live {
        if removed.contains(&i) {
            continue;
        }
        let ps: BTreeSet<usize> = (0..k).filter(|&c| !report.cell_pruned(i, c)).collect();
        sel.kept_tokens.insert(i);
        sel.kept_pieces.insert(i, ps);
    }
    Ok(sel)
}

/// Removes `floor(ratio · live cells)` (token, piece) cells, pooled across
/// all live tokens. Tokens left without pieces are dropped.
pub fn select_pieces(report: &ImportanceReport, ratio: f64, rule: SelectionRule, seed: u64) -> Result<MaskSelection> {
    check_ratio(ratio)?;
    let (m, k) = (report.tokens(), report.pieces());
    let live: Vec<(usize, f64)> = (0..m * k)
        .filter(|&idx| !report.cell_pruned(idx / k, idx % k))
        .map(|idx| (idx, report.piece_scores.data()[idx]))
        .collect();
    let removed = choose(&live, removal_count(ratio, live.len()), rule, seed);
    let mut sel = MaskSelection {
        tokens: m,
        pieces: k,
        kept_tokens: BTreeSet::new(),
        kept_pieces: BTreeMap::new(),
        token_ratio: 0.0,
        piece_ratio: ratio,
    };
    for &(idx, _) in &live {
        if removed.contains(&idx) {
            continue;
        }
        let (t, c) = (idx / k, idx % k);
        sel.kept_tokens.insert(t);
        sel.kept_pieces.entry(t).or_default().insert(c);
    }
    Ok(sel)
}

/// Rewinds surviving entries to their post-tuning values, installs the
/// selection's masks and resets the optimizer.
pub fn rewind(bank: &mut PromptBank, selection: &MaskSelection, opt: &mut OptimizerState) -> Result<()> {
    bank.restore_snapshot()?;
    selection.apply(bank)?;
    opt.reset();
    Ok(())
}

/// Shared settings for scoring and retraining inside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneContext {
    pub optimizer: OptimizerConfig,
    pub retrain: TuneConfig,
    pub aggregation: Aggregation,
    pub score_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub token_ratios: Vec<f64>,
    pub piece_ratios: Vec<f64>,
    pub selection: SelectionRule,
    pub seed: u64,
}

impl PruneSchedule {
    /// The 10%..90% grid on both levels.
    pub fn linear_grid(selection: SelectionRule, seed: u64) -> Self {
        let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        Self {
            token_ratios: grid.clone(),
            piece_ratios: grid,
            selection,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_ratios.is_empty() || self.piece_ratios.is_empty() {
            return Err(Error::config("pruning grid is empty"));
        }
        for &r in self.token_ratios.iter().chain(&self.piece_ratios) {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("grid ratio {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.token_ratios
            .iter()
            .flat_map(|&t| self.piece_ratios.iter().map(move |&p| (t, p)))
            .collect()
    }
}

/// Result of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub token_ratio: f64,
    pub piece_ratio: f64,
    pub selection: MaskSelection,
    pub dev_acc: f64,
    pub retrain: TuneResult,
}

impl CellOutcome {
    pub fn kept_parameters(&self, e: usize) -> usize {
        self.selection.kept_cell_count() * (e / self.selection.pieces)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestConfig {
    pub selection: MaskSelection,
    pub dev_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub best: BestConfig,
    pub cells: Vec<CellOutcome>,
    /// Token scores on the tuned, unmasked prompt.
    pub token_report: ImportanceReport,
    /// Piece scores recomputed on the survivors of the best cell.
    pub piece_report: ImportanceReport,
}

fn seed_for(seed: u64, token_ratio: f64, level: u64) -> u64 {
    seed ^ token_ratio.to_bits().rotate_left(17) ^ level.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Token pruning then piece rescoring for one token ratio.
fn token_stage(
    base: &PromptBank,
    bb: &FrozenBackbone,
    train: &[Example],
    token_report: &ImportanceReport,
    token_ratio: f64,
    rule: SelectionRule,
    seed: u64,
    ctx: &PruneContext,
) -> Result<ImportanceReport> {
    let sel = select_tokens(token_report, token_ratio, rule, seed_for(seed, token_ratio, 1))?;
    let mut b = base.clone();
    sel.apply(&mut b)?;
    score_pieces(&b, bb, train, ctx.aggregation, ctx.score_batch_size)
}

/// Piece selection, rewinding and retraining for one grid cell.
fn finish_cell(
    base: &PromptBank,
    bb: &FrozenBackbone,
    train: &[Example],
    dev: &[Example],
    piece_report: &ImportanceReport,
    (token_ratio, piece_ratio): (f64, f64),
    rule: SelectionRule,
    seed: u64,
    ctx: &PruneContext,
) -> Result<(PromptBank, CellOutcome)> {
    let mut selection = select_pieces(
        piece_report,
        piece_ratio,
        rule,
        seed_for(seed, token_ratio, 2) ^ piece_ratio.to_bits(),
    )?;
    selection.token_ratio = token_ratio;
    let mut b = base.clone();
    let mut opt = new_optimizer(ctx.optimizer, &b)?;
    rewind(&mut b, &selection, &mut opt)?;
    let retrain = tune(&mut b, bb, train, dev, &ctx.retrain, &mut opt)?;
    debug!(
        "cell ({token_ratio:.2}, {piece_ratio:.2}) {rule:?}: kept {} cells, dev {:.4}",
        selection.kept_cell_count(),
        retrain.best_dev_acc
    );
    Ok((
        b,
        CellOutcome {
            token_ratio,
            piece_ratio,
            dev_acc: retrain.best_dev_acc,
            selection,
            retrain,
        },
    ))
}

/// Prepares a tuned bank for pruning: snapshot values, all-ones masks.
fn pruning_base(bank: &PromptBank) -> Result<PromptBank> {
    let mut base = bank.clone();
    base.restore_snapshot()?;
    base.reset_masks();
    Ok(base)
}

/// One full cell: score, select tokens, rescore, select pieces, rewind,
/// retrain. Used by the grid and by the Reversed/Random baselines.
pub fn run_cell(
    bank: &PromptBank,
    bb: &FrozenBackbone,
    train: &[Example],
    dev: &[Example],
    ratios: (f64, f64),
    rule: SelectionRule,
    seed: u64,
    ctx: &PruneContext,
) -> Result<(PromptBank, CellOutcome)> {
    let base = pruning_base(bank)?;
    let r1 = score_tokens(&base, bb, train, ctx.aggregation, ctx.score_batch_size)?;
    let r2 = token_stage(&base, bb, train, &r1, ratios.0, rule, seed, ctx)?;
    finish_cell(&base, bb, train, dev, &r2, ratios, rule, seed, ctx)
}

/// Searches the (token ratio, piece ratio) grid and leaves `bank` in the
/// best configuration, retrained. Ties on dev accuracy prefer fewer kept
/// parameters, then smaller ratios.
pub fn hierarchical_prune(
    bank: &mut PromptBank,
    bb: &FrozenBackbone,
    train: &[Example],
    dev: &[Example],
    sched: &PruneSchedule,
    ctx: &PruneContext,
    jobs: usize,
) -> Result<PruneOutcome> {
    sched.validate()?;
    if bank.snapshot().is_none() {
        return Err(Error::state("hierarchical pruning needs a post-tuning snapshot"));
    }
    let hash = bb.weights_hash();
    let base = pruning_base(bank)?;
    let token_report = score_tokens(&base, bb, train, ctx.aggregation, ctx.score_batch_size)?;

    let piece_reports: Vec<ImportanceReport> = sched
        .token_ratios
        .iter()
        .map(|&tr| token_stage(&base, bb, train, &token_report, tr, sched.selection, sched.seed, ctx))
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, (f64, f64))> = sched
        .token_ratios
        .iter()
        .enumerate()
        .flat_map(|(ti, &t)| sched.piece_ratios.iter().map(move |&p| (ti, (t, p))))
        .collect();
    let run = |&(ti, ratios): &(usize, (f64, f64))| {
        finish_cell(
            &base,
            bb,
            train,
            dev,
            &piece_reports[ti],
            ratios,
            sched.selection,
            sched.seed,
            ctx,
        )
    };
    let results: Vec<(PromptBank, CellOutcome)> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect::<Result<_>>())?
    } else {
        cells.iter().map(run).collect::<Result<_>>()?
    };

    let e = bank.width();
    let mut best_idx = 0;
    for (i, (_, c)) in results.iter().enumerate().skip(1) {
        let b = &results[best_idx].1;
        let better = c.dev_acc > b.dev_acc
            || (c.dev_acc == b.dev_acc
                && (c.kept_parameters(e), c.token_ratio, c.piece_ratio)
                    < (b.kept_parameters(e), b.token_ratio, b.piece_ratio));
        if better {
            best_idx = i;
        }
    }
    let best_ti = cells[best_idx].0;
    let piece_report = piece_reports[best_ti].clone();
    let mut results = results;
    let (best_bank, _) = results[best_idx].clone();
    *bank = best_bank;
    let cells: Vec<CellOutcome> = results.drain(..).map(|(_, c)| c).collect();
    let best = BestConfig {
        selection: cells[best_idx].selection.clone(),
        dev_acc: cells[best_idx].dev_acc,
    };
    if bb.weights_hash() != hash {
        return Err(Error::state("backbone weights changed during pruning"));
    }
    info!(
        "best cell ({:.2}, {:.2}): dev {:.4}, {} of {} cells kept",
        cells[best_idx].token_ratio,
        cells[best_idx].piece_ratio,
        best.dev_acc,
        best.selection.kept_cell_count(),
        bank.len() * bank.pieces()
    );
    Ok(PruneOutcome {
        best,
        cells,
        token_report,
        piece_report,
    })
}

/// Post-hoc token masking of a tuned prompt without rewinding or
/// retraining; returns dev accuracy. `LowestScore` gives negative-prompt
/// masking, `Random` the random-masking control.
pub fn baseline_token_masking(
    bank: &PromptBank,
    bb: &FrozenBackbone,
    train: &[Example],
    dev: &[Example],
    ratio: f64,
    rule: SelectionRule,
    seed: u64,
    ctx: &PruneContext,
) -> Result<f64> {
    check_ratio(ratio)?;
    let mut b = bank.clone();
    let report = score_tokens(&b, bb, train, ctx.aggregation, ctx.score_batch_size)?;
    let sel = select_tokens(&report, ratio, rule, seed)?;
    sel.apply(&mut b)?;
    evaluate(&b, bb, dev)
}

pub fn baseline_negative_masking(
    bank: &PromptBank,
    bb: &FrozenBackbone,
    train: &[Example],
    dev: &[Example],
    ratio: f64,
    ctx: &PruneContext,
) -> Result<f64> {
    baseline_token_masking(bank, bb, train, dev, ratio, SelectionRule::LowestScore, 0, ctx)
}

/// A fresh prompt of `m_kept` tokens tuned from scratch.
#[allow(clippy::too_many_arguments)]
pub fn baseline_length_prompt(
    m_kept: usize,
    m: usize,
    k: usize,
    init: &InitStrategy,
    bb: &FrozenBackbone,
    train: &[Example],
    dev: &[Example],
    optimizer: OptimizerConfig,
    tune_cfg: &TuneConfig,
) -> Result<TuneResult> {
    if m_kept == 0 || m_kept > m {
        return Err(Error::range(format!(
            "length prompt of {m_kept} tokens outside 1..={m}"
        )));
    }
    let mut bank = PromptBank::init(m_kept, bb.config().embed_dim, k, init, bb)?;
    let mut opt = new_optimizer(optimizer, &bank)?;
    tune(&mut bank, bb, train, dev, tune_cfg, &mut opt)
}
