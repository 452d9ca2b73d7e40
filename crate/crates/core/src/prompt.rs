//! The soft prompt bank, its token and piece masks, initialisation, and the
//! prompt-tuning loop.

use std::fs;
use std::path::Path;

use log::debug;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, FrozenBackbone};
use crate::error::{Error, Result};
use crate::manifest::{parse_flags, read_blob, render_flags, write_blob, Manifest};
use crate::numkernel::{Graph, Matrix, NodeId};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tasks::Example;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    SampledVocab,
    RandomUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitStrategy {
    pub kind: InitKind,
    pub uniform_bound: f64,
    pub seed: u64,
}

impl InitStrategy {
    pub fn sampled_vocab(seed: u64) -> Self {
        Self {
            kind: InitKind::SampledVocab,
            uniform_bound: 0.5,
            seed,
        }
    }

    pub fn random_uniform(bound: f64, seed: u64) -> Self {
        Self {
            kind: InitKind::RandomUniform,
            uniform_bound: bound,
            seed,
        }
    }
}

/// Soft prompt `m × e` with a token mask `γ` (m flags) and a piece mask
/// `ζ` (m × k flags).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    embeddings: Matrix,
    token_mask: Vec<bool>,
    piece_mask: Vec<bool>,
    pieces: usize,
    snapshot: Option<Matrix>,
}

/// Graph handles produced by [`PromptBank::bind`].
#[derive(Debug, Clone, Copy)]
pub struct BoundPrompt {
    /// Masked prompt rows fed to the backbone.
    pub output: NodeId,
    pub embeddings: NodeId,
    pub gamma: NodeId,
    pub zeta: NodeId,
}

/// What should be differentiable when binding a prompt into a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptGrad {
    /// Gradients for the embeddings (tuning).
    Embeddings,
    /// Gradients for `γ` and `ζ` (importance scoring).
    Masks,
    None,
}

impl PromptBank {
    pub fn init(m: usize, e: usize, k: usize, strat: &InitStrategy, bb: &FrozenBackbone) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("prompt length must be at least 1"));
        }
        if k == 0 || !e.is_multiple_of(k) {
            return Err(Error::Divisibility {
                what: "prompt width e by piece count k",
                numerator: e,
                divisor: k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(strat.seed);
        let embeddings = match strat.kind {
            InitKind::SampledVocab => {
                let table = bb.token_embeddings();
                if table.cols() != e {
                    return Err(Error::Dimension {
                        op: "sampled vocabulary init",
                        lhs: (m, e),
                        rhs: table.shape(),
                    });
                }
                if m > table.rows() {
                    return Err(Error::Capacity {
                        requested: m,
                        available: table.rows(),
                    });
                }
                let rows = index::sample(&mut rng, table.rows(), m);
                let mut p = Matrix::zeros(m, e);
                for (i, r) in rows.into_iter().enumerate() {
                    p.row_mut(i).copy_from_slice(table.row(r));
                }
                p
            }
            InitKind::RandomUniform => {
                let b = strat.uniform_bound;
                if !(b > 0.0 && b.is_finite()) {
                    return Err(Error::config(format!("uniform bound must be positive, got {b}")));
                }
                let data = (0..m * e).map(|_| rng.random_range(-b..b)).collect();
                Matrix::from_vec(m, e, data)?
            }
        };
        Self::from_parts(embeddings, k)
    }

    /// All-ones masks over the given embeddings.
    pub fn from_parts(embeddings: Matrix, k: usize) -> Result<Self> {
        let (m, e) = embeddings.shape();
        if k == 0 || e % k != 0 {
            return Err(Error::Divisibility {
                what: "prompt width e by piece count k",
                numerator: e,
                divisor: k,
            });
        }
        Ok(Self {
            embeddings,
            token_mask: vec![true; m],
            piece_mask: vec![true; m * k],
            pieces: k,
            snapshot: None,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn pieces(&self) -> usize {
        self.pieces
    }

    pub fn piece_width(&self) -> usize {
        self.width() / self.pieces
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Matrix {
        &mut self.embeddings
    }

    pub fn snapshot(&self) -> Option<&Matrix> {
        self.snapshot.as_ref()
    }

    pub fn token_mask(&self) -> &[bool] {
        &self.token_mask
    }

    pub fn piece_mask(&self) -> &[bool] {
        &self.piece_mask
    }

    pub fn piece_live(&self, token: usize, piece: usize) -> bool {
        self.piece_mask[token * self.pieces + piece]
    }

    /// Piece is live and its token is live.
    pub fn cell_live(&self, token: usize, piece: usize) -> bool {
        self.token_mask[token] && self.piece_live(token, piece)
    }

    pub fn set_masks(&mut self, token_mask: Vec<bool>, piece_mask: Vec<bool>) -> Result<()> {
        if token_mask.len() != self.len() || piece_mask.len() != self.len() * self.pieces {
            return Err(Error::Dimension {
                op: "set_masks",
                lhs: (self.len(), self.pieces),
                rhs: (token_mask.len(), piece_mask.len()),
            });
        }
        self.token_mask = token_mask;
        self.piece_mask = piece_mask;
        Ok(())
    }

    pub fn reset_masks(&mut self) {
        self.token_mask.iter_mut().for_each(|f| *f = true);
        self.piece_mask.iter_mut().for_each(|f| *f = true);
    }

    pub fn gamma(&self) -> Matrix {
        let data = self.token_mask.iter().map(|&f| f as u8 as f64).collect();
        Matrix::from_vec(self.len(), 1, data).expect("shape")
    }

    pub fn zeta(&self) -> Matrix {
        let data = self.piece_mask.iter().map(|&f| f as u8 as f64).collect();
        Matrix::from_vec(self.len(), self.pieces, data).expect("shape")
    }

    /// Per-entry 0/1 mask `γ_i · ζ_{i, j / w}`.
    pub fn entry_mask(&self) -> Matrix {
        let (m, e, w) = (self.len(), self.width(), self.piece_width());
        let mut out = Matrix::zeros(m, e);
        for i in 0..m {
            for j in 0..e {
                if self.cell_live(i, j / w) {
                    out.set(i, j, 1.0);
                }
            }
        }
        out
    }

    /// Number of live (token, piece) cells.
    pub fn live_cells(&self) -> usize {
        (0..self.len())
            .map(|i| (0..self.pieces).filter(|&c| self.cell_live(i, c)).count())
            .sum()
    }

    pub fn live_tokens(&self) -> usize {
        self.token_mask.iter().filter(|&&f| f).count()
    }

    /// The masked prompt as the graph computes it, without a graph.
    pub fn effective_matrix(&self) -> Matrix {
        let (gamma, zeta, w) = (self.gamma(), self.zeta(), self.piece_width());
        let mut out = self.embeddings.clone();
        for i in 0..out.rows() {
            let gi = gamma.get(i, 0);
            let zr = zeta.row(i).to_vec();
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v * gi) * zr[j / w];
            }
        }
        out
    }

    /// `blockwise_scale(rowwise_scale(P, γ), ζ)` with the masks as graph
    /// leaves.
    pub fn bind(&self, g: &mut Graph, grad: PromptGrad) -> Result<BoundPrompt> {
        let embeddings = match grad {
            PromptGrad::Embeddings => g.param(self.embeddings.clone()),
            _ => g.constant(self.embeddings.clone()),
        };
        let (gamma, zeta) = match grad {
            PromptGrad::Masks => (g.param(self.gamma()), g.param(self.zeta())),
            _ => (g.constant(self.gamma()), g.constant(self.zeta())),
        };
        let rows = g.rowwise_scale(embeddings, gamma)?;
        let output = g.blockwise_scale(rows, zeta)?;
        Ok(BoundPrompt {
            output,
            embeddings,
            gamma,
            zeta,
        })
    }

    pub fn take_snapshot(&mut self) {
        self.snapshot = Some(self.embeddings.clone());
    }

    /// Copies the snapshot back into the embeddings; masks are untouched.
    pub fn restore_snapshot(&mut self) -> Result<()> {
        let snap = self
            .snapshot
            .as_ref()
            .ok_or_else(|| Error::state("no snapshot to restore"))?;
        self.embeddings = snap.clone();
        Ok(())
    }

    pub fn save(&self, dir: &Path, stage: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut man = Manifest::new();
        man.set("format", "xprompt-prompt-v1");
        man.set("m", self.len());
        man.set("e", self.width());
        man.set("k", self.pieces);
        man.set("stage", stage);
        man.set("token_mask", render_flags(self.token_mask.iter().copied()));
        for i in 0..self.len() {
            let row = &self.piece_mask[i * self.pieces..(i + 1) * self.pieces];
            man.set(format!("piece_mask.{i}"), render_flags(row.iter().copied()));
        }
        man.set("has_snapshot", self.snapshot.is_some());
        write_blob(dir, &mut man, "prompt", &self.embeddings)?;
        if let Some(s) = &self.snapshot {
            write_blob(dir, &mut man, "snapshot", s)?;
        }
        man.write(&dir.join("manifest.txt"))
    }

    /// Loads a checkpoint, returning the bank and its stage tag.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let man = Manifest::read(&dir.join("manifest.txt"))?;
        if man.require("format")? != "xprompt-prompt-v1" {
            return Err(Error::data("not a prompt checkpoint"));
        }
        let (m, e, k): (usize, usize, usize) = (man.parse("m")?, man.parse("e")?, man.parse("k")?);
        let embeddings = read_blob(dir, &man, "prompt")?;
        if embeddings.shape() != (m, e) {
            return Err(Error::data("prompt blob shape disagrees with manifest"));
        }
        let mut bank = Self::from_parts(embeddings, k)?;
        let token_mask = parse_flags(man.require("token_mask")?)?;
        let mut piece_mask = Vec::with_capacity(m * k);
        for i in 0..m {
            let row = parse_flags(man.require(&format!("piece_mask.{i}"))?)?;
            if row.len() != k {
                return Err(Error::data(format!(
                    "piece_mask.{i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            piece_mask.extend(row);
        }
        bank.set_masks(token_mask, piece_mask)?;
        if man.parse::<bool>("has_snapshot")? {
            let snap = read_blob(dir, &man, "snapshot")?;
            if snap.shape() != (m, e) {
                return Err(Error::data("snapshot blob shape disagrees with manifest"));
            }
            bank.snapshot = Some(snap);
        }
        Ok((bank, man.require("stage")?.to_string()))
    }
}

/// Settings of one tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best_dev_acc: f64,
    pub initial_dev_acc: f64,
    /// 0 means the untuned prompt was never beaten.
    pub best_epoch: usize,
    pub steps: usize,
    /// Mean training loss of every optimizer step, in order.
    pub losses: Vec<f64>,
    /// Dev accuracy after each epoch, starting with the untuned prompt.
    pub dev_curve: Vec<f64>,
}

/// Mean cross-entropy of one batch and the graph it was computed on.
pub fn batch_loss(
    bank: &PromptBank,
    bb: &FrozenBackbone,
    batch: &[&Example],
    grad: PromptGrad,
) -> Result<(Graph, BoundPrompt, f64, NodeId)> {
    let mut g = Graph::new();
    let bound_bb = bb.bind(&mut g)?;
    let prompt = bank.bind(&mut g, grad)?;
    let mut logits: Option<NodeId> = None;
    for ex in batch {
        let out = bound_bb.forward_with_prompt(&mut g, Some(prompt.output), &ex.tokens)?;
        logits = Some(match logits {
            None => out,
            Some(prev) => g.concat_rows(prev, out)?,
        });
    }
    let logits = logits.ok_or_else(|| Error::data("empty batch"))?;
    let labels: Vec<usize> = batch.iter().map(|ex| ex.label).collect();
    let loss = g.softmax_cross_entropy(logits, &labels)?;
    Ok((g, prompt, loss.value, loss.node))
}

/// Accuracy of the masked prompt on `data`.
pub fn evaluate(bank: &PromptBank, bb: &FrozenBackbone, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let prompt = bank.effective_matrix();
    let hits: Vec<bool> = data
        .par_iter()
        .map(|ex| Ok(bb.predict(Some(&prompt), &ex.tokens)? == ex.label))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

pub fn predict_all(bank: &PromptBank, bb: &FrozenBackbone, data: &[Example]) -> Result<Vec<usize>> {
    let prompt = bank.effective_matrix();
    data.iter()
        .map(|ex| Ok(argmax(bb.logits(Some(&prompt), &ex.tokens)?.data())))
        .collect()
}

pub fn new_optimizer(cfg: OptimizerConfig, bank: &PromptBank) -> Result<OptimizerState> {
    OptimizerState::new(cfg, bank.embeddings.shape(), bank.pieces)
}

/// Prompt tuning. Only live entries of the prompt move; the best dev
/// checkpoint (earliest on ties, including the untuned prompt) is left in
/// the bank.
pub fn tune(
    bank: &mut PromptBank,
    bb: &FrozenBackbone,
    train: &[Example],
    dev: &[Example],
    cfg: &TuneConfig,
    opt: &mut OptimizerState,
) -> Result<TuneResult> {
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    if bb.config().embed_dim != bank.width() {
        return Err(Error::Dimension {
            op: "tune (prompt width vs backbone)",
            lhs: bank.embeddings.shape(),
            rhs: (bb.config().vocab_size, bb.config().embed_dim),
        });
    }
    let batch_size = cfg.batch_size.max(1);
    let mask = bank.entry_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let initial = evaluate(bank, bb, dev)?;
    let mut best = (initial, 0usize, bank.embeddings.clone());
    let mut losses = Vec::new();
    let mut dev_curve = vec![initial];

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (g, prompt, loss, node) = batch_loss(bank, bb, &batch, PromptGrad::Embeddings)?;
            let mut g = g;
            g.backward(node)?;
            let grad = g.grad_or_zeros(prompt.embeddings);
            drop(g);
            opt.step(&mut bank.embeddings, &grad, Some(&mask))?;
            losses.push(loss);
        }
        let acc = evaluate(bank, bb, dev)?;
        debug!("epoch {epoch}: dev accuracy {acc:.4}");
        dev_curve.push(acc);
        if acc > best.0 {
            best = (acc, epoch, bank.embeddings.clone());
        }
    }
    bank.embeddings = best.2;
    Ok(TuneResult {
        best_dev_acc: best.0,
        initial_dev_acc: initial,
        best_epoch: best.1,
        steps: losses.len(),
        losses,
        dev_curve,
    })
}
