//! The frozen mini-transformer encoder with a classifier head.
//!
//! Layout (post-norm residual blocks, no embedding norm):
//!
//! ```text
//! x   = sqrt(e)·tok[ids] + pos[0..n]
//! h   = [sqrt(e)·prompt; x]
//! per layer:
//!   h = LN1(h + Attn(h Wq, h Wk, h Wv) Wo)
//!   h = LN2(h + W2·gelu(h W1 + b1) + b2)
//! logits = mean(h[m..m+n]) Whead + bhead
//! ```
//!
//! Prompt rows enter the first attention block unnormalised, so scaling a
//! prompt row scales its keys and values and the mask derivative is
//! informative.
//!
//! Pretraining uses masked-token prediction through the tied token
//! embeddings. It can also mix in supervised tasks, each announced by a cue
//! token placed in a single prompt slot, which trains the classifier head
//! and leaves the encoder with skills a tuned prompt can call up later.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::manifest::{read_blob, write_blob, Manifest};
use crate::numkernel::{Graph, LossScalar, Matrix, NodeId};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tasks::Example;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_seq_len: 64,
            num_classes: 2,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::config(format!(
                "vocab_size must be at least 8, got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::config("layers, ffn_dim and max_seq_len must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Token id reserved for masked-token pretraining.
    pub fn mask_token(&self) -> usize {
        self.vocab_size - 1
    }

    /// Checks compatibility with a prompt of `m` rows split into `k` pieces
    /// and inputs of up to `n` tokens.
    pub fn check_prompt_fit(&self, m: usize, k: usize, n: usize) -> Result<()> {
        if k == 0 || !self.embed_dim.is_multiple_of(k) {
            return Err(Error::Divisibility {
                what: "embed_dim by piece count",
                numerator: self.embed_dim,
                divisor: k,
            });
        }
        if m + n > self.max_seq_len {
            return Err(Error::Length {
                len: m + n,
                max: self.max_seq_len,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln1_gain: Matrix,
    ln1_bias: Matrix,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
    ln2_gain: Matrix,
    ln2_bias: Matrix,
}

const LAYER_FIELDS: [&str; 12] = [
    "wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias", "w1", "b1", "w2", "b2", "ln2_gain", "ln2_bias",
];

impl LayerWeights {
    fn fields(&self) -> [&Matrix; 12] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// Backbone weights plus the frozen flag. Weights are only reachable through
/// shared references once frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    cfg: BackboneConfig,
    token_embeddings: Matrix,
    position_embeddings: Matrix,
    layers: Vec<LayerWeights>,
    head: Matrix,
    head_bias: Matrix,
    frozen: bool,
}

/// Node handles for every weight after binding a backbone into a graph.
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    tok: NodeId,
    pos: NodeId,
    layers: Vec<[NodeId; 12]>,
    head: NodeId,
    head_bias: NodeId,
    heads: usize,
    max_seq_len: usize,
    tok_width: usize,
}

impl BoundBackbone {
    /// Every weight node in the canonical order of [`FrozenBackbone::named_weights`].
    pub fn weight_nodes(&self) -> Vec<NodeId> {
        let mut out = vec![self.tok, self.pos];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.push(self.head);
        out.push(self.head_bias);
        out
    }

    /// Runs the encoder over `[prompt; embed(ids)]`, returning the final
    /// hidden states (m + n rows).
    pub fn encode(&self, g: &mut Graph, prompt: Option<NodeId>, ids: &[usize]) -> Result<NodeId> {
        let m = prompt.map_or(0, |p| g.shape(p).0);
        if ids.is_empty() {
            return Err(Error::data("empty input sequence"));
        }
        if m + ids.len() > self.max_seq_len {
            return Err(Error::Length {
                len: m + ids.len(),
                max: self.max_seq_len,
            });
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let scale = (self.tok_width as f64).sqrt();
        let tok = g.embedding_lookup(self.tok, ids)?;
        let tok = g.scale(tok, scale)?;
        let pos = g.embedding_lookup(self.pos, &positions)?;
        let x = g.add(tok, pos)?;
        let mut h = match prompt {
            Some(p) if m > 0 => {
                let p = g.scale(p, scale)?;
                g.concat_rows(p, x)?
            }
            _ => x,
        };
        for l in &self.layers {
            let [wq, wk, wv, wo, ln1g, ln1b, w1, b1, w2, b2, ln2g, ln2b] = *l;
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let att = g.attention(q, k, v, self.heads)?;
            let att = g.matmul(att, wo)?;
            let res = g.add(h, att)?;
            h = g.layer_norm(res, ln1g, ln1b)?;
            let f = g.matmul(h, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, b2)?;
            let res = g.add(h, f)?;
            h = g.layer_norm(res, ln2g, ln2b)?;
        }
        Ok(h)
    }

    /// Class logits (1×C) for one example, pooling only the input positions.
    pub fn forward_with_prompt(&self, g: &mut Graph, prompt: Option<NodeId>, ids: &[usize]) -> Result<NodeId> {
        let m = prompt.map_or(0, |p| g.shape(p).0);
        let h = self.encode(g, prompt, ids)?;
        let pooled = g.mean_rows(h, m, m + ids.len())?;
        let logits = g.matmul(pooled, self.head)?;
        g.add_row(logits, self.head_bias)
    }

    /// Vocabulary logits for selected rows through the tied embeddings.
    pub fn token_logits(&self, g: &mut Graph, hidden: NodeId, rows: &[usize]) -> Result<NodeId> {
        let picked = g.gather_rows(hidden, rows)?;
        g.matmul_bt(picked, self.tok)
    }
}

/// A supervised task mixed into pretraining. Each example is encoded with
/// the embedding of `cue` in the single prompt slot, so a tuned prompt can
/// later recover the skill without the cue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuedTask {
    pub cue: usize,
    pub examples: Vec<Example>,
}

/// Masked-token pretraining settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-3,
            batch_size: 16,
            mask_prob: 0.15,
            seed: 0,
        }
    }
}

impl FrozenBackbone {
    /// Fresh, unfrozen weights drawn from N(0, 0.02²); norm gains start at 1
    /// and biases at 0.
    pub fn init(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_vec(r, c, data).expect("shape")
        };
        let e = cfg.embed_dim;
        let token_embeddings = draw(cfg.vocab_size, e);
        let position_embeddings = draw(cfg.max_seq_len, e);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                wq: draw(e, e),
                wk: draw(e, e),
                wv: draw(e, e),
                wo: draw(e, e),
                ln1_gain: Matrix::ones(1, e),
                ln1_bias: Matrix::zeros(1, e),
                w1: draw(e, cfg.ffn_dim),
                b1: Matrix::zeros(1, cfg.ffn_dim),
                w2: draw(cfg.ffn_dim, e),
                b2: Matrix::zeros(1, e),
                ln2_gain: Matrix::ones(1, e),
                ln2_bias: Matrix::zeros(1, e),
            })
            .collect();
        let head = draw(e, cfg.num_classes);
        Ok(Self {
            cfg: cfg.clone(),
            token_embeddings,
            position_embeddings,
            layers,
            head,
            head_bias: Matrix::zeros(1, cfg.num_classes),
            frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn token_embeddings(&self) -> &Matrix {
        &self.token_embeddings
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    /// All weights in a fixed canonical order.
    pub fn named_weights(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embeddings".to_string(), &self.token_embeddings),
            ("position_embeddings".to_string(), &self.position_embeddings),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in LAYER_FIELDS.iter().zip(l.fields()) {
                out.push((format!("layer{i}.{name}"), m));
            }
        }
        out.push(("head".to_string(), &self.head));
        out.push(("head_bias".to_string(), &self.head_bias));
        out
    }

    fn weights_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embeddings, &mut self.position_embeddings];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.head);
        out.push(&mut self.head_bias);
        out
    }

    /// SHA-256 over names, shapes and little-endian bytes of every weight.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.named_weights() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            h.update(m.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Binds the weights as constants; the backbone must be frozen.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundBackbone> {
        if !self.frozen {
            return Err(Error::state("backbone must be frozen before prompt conditioning"));
        }
        Ok(self.bind_with(g, false))
    }

    /// Binds the weights, as differentiable leaves when `trainable`.
    pub fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundBackbone {
        let mut leaf = |m: &Matrix| {
            if trainable {
                g.param(m.clone())
            } else {
                g.constant(m.clone())
            }
        };
        let tok = leaf(&self.token_embeddings);
        let pos = leaf(&self.position_embeddings);
        let layers = self.layers.iter().map(|l| l.fields().map(&mut leaf)).collect();
        let head = leaf(&self.head);
        let head_bias = leaf(&self.head_bias);
        BoundBackbone {
            tok,
            pos,
            layers,
            head,
            head_bias,
            heads: self.cfg.heads,
            tok_width: self.cfg.embed_dim,
            max_seq_len: self.cfg.max_seq_len,
        }
    }

    /// Logits for one example under a fixed (already masked) prompt matrix.
    pub fn logits(&self, prompt: Option<&Matrix>, ids: &[usize]) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let p = prompt.filter(|p| p.rows() > 0).map(|p| g.constant(p.clone()));
        let out = bound.forward_with_prompt(&mut g, p, ids)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, prompt: Option<&Matrix>, ids: &[usize]) -> Result<usize> {
        let logits = self.logits(prompt, ids)?;
        Ok(argmax(logits.data()))
    }

    /// Masked-token pretraining followed by freezing. Returns the per-step
    /// loss log.
    pub fn pretrain(&mut self, corpus: &[Vec<usize>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
        self.pretrain_with_tasks(corpus, &[], cfg)
    }

    /// Masked-token pretraining plus, when `tasks` is non-empty, one
    /// classification batch per step from the tasks in rotation. The logged
    /// loss is the sum of both terms.
    pub fn pretrain_with_tasks(
        &mut self,
        corpus: &[Vec<usize>],
        tasks: &[CuedTask],
        cfg: &PretrainConfig,
    ) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::state("backbone is already frozen"));
        }
        for t in tasks {
            if t.cue >= self.cfg.mask_token() {
                return Err(Error::data(format!(
                    "cue token {} is not a regular vocabulary entry",
                    t.cue
                )));
            }
            if t.examples.is_empty() {
                return Err(Error::data(format!("cued task {} has no examples", t.cue)));
            }
            for ex in &t.examples {
                ex.validate(self.cfg.mask_token(), self.cfg.num_classes)?;
                if ex.tokens.len() + 1 > self.cfg.max_seq_len {
                    return Err(Error::Length {
                        len: ex.tokens.len() + 1,
                        max: self.cfg.max_seq_len,
                    });
                }
            }
        }
        if cfg.steps > 0 && corpus.is_empty() {
            return Err(Error::data("empty pretraining corpus"));
        }
        let mask_token = self.cfg.mask_token();
        for seq in corpus {
            if seq.is_empty() || seq.len() > self.cfg.max_seq_len {
                return Err(Error::data(format!(
                    "pretraining sequence of length {} outside 1..={}",
                    seq.len(),
                    self.cfg.max_seq_len
                )));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= mask_token) {
                return Err(Error::data(format!(
                    "pretraining token {t} collides with the mask token {mask_token}"
                )));
            }
        }

        let opt_cfg = OptimizerConfig::adam(cfg.learning_rate);
        let mut opts = self
            .named_weights()
            .iter()
            .map(|(_, m)| OptimizerState::new(opt_cfg, m.shape(), 1))
            .collect::<Result<Vec<_>>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut cursor = order.len();
        let mut log = Vec::with_capacity(cfg.steps);

        for step in 0..cfg.steps {
            let mut g = Graph::new();
            let bound = self.bind_with(&mut g, true);
            let mut picked = None;
            let mut targets = Vec::new();
            for _ in 0..cfg.batch_size.max(1) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let seq = &corpus[order[cursor]];
                cursor += 1;
                let mut input = seq.clone();
                let mut rows: Vec<usize> = (0..seq.len()).filter(|_| rng.random_bool(cfg.mask_prob)).collect();
                if rows.is_empty() {
                    rows.push(rng.random_range(0..seq.len()));
                }
                for &r in &rows {
                    input[r] = mask_token;
                    targets.push(seq[r]);
                }
                let h = bound.encode(&mut g, None, &input)?;
                let logits = bound.token_logits(&mut g, h, &rows)?;
                picked = Some(match picked {
                    None => logits,
                    Some(prev) => g.concat_rows(prev, logits)?,
                });
            }
            let mlm = g.softmax_cross_entropy(picked.expect("batch is non-empty"), &targets)?;
            let loss = if tasks.is_empty() {
                mlm
            } else {
                let task = &tasks[step % tasks.len()];
                let cue = g.embedding_lookup(bound.tok, &[task.cue])?;
                let mut logits = None;
                let mut labels = Vec::new();
                for _ in 0..cfg.batch_size.max(1) {
                    let ex = &task.examples[rng.random_range(0..task.examples.len())];
                    let out = bound.forward_with_prompt(&mut g, Some(cue), &ex.tokens)?;
                    logits = Some(match logits {
                        None => out,
                        Some(prev) => g.concat_rows(prev, out)?,
                    });
                    labels.push(ex.label);
                }
                let cls = g.softmax_cross_entropy(logits.expect("batch is non-empty"), &labels)?;
                let node = g.add(mlm.node, cls.node)?;
                LossScalar {
                    value: g.value(node).get(0, 0),
                    node,
                }
            };
            g.backward(loss.node)?;
            let grads: Vec<Matrix> = bound.weight_nodes().into_iter().map(|id| g.grad_or_zeros(id)).collect();
            drop(g);
            for ((w, grad), opt) in self.weights_mut().into_iter().zip(&grads).zip(&mut opts) {
                opt.step(w, grad, None)?;
            }
            debug!("pretrain step {step}: loss {:.6}", loss.value);
            log.push(loss.value);
        }
        if let (Some(first), Some(last)) = (log.first(), log.last()) {
            info!("pretraining loss {first:.4} -> {last:.4} over {} steps", log.len());
        }
        self.frozen = true;
        Ok(log)
    }

    /// Writes `manifest.txt` plus one `.f64` blob per weight matrix.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut man = Manifest::new();
        man.set("format", "xprompt-backbone-v1");
        man.set("vocab_size", self.cfg.vocab_size);
        man.set("embed_dim", self.cfg.embed_dim);
        man.set("layers", self.cfg.layers);
        man.set("heads", self.cfg.heads);
        man.set("ffn_dim", self.cfg.ffn_dim);
        man.set("max_seq_len", self.cfg.max_seq_len);
        man.set("num_classes", self.cfg.num_classes);
        man.set("seed", self.cfg.seed);
        man.set("frozen", self.frozen);
        man.set("weights_hash", self.weights_hash());
        for (name, m) in self.named_weights() {
            write_blob(dir, &mut man, &name, m)?;
        }
        man.write(&dir.join("manifest.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man = Manifest::read(&dir.join("manifest.txt"))?;
        if man.require("format")? != "xprompt-backbone-v1" {
            return Err(Error::data("not a backbone checkpoint"));
        }
        let cfg = BackboneConfig {
            vocab_size: man.parse("vocab_size")?,
            embed_dim: man.parse("embed_dim")?,
            layers: man.parse("layers")?,
            heads: man.parse("heads")?,
            ffn_dim: man.parse("ffn_dim")?,
            max_seq_len: man.parse("max_seq_len")?,
            num_classes: man.parse("num_classes")?,
            seed: man.parse("seed")?,
        };
        let mut bb = Self::init(&cfg)?;
        let names: Vec<String> = bb.named_weights().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(bb.weights_mut()) {
            let m = read_blob(dir, &man, name)?;
            if m.shape() != slot.shape() {
                return Err(Error::data(format!(
                    "weight '{name}' has shape {:?}, expected {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        bb.frozen = man.parse("frozen")?;
        if bb.weights_hash() != man.require("weights_hash")? {
            return Err(Error::data("backbone weights hash mismatch"));
        }
        Ok(bb)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
