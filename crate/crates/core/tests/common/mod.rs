#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xprompt_core::backbone::{BackboneConfig, FrozenBackbone, PretrainConfig};
use xprompt_core::numkernel::Matrix;
use xprompt_core::prompt::{InitStrategy, PromptBank};
use xprompt_core::tasks::{generate, markov_corpus, Example, GeneratorKind, TaskSpec};

pub fn micro_config(vocab: usize, e: usize, heads: usize, seed: u64) -> BackboneConfig {
    BackboneConfig {
        vocab_size: vocab,
        embed_dim: e,
        layers: 1,
        heads,
        ffn_dim: 2 * e,
        max_seq_len: 24,
        num_classes: 2,
        seed,
    }
}

/// A one-layer backbone briefly pretrained so its weights are not all tiny.
pub fn micro_backbone(e: usize, seed: u64) -> FrozenBackbone {
    let cfg = micro_config(16, e, 2, seed);
    let mut bb = FrozenBackbone::init(&cfg).unwrap();
    let corpus = markov_corpus(12, 64, 4, 8, seed).unwrap();
    let pc = PretrainConfig {
        steps: 30,
        learning_rate: 1e-2,
        batch_size: 4,
        mask_prob: 0.2,
        seed,
    };
    bb.pretrain(&corpus, &pc).unwrap();
    bb
}

pub fn task(kind: GeneratorKind, vocab: usize, train: usize, dev: usize, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let spec = TaskSpec {
        name: "t".into(),
        kind,
        vocab_size: vocab,
        num_classes: 2,
        min_len: 4,
        max_len: 8,
        train_size: train,
        dev_size: dev,
        seed,
    };
    let s = generate(&spec).unwrap();
    (s.train, s.dev)
}

pub fn random_bank(bb: &FrozenBackbone, m: usize, k: usize, seed: u64) -> PromptBank {
    let e = bb.config().embed_dim;
    PromptBank::init(m, e, k, &InitStrategy::random_uniform(0.5, seed), bb).unwrap()
}

/// `P` with row `i` scaled by `gamma[i]` and piece `(i, c)` by `zeta[i][c]`,
/// built entry by entry.
pub fn masked_prompt(p: &Matrix, gamma: &[f64], zeta: &Matrix) -> Matrix {
    let (m, e) = p.shape();
    let k = zeta.cols();
    let w = e / k;
    let mut out = Matrix::zeros(m, e);
    for i in 0..m {
        for j in 0..e {
            out.set(i, j, p.get(i, j) * gamma[i] * zeta.get(i, j / w));
        }
    }
    out
}

/// Mean cross-entropy of `batch` under an explicit prompt matrix, computed
/// from forward logits only.
pub fn forward_loss(bb: &FrozenBackbone, prompt: &Matrix, batch: &[Example]) -> f64 {
    let mut total = 0.0;
    for ex in batch {
        let logits = bb.logits(Some(prompt), &ex.tokens).unwrap();
        let z = logits.data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[ex.label];
    }
    total / batch.len() as f64
}

pub fn mask_loss(bb: &FrozenBackbone, p: &Matrix, gamma: &[f64], zeta: &Matrix, batch: &[Example]) -> f64 {
    forward_loss(bb, &masked_prompt(p, gamma, zeta), batch)
}

/// Central differences of the loss with respect to every `γ_i`.
pub fn fd_gamma(bb: &FrozenBackbone, p: &Matrix, zeta: &Matrix, batch: &[Example], eps: f64) -> Vec<f64> {
    let m = p.rows();
    (0..m)
        .map(|i| {
            let mut g = vec![1.0; m];
            g[i] = 1.0 + eps;
            let plus = mask_loss(bb, p, &g, zeta, batch);
            g[i] = 1.0 - eps;
            let minus = mask_loss(bb, p, &g, zeta, batch);
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Central differences of the loss with respect to every `ζ_ic`.
pub fn fd_zeta(bb: &FrozenBackbone, p: &Matrix, k: usize, batch: &[Example], eps: f64) -> Matrix {
    let m = p.rows();
    let gamma = vec![1.0; m];
    let mut out = Matrix::zeros(m, k);
    for i in 0..m {
        for c in 0..k {
            let mut z = Matrix::ones(m, k);
            z.set(i, c, 1.0 + eps);
            let plus = mask_loss(bb, p, &gamma, &z, batch);
            z.set(i, c, 1.0 - eps);
            let minus = mask_loss(bb, p, &gamma, &z, batch);
            out.set(i, c, (plus - minus) / (2.0 * eps));
        }
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        d / denom
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn distinct_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 + rng.random_range(0.0..0.5)).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}
