//! Optimizers for the soft prompt (and the backbone during pretraining).
//!
//! Every update honours an optional 0/1 mask: masked entries are neither
//! moved, decayed, nor counted in any running statistic.
//!
//! `AdafactorLite` factors second moments per prompt row. Each row of width
//! `e` is viewed as a `k × w` grid (pieces × offset inside a piece), and the
//! row keeps one accumulator per piece and one per offset. Rows never share
//! statistics, so masking one row cannot change the update of another.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdafactorLite,
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adafactor(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdafactorLite,
            learning_rate,
            weight_decay,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

const ADAFACTOR_EPS: f64 = 1e-30;
const ADAFACTOR_DECAY: f64 = 0.8;
const ADAFACTOR_CLIP: f64 = 1.0;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
enum Accumulators {
    None,
    Adam { m: Matrix, v: Matrix },
    Factored { pieces: Matrix, offsets: Matrix },
}

/// Optimizer bound to one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    rows: usize,
    cols: usize,
    pieces: usize,
    step: u64,
    acc: Accumulators,
}

impl OptimizerState {
    /// `pieces` is the factorisation of each row used by `AdafactorLite`;
    /// other kinds ignore it beyond the divisibility check.
    pub fn new(config: OptimizerConfig, shape: (usize, usize), pieces: usize) -> Result<Self> {
        config.validate()?;
        let (rows, cols) = shape;
        if pieces == 0 || cols % pieces != 0 {
            return Err(Error::Divisibility {
                what: "optimizer row width by piece count",
                numerator: cols,
                divisor: pieces,
            });
        }
        let mut s = Self {
            config,
            rows,
            cols,
            pieces,
            step: 0,
            acc: Accumulators::None,
        };
        s.reset();
        Ok(s)
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Fresh state: zero accumulators, step counter 0.
    pub fn reset(&mut self) {
        self.step = 0;
        let (r, c) = (self.rows, self.cols);
        self.acc = match self.config.kind {
            OptimizerKind::Sgd => Accumulators::None,
            OptimizerKind::Adam => Accumulators::Adam {
                m: Matrix::zeros(r, c),
                v: Matrix::zeros(r, c),
            },
            OptimizerKind::AdafactorLite => Accumulators::Factored {
                pieces: Matrix::zeros(r, self.pieces),
                offsets: Matrix::zeros(r, c / self.pieces),
            },
        };
    }

    /// Row and column second-moment accumulators (factored kind only).
    pub fn factored_moments(&self) -> Option<(&Matrix, &Matrix)> {
        match &self.acc {
            Accumulators::Factored { pieces, offsets } => Some((pieces, offsets)),
            _ => None,
        }
    }

    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix, mask: Option<&Matrix>) -> Result<()> {
        let shape = (self.rows, self.cols);
        for (what, m) in [("parameter", Some(&*param)), ("gradient", Some(grad)), ("mask", mask)] {
            if let Some(m) = m {
                if m.shape() != shape {
                    return Err(Error::Dimension {
                        op: match what {
                            "parameter" => "optimizer step (parameter)",
                            "gradient" => "optimizer step (gradient)",
                            _ => "optimizer step (mask)",
                        },
                        lhs: shape,
                        rhs: m.shape(),
                    });
                }
            }
        }
        self.step += 1;
        let live = |idx: usize| mask.is_none_or(|m| m.data()[idx] != 0.0);
        let lr = self.config.learning_rate;
        let wd = self.config.weight_decay;
        match &mut self.acc {
            Accumulators::None => {
                for idx in 0..param.len() {
                    if live(idx) {
                        let p = param.data()[idx];
                        param.data_mut()[idx] = p - lr * grad.data()[idx] - lr * wd * p;
                    }
                }
            }
            Accumulators::Adam { m, v } => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for idx in 0..param.len() {
                    if !live(idx) {
                        continue;
                    }
                    let g = grad.data()[idx];
                    let mi = ADAM_BETA1 * m.data()[idx] + (1.0 - ADAM_BETA1) * g;
                    let vi = ADAM_BETA2 * v.data()[idx] + (1.0 - ADAM_BETA2) * g * g;
                    m.data_mut()[idx] = mi;
                    v.data_mut()[idx] = vi;
                    let p = param.data()[idx];
                    let upd = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                    param.data_mut()[idx] = p - lr * upd - lr * wd * p;
                }
            }
            Accumulators::Factored { pieces, offsets } => {
                let beta2 = 1.0 - (self.step as f64).powf(-ADAFACTOR_DECAY);
                let k = self.pieces;
                let w = self.cols / k;
                let mut update = vec![0.0; self.cols];
                for r in 0..self.rows {
                    let base = r * self.cols;
                    let is_live = |j: usize| live(base + j);
                    let g = &grad.data()[base..base + self.cols];

                    for c in 0..k {
                        let (mut sum, mut n) = (0.0, 0usize);
                        for d in 0..w {
                            let j = c * w + d;
                            if is_live(j) {
                                sum += g[j] * g[j] + ADAFACTOR_EPS;
                                n += 1;
                            }
                        }
                        if n > 0 {
                            let old = pieces.get(r, c);
                            pieces.set(r, c, beta2 * old + (1.0 - beta2) * sum / n as f64);
                        }
                    }
                    for d in 0..w {
                        let (mut sum, mut n) = (0.0, 0usize);
                        for c in 0..k {
                            let j = c * w + d;
                            if is_live(j) {
                                sum += g[j] * g[j] + ADAFACTOR_EPS;
                                n += 1;
                            }
                        }
                        if n > 0 {
                            let old = offsets.get(r, d);
                            offsets.set(r, d, beta2 * old + (1.0 - beta2) * sum / n as f64);
                        }
                    }

                    let (mut norm, mut live_pieces) = (0.0, 0usize);
                    for c in 0..k {
                        if (0..w).any(|d| is_live(c * w + d)) {
                            norm += pieces.get(r, c);
                            live_pieces += 1;
                        }
                    }
                    if live_pieces == 0 {
                        continue;
                    }
                    norm /= live_pieces as f64;

                    let (mut sq, mut n) = (0.0, 0usize);
                    for j in 0..self.cols {
                        update[j] = 0.0;
                        if is_live(j) {
                            let vhat = pieces.get(r, j / w) * offsets.get(r, j % w) / norm;
                            update[j] = g[j] / vhat.sqrt();
                            sq += update[j] * update[j];
                            n += 1;
                        }
                    }
                    let rms = (sq / n as f64).sqrt();
                    let clip = (rms / ADAFACTOR_CLIP).max(1.0);
                    for j in 0..self.cols {
                        if is_live(j) {
                            let p = param.data()[base + j];
                            param.data_mut()[base + j] = p - lr * update[j] / clip - lr * wd * p;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
