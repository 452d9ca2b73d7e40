//! Synthetic classification tasks, JSONL ingestion, few-shot sampling and
//! accuracy.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl Example {
    pub fn validate(&self, vocab_size: usize, num_classes: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::data("example has no tokens"));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::data(format!(
                "token {t} outside vocabulary of size {vocab_size}"
            )));
        }
        if self.label >= num_classes {
            return Err(Error::data(format!(
                "label {} outside {num_classes} classes",
                self.label
            )));
        }
        Ok(())
    }
}

pub type Dataset = Vec<Example>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Label 1 iff the marker bigram `(0, 1)` occurs somewhere.
    PatternDetect,
    /// Symbols are split into `num_classes` groups by `symbol % C`; the label
    /// is the group with strictly the most occurrences.
    MajorityClass,
    /// Label is the parity of the number of marker symbols `0`.
    ParityOfMarkers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: GeneratorKind,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.dev_size == 0 {
            return Err(Error::config("task split sizes must be at least 1"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        match self.kind {
            GeneratorKind::PatternDetect => {
                if self.num_classes != 2 {
                    return Err(Error::config("pattern_detect is a binary task"));
                }
                if self.max_len < 2 {
                    return Err(Error::config(format!(
                        "marker bigram does not fit in sequences of length {}",
                        self.max_len
                    )));
                }
                if self.vocab_size < 3 {
                    return Err(Error::config("pattern_detect needs at least 3 symbols"));
                }
            }
            GeneratorKind::MajorityClass => {
                if self.num_classes < 2 || self.vocab_size < self.num_classes {
                    return Err(Error::config(format!(
                        "majority_class needs at least one symbol per class ({} symbols, {} classes)",
                        self.vocab_size, self.num_classes
                    )));
                }
            }
            GeneratorKind::ParityOfMarkers => {
                if self.num_classes != 2 {
                    return Err(Error::config("parity_of_markers is a binary task"));
                }
                if self.vocab_size < 2 {
                    return Err(Error::config("parity_of_markers needs at least 2 symbols"));
                }
            }
        }
        Ok(())
    }

    /// Ground-truth labelling rule.
    pub fn label_of(&self, tokens: &[usize]) -> Option<usize> {
        match self.kind {
            GeneratorKind::PatternDetect => Some(tokens.windows(2).any(|w| w[0] == 0 && w[1] == 1) as usize),
            GeneratorKind::MajorityClass => {
                let mut counts = vec![0usize; self.num_classes];
                for &t in tokens {
                    counts[t % self.num_classes] += 1;
                }
                let best = *counts.iter().max()?;
                let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
                let (idx, _) = winners.next()?;
                winners.next().is_none().then_some(idx)
            }
            GeneratorKind::ParityOfMarkers => Some(tokens.iter().filter(|&&t| t == 0).count() % 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
}

/// Deterministic train/dev datasets. Train and dev draw from separate ChaCha
/// streams of the same seed, with labels assigned round-robin so every split
/// is balanced to within one example per class.
pub fn generate(spec: &TaskSpec) -> Result<Splits> {
    spec.validate()?;
    Ok(Splits {
        train: generate_split(spec, spec.train_size, 1),
        dev: generate_split(spec, spec.dev_size, 2),
    })
}

fn generate_split(spec: &TaskSpec, size: usize, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut targets: Vec<usize> = (0..size).map(|i| i % spec.num_classes).collect();
    targets.shuffle(&mut rng);
    targets
        .into_iter()
        .map(|label| Example {
            tokens: sample_with_label(spec, label, &mut rng),
            label,
        })
        .collect()
}

fn sample_with_label(spec: &TaskSpec, label: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    match spec.kind {
        GeneratorKind::PatternDetect => {
            let mut tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.vocab_size)).collect();
            if label == 1 {
                let at = rng.random_range(0..len - 1);
                tokens[at] = 0;
                tokens[at + 1] = 1;
            } else {
                while let Some(i) = tokens.windows(2).position(|w| w[0] == 0 && w[1] == 1) {
                    tokens[i + 1] = rng.random_range(2..spec.vocab_size);
                }
            }
            tokens
        }
        GeneratorKind::MajorityClass | GeneratorKind::ParityOfMarkers => loop {
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.vocab_size)).collect();
            if spec.label_of(&tokens) == Some(label) {
                break tokens;
            }
        },
    }
}

/// Unlabelled sequences from a sparse random Markov chain over `symbols`,
/// used as the masked-token pretraining corpus.
pub fn markov_corpus(
    symbols: usize,
    count: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if symbols < 2 || min_len == 0 || min_len > max_len {
        return Err(Error::config(
            "markov corpus needs >= 2 symbols and a valid length range",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    // Each symbol has a handful of preferred successors carrying 80% of the mass.
    let fanout = 3.min(symbols);
    let successors: Vec<Vec<usize>> = (0..symbols)
        .map(|_| index::sample(&mut rng, symbols, fanout).into_vec())
        .collect();
    let corpus = (0..count)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let mut seq = Vec::with_capacity(len);
            let mut cur = rng.random_range(0..symbols);
            seq.push(cur);
            while seq.len() < len {
                cur = if rng.random_bool(0.8) {
                    successors[cur][rng.random_range(0..fanout)]
                } else {
                    rng.random_range(0..symbols)
                };
                seq.push(cur);
            }
            seq
        })
        .collect();
    Ok(corpus)
}

/// Reads one `{"tokens": [...], "label": n}` record per line. Blank lines
/// are skipped; every error names its line.
pub fn load_jsonl(path: &Path, vocab_size: usize, num_classes: usize) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
        ex.validate(vocab_size, num_classes)
            .map_err(|e| Error::data(format!("{}:{lineno}: {e}", path.display())))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, data: &[Example]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for ex in data {
        let line = serde_json::to_string(ex).map_err(|e| Error::data(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Seeded uniform sample of `shots` examples without replacement.
pub fn fewshot_subsample(train: &[Example], shots: usize, seed: u64) -> Result<Dataset> {
    if shots > train.len() {
        return Err(Error::data(format!(
            "cannot draw {shots} shots from {} training examples",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, train.len(), shots)
        .into_iter()
        .map(|i| train[i].clone())
        .collect())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::data("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of the most frequent label.
pub fn majority_baseline(data: &[Example], num_classes: usize) -> f64 {
    let mut counts = vec![0usize; num_classes.max(1)];
    for ex in data {
        if ex.label < counts.len() {
            counts[ex.label] += 1;
        }
    }
    counts.into_iter().max().unwrap_or(0) as f64 / data.len().max(1) as f64
}
