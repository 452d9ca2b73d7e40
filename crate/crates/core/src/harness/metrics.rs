//! Metrics records, parameter accounting and their text renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::MaskSelection;

/// One line of a metrics file. Wall-clock time is kept in memory only so
/// that metrics files stay byte-for-byte reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub seed: u64,
    pub dev_acc: f64,
    pub kept_tokens: usize,
    pub kept_params: usize,
    /// `kept_params / (m · e)` as a percentage with four decimals.
    pub percentage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piece_ratio: Option<f64>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl MetricsRecord {
    pub fn new(stage: &str, seed: u64, dev_acc: f64, kept_tokens: usize, count: &ParamCount) -> Self {
        Self {
            stage: stage.to_string(),
            seed,
            dev_acc,
            kept_tokens,
            kept_params: count.count,
            percentage: count.percentage.clone(),
            token_ratio: None,
            piece_ratio: None,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn with_ratios(mut self, token_ratio: f64, piece_ratio: f64) -> Self {
        self.token_ratio = Some(token_ratio);
        self.piece_ratio = Some(piece_ratio);
        self
    }

    pub fn with_seconds(mut self, secs: f64) -> Self {
        self.wall_clock_seconds = secs;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub count: usize,
    pub total: usize,
    pub percentage: String,
}

/// `numerator / denominator` as a percentage rounded half-up to four
/// decimals, computed in integers.
pub fn render_percentage(numerator: usize, denominator: usize) -> String {
    if denominator == 0 {
        return "0.0000".into();
    }
    let (n, d) = (numerator as u128, denominator as u128);
    let scaled = (n * 2_000_000 + d) / (2 * d);
    format!("{}.{:04}", scaled / 10_000, scaled % 10_000)
}

/// Tunable prompt parameters kept by `selection`: the sum over kept tokens
/// of kept pieces times the piece width.
pub fn param_count(m: usize, e: usize, selection: &MaskSelection) -> Result<ParamCount> {
    if selection.tokens != m {
        return Err(Error::data(format!(
            "selection covers {} tokens but the prompt has {m}",
            selection.tokens
        )));
    }
    if selection.pieces == 0 || !e.is_multiple_of(selection.pieces) {
        return Err(Error::data(format!(
            "selection has {} pieces, which do not divide width {e}",
            selection.pieces
        )));
    }
    selection.validate()?;
    let count = selection.kept_cell_count() * (e / selection.pieces);
    let total = m * e;
    Ok(ParamCount {
        count,
        total,
        percentage: render_percentage(count, total),
    })
}

pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::data(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn ratio_cell(r: Option<f64>) -> String {
    r.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

/// Fixed-width table of the records in file order.
pub fn render_table(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>6} {:>6} {:>6} {:>8} {:>7} {:>11} {:>9}",
        "stage", "seed", "tok_r", "pce_r", "dev_acc", "tokens", "params", "percent"
    );
    for r in records {
        let _ = writeln!(
            out,
            "{:<18} {:>6} {:>6} {:>6} {:>8.4} {:>7} {:>11} {:>9}",
            r.stage,
            r.seed,
            ratio_cell(r.token_ratio),
            ratio_cell(r.piece_ratio),
            r.dev_acc,
            r.kept_tokens,
            r.kept_params,
            r.percentage
        );
    }
    out
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Median dev accuracy per stage, keeping first-appearance order.
pub fn stage_medians(records: &[MetricsRecord]) -> Vec<(String, usize, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut by_stage: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        if !by_stage.contains_key(&r.stage) {
            order.push(r.stage.clone());
        }
        by_stage.entry(r.stage.clone()).or_default().push(r.dev_acc);
    }
    order
        .into_iter()
        .map(|s| {
            let v = &by_stage[&s];
            (s.clone(), v.len(), median(v).unwrap_or(0.0))
        })
        .collect()
}

pub fn render_medians(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:>6} {:>14}", "method", "seeds", "median_dev_acc");
    for (stage, n, med) in stage_medians(records) {
        let _ = writeln!(out, "{stage:<18} {n:>6} {med:>14.4}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentages_are_exact() {
        assert_eq!(render_percentage(40960, 40960), "100.0000");
        assert_eq!(render_percentage(6144, 40960), "15.0000");
        assert_eq!(render_percentage(2560, 40960), "6.2500");
        assert_eq!(render_percentage(512, 40960), "1.2500");
        assert_eq!(render_percentage(1, 3), "33.3333");
        assert_eq!(render_percentage(2, 3), "66.6667");
        assert_eq!(render_percentage(0, 5), "0.0000");
    }

    #[test]
    fn param_count_rejects_mismatched_selection() {
        let sel = MaskSelection::keep_all(4, 2);
        assert!(matches!(param_count(5, 8, &sel), Err(Error::Data(_))));
        assert!(matches!(param_count(4, 7, &sel), Err(Error::Data(_))));
        assert_eq!(param_count(4, 8, &sel).unwrap().count, 32);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn jsonl_round_trip_drops_wall_clock() {
        let dir = tempfile::tempdir().unwrap();
        let pc = ParamCount {
            count: 10,
            total: 20,
            percentage: render_percentage(10, 20),
        };
        let recs = vec![
            MetricsRecord::new("tune", 1, 0.75, 4, &pc).with_seconds(3.5),
            MetricsRecord::new("cell", 1, 0.5, 2, &pc).with_ratios(0.1, 0.2),
        ];
        let path = dir.path().join("m.jsonl");
        write_jsonl(&path, &recs).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back[0].wall_clock_seconds, 0.0);
        assert_eq!(back[1], recs[1]);
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains("wall"));
        assert!(render_table(&back).contains("0.10"));
    }
}
