//! Plot-ready saliency export: per-token and per-piece importance scaled so
//! that the largest value in each row is 100.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pruning::{ImportanceReport, MaskSelection};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyRow {
    pub token: usize,
    pub score: f64,
    /// Token score divided by the largest token score, times 100.
    pub normalized: f64,
    pub pruned: bool,
    pub piece_scores: Vec<f64>,
    /// Piece scores divided by this row's largest piece score, times 100.
    pub piece_normalized: Vec<f64>,
    pub piece_pruned: Vec<bool>,
}

/// Scales `values` so the maximum becomes 100; an all-zero row stays 0.
pub fn max_scale(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| if v == max { 100.0 } else { v / max * 100.0 })
        .collect()
}

pub fn saliency_rows(report: &ImportanceReport, selection: &MaskSelection) -> Result<Vec<SaliencyRow>> {
    let (m, k) = (report.tokens(), report.pieces());
    if selection.tokens != m || selection.pieces != k {
        return Err(Error::data(format!(
            "selection is {}x{} but the importance report is {m}x{k}",
            selection.tokens, selection.pieces
        )));
    }
    let (gamma, zeta) = selection.masks();
    let token_norm = max_scale(&report.token_scores);
    Ok((0..m)
        .map(|i| {
            let pieces = report.piece_scores.row(i).to_vec();
            SaliencyRow {
                token: i,
                score: report.token_scores[i],
                normalized: token_norm[i],
                pruned: !gamma[i],
                piece_normalized: max_scale(&pieces),
                piece_scores: pieces,
                piece_pruned: (0..k).map(|c| !zeta[i * k + c]).collect(),
            }
        })
        .collect())
}

/// Writes one JSON record per token.
pub fn export_saliency(report: &ImportanceReport, selection: &MaskSelection, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in saliency_rows(report, selection)? {
        let line = serde_json::to_string(&row).map_err(|e| Error::data(e.to_string()))?;
        let _ = writeln!(out, "{line}");
    }
    fs::write(path, out)?;
    Ok(())
}
