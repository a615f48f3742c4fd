//! Run artifacts: JSON reports and CSV traces.
//!
//! Every command writes its outputs under the run directory. JSON files are
//! pretty-printed for diffability; CSVs carry a header row and one record
//! per line. Numeric formatting uses Rust's shortest round-trip `f64`
//! representation, so re-reading a report reproduces the exact values.

use crate::error::{CliError, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use wcq_core::analysis::{ConfidenceStats, LayerPerturbation};
use wcq_core::search::SampleRecord;
use wcq_core::train::EpochRecord;

/// Creates the run directory (and parents) if needed.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("creating {}: {e}", dir.display())))
}

/// Serializes any value as pretty JSON at `path`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

/// Writes the per-epoch training curves.
pub fn write_curves_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_accuracy\n");
    for r in history {
        text.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_accuracy));
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

/// Writes a generic CSV: header plus rows of already-formatted cells.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

/// Training summary saved beside the checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub arch: String,
    pub dataset: String,
    /// `regular`, `variation_aware` or `adversarial`.
    pub method: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub final_test_accuracy: f64,
    pub seed: u64,
    pub runtime_seconds: f64,
    /// Annotation from the experiment config (e.g. reduced epoch budget).
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub notes: String,
}

/// The canonical per-run result of a worst-case evaluation (`report.json`),
/// written identically by the search attack and both baselines.
#[derive(Debug, Serialize, Deserialize)]
pub struct WorstCaseReport {
    pub clean_accuracy: f64,
    pub worst_accuracy: f64,
    pub th_g: f64,
    /// Penalty constant selected by the bisection; 0 for methods that have
    /// none (Monte-Carlo, projected gradient, the degenerate zero bound).
    pub chosen_c: f64,
    /// `max|ΔW|` of the reported perturbation.
    #[serde(rename = "achieved_L")]
    pub achieved_l: f64,
    /// Row-normalized confusion matrix under the worst perturbation;
    /// `confusion[t][p]` is the fraction of true-`t` samples predicted `p`.
    pub confusion: Vec<Vec<f64>>,
    pub confidence_stats: ConfidenceStats,
    pub per_layer: Vec<LayerPerturbation>,
    pub runtime_seconds: f64,
    pub seed: u64,
}

/// Secondary findings that accompany `report.json` but are not part of its
/// schema: error concentration, magnitude shape, method-specific counters.
#[derive(Debug, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `search`, `mc` or `pgd`.
    pub method: String,
    pub eval_samples: usize,
    /// Class absorbing the most misclassifications, with its share of all
    /// errors; absent when nothing was misclassified.
    pub sink_class: Option<usize>,
    pub sink_share: Option<f64>,
    /// Raw confusion counts behind the report's normalized matrix.
    pub confusion_counts: Vec<Vec<usize>>,
    /// Perturbation-magnitude histogram over `|ΔW|/th_g ∈ [0, 1]`.
    pub magnitude_histogram: Vec<f64>,
    /// Set when the bound is zero and the ratio histogram is undefined.
    pub histogram_degenerate: bool,
    /// Mass in the two extreme histogram bins (untouched + railed).
    pub extreme_fraction: f64,
    /// Search only: bracket sanity (achieved magnitude at `c_hi` ≥ at `c_lo`)
    /// and saturation count of the logarithmic surrogate.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub monotone_endpoints: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clamp_events: Option<usize>,
    /// Monte-Carlo only: index of the worst run.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub worst_run: Option<usize>,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub notes: String,
}

/// `sweep_summary.json`: the full threshold-study curve plus the recommended
/// threshold, annotated with the checkpoints that produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub checkpoints: Vec<String>,
    #[serde(flatten)]
    pub outcome: wcq_core::hardening::SweepOutcome,
}

/// `analysis.json`: diagnostics re-derived from a run directory by
/// `analyze`, written only after the round-trip checks pass.
#[derive(Debug, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub checkpoint: String,
    pub eval_samples: usize,
    pub clean_accuracy: f64,
    pub worst_accuracy: f64,
    #[serde(rename = "achieved_L")]
    pub achieved_l: f64,
    pub sink_class: Option<usize>,
    pub sink_share: Option<f64>,
    pub mean_confidence_correct: Option<f64>,
    pub mean_confidence_wrong: Option<f64>,
    pub magnitude_histogram: Vec<f64>,
    pub histogram_degenerate: bool,
    pub extreme_fraction: f64,
    pub per_layer: Vec<LayerPerturbation>,
}

/// Writes the per-sample evaluation records of the worst-case run.
pub fn write_records_csv(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![i.to_string(), r.predicted.to_string(), r.label.to_string(), r.confidence.to_string()]
        })
        .collect();
    write_csv(path, "sample,predicted,label,confidence", &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worstcase_report_round_trips_with_schema_key_names() {
        let report = WorstCaseReport {
            clean_accuracy: 0.9857,
            worst_accuracy: 0.0735,
            th_g: 0.03,
            chosen_c: 3.1e-4,
            achieved_l: 0.029999999999,
            confusion: vec![vec![0.0; 10]; 10],
            confidence_stats: ConfidenceStats {
                mean_correct: Some(0.47),
                mean_wrong: Some(0.9),
                n_correct: 74,
                n_wrong: 926,
                hist_correct: vec![0.0; 20],
                hist_wrong: vec![0.0; 20],
            },
            per_layer: Vec::new(),
            runtime_seconds: 12.5,
            seed: 42,
        };
        let text = serde_json::to_string_pretty(&report).unwrap();
        // the magnitude field keeps its capitalized name in the file format
        assert!(text.contains("\"achieved_L\""));
        assert!(!text.contains("achieved_l"));
        let back: WorstCaseReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.achieved_l, report.achieved_l);
        assert_eq!(back.confidence_stats.n_wrong, 926);
    }

    #[test]
    fn records_csv_has_one_row_per_sample() {
        let dir = std::env::temp_dir().join("wcq-report-tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("records.csv");
        let records = vec![
            SampleRecord { predicted: 3, label: 3, confidence: 0.99 },
            SampleRecord { predicted: 8, label: 2, confidence: 0.61 },
        ];
        write_records_csv(&path, &records).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "sample,predicted,label,confidence");
        assert_eq!(lines[2], "1,8,2,0.61");
    }

    #[test]
    fn curves_csv_round_trips_values_exactly() {
        let dir = std::env::temp_dir().join("wcq-report-tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("curves.csv");
        let history = vec![
            EpochRecord { epoch: 0, train_loss: 2.302585092994046, val_accuracy: 0.1135 },
            EpochRecord { epoch: 1, train_loss: 0.5, val_accuracy: 0.9512 },
        ];
        write_curves_csv(&path, &history).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,train_loss,val_accuracy"));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "0");
        assert_eq!(first[1].parse::<f64>().unwrap(), 2.302585092994046);
        assert_eq!(first[2].parse::<f64>().unwrap(), 0.1135);
    }
}
