//! Post-hoc diagnostics for evaluation records and perturbations.
//!
//! Three views of what a worst-case perturbation actually did to a network:
//! where the misclassified samples went (confusion matrix and its dominant
//! sink class), how sure the network was while being wrong (confidence
//! statistics), and which weights moved (magnitude histogram and per-layer
//! perturbed fractions). All of it is computed from plain evaluation records
//! and perturbation tensors, so it runs identically on fresh results and on
//! reloaded report artifacts.

use serde::{Deserialize, Serialize};

use crate::device::WeightPerturbation;
use crate::model::Network;
use crate::search::SampleRecord;

/// Number of bins used by every histogram in this module.
pub const HIST_BINS: usize = 20;

/// Fraction of the bound below which a weight counts as unperturbed: a layer's
/// perturbed fraction counts coordinates with `|delta| > PERTURBED_FRACTION_OF_BOUND * th_g`.
pub const PERTURBED_FRACTION_OF_BOUND: f64 = 0.05;

/// Row-normalized confusion matrix plus the class that absorbs the errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Confusion {
    /// Raw counts; `counts[t][p]` is the number of samples with true label
    /// `t` predicted as `p`.
    pub counts: Vec<Vec<usize>>,
    /// Row-normalized counts. Rows with at least one sample sum to 1; rows
    /// for classes absent from the records are all zero.
    pub normalized: Vec<Vec<f64>>,
    /// The column holding the largest off-diagonal mass, i.e. the class most
    /// misclassifications land in. Ties break toward the lowest class index.
    /// Absent when every prediction was correct.
    pub sink_class: Option<usize>,
    /// Fraction of all misclassified samples the sink class absorbs. Absent
    /// together with `sink_class`.
    pub sink_share: Option<f64>,
}

/// Mean confidence split by correctness, with the full distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceStats {
    /// Mean confidence over correctly classified samples; absent when none.
    pub mean_correct: Option<f64>,
    /// Mean confidence over misclassified samples; absent when none.
    pub mean_wrong: Option<f64>,
    pub n_correct: usize,
    pub n_wrong: usize,
    /// Confidence histogram over [0, 1] for the correct set, as fractions of
    /// that set (all zero when the set is empty).
    pub hist_correct: Vec<f64>,
    /// Same for the misclassified set.
    pub hist_wrong: Vec<f64>,
}

/// Per-layer summary of a perturbation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerPerturbation {
    /// Name of the perturbed weight parameter, e.g. `conv1.weight`.
    pub name: String,
    pub weights: usize,
    /// Fraction of this layer's weights with `|delta|` above
    /// [`PERTURBED_FRACTION_OF_BOUND`] of the bound.
    pub fraction_perturbed: f64,
    pub max_abs: f64,
}

/// Magnitude histogram of a perturbation plus its per-layer breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationProfile {
    /// Histogram of `|delta| / th_g` over [0, 1] as fractions of all weight
    /// coordinates. All zero when `degenerate` is set.
    pub bins: Vec<f64>,
    /// Set when `th_g` is zero: the magnitude ratio is undefined, so the
    /// histogram is reported all-zero rather than invented.
    pub degenerate: bool,
    pub per_layer: Vec<LayerPerturbation>,
}

impl PerturbationProfile {
    /// Mass in the first and last bins combined — the "untouched or railed
    /// at the bound" share that makes a perturbation bimodal.
    pub fn extreme_fraction(&self) -> f64 {
        self.bins.first().unwrap_or(&0.0) + self.bins.last().unwrap_or(&0.0)
    }
}

fn bin_index(ratio: f64) -> usize {
    // Ratios live in [0, 1]; an exact 1.0 (a weight railed at the bound)
    // belongs in the top bin, not one past it.
    ((ratio * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

/// Builds the row-normalized confusion matrix and finds the sink class.
pub fn analyze_confusion(records: &[SampleRecord], classes: usize) -> Confusion {
    let mut counts = vec![vec![0usize; classes]; classes];
    for r in records {
        counts[r.label][r.predicted] += 1;
    }
    let normalized = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                vec![0.0; classes]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();

    let off_diagonal_mass = |col: usize| -> usize {
        (0..classes).filter(|&row| row != col).map(|row| counts[row][col]).sum()
    };
    let wrong_total: usize = (0..classes).map(off_diagonal_mass).sum();
    let (sink_class, sink_share) = if wrong_total == 0 {
        (None, None)
    } else {
        // max_by_key on the negated column index would be obscure; a plain
        // scan keeps the tie-break toward the lowest class explicit.
        let mut best = 0;
        for col in 1..classes {
            if off_diagonal_mass(col) > off_diagonal_mass(best) {
                best = col;
            }
        }
        (Some(best), Some(off_diagonal_mass(best) as f64 / wrong_total as f64))
    };

    Confusion { counts, normalized, sink_class, sink_share }
}

/// Splits confidences by correctness and summarizes both sets.
pub fn analyze_confidence(records: &[SampleRecord]) -> ConfidenceStats {
    let mut hist_correct = vec![0.0; HIST_BINS];
    let mut hist_wrong = vec![0.0; HIST_BINS];
    let (mut sum_c, mut n_c, mut sum_w, mut n_w) = (0.0, 0usize, 0.0, 0usize);
    for r in records {
        if r.predicted == r.label {
            sum_c += r.confidence;
            n_c += 1;
            hist_correct[bin_index(r.confidence)] += 1.0;
        } else {
            sum_w += r.confidence;
            n_w += 1;
            hist_wrong[bin_index(r.confidence)] += 1.0;
        }
    }
    if n_c > 0 {
        hist_correct.iter_mut().for_each(|b| *b /= n_c as f64);
    }
    if n_w > 0 {
        hist_wrong.iter_mut().for_each(|b| *b /= n_w as f64);
    }
    ConfidenceStats {
        mean_correct: (n_c > 0).then(|| sum_c / n_c as f64),
        mean_wrong: (n_w > 0).then(|| sum_w / n_w as f64),
        n_correct: n_c,
        n_wrong: n_w,
        hist_correct,
        hist_wrong,
    }
}

/// Profiles a perturbation against the network it belongs to: magnitude
/// histogram relative to the bound and per-layer perturbed fractions.
pub fn analyze_perturbation(pert: &WeightPerturbation, net: &Network) -> PerturbationProfile {
    let widx = net.weight_param_indices();
    debug_assert_eq!(widx.len(), pert.deltas.len());

    let mut bins = vec![0.0; HIST_BINS];
    let degenerate = pert.th_g == 0.0;
    let mut total = 0usize;
    let threshold = PERTURBED_FRACTION_OF_BOUND * pert.th_g;

    let per_layer = pert
        .deltas
        .iter()
        .zip(&widx)
        .map(|(delta, &pi)| {
            let mut above = 0usize;
            let mut max_abs = 0.0f64;
            for &v in delta.data() {
                let m = v.abs();
                max_abs = max_abs.max(m);
                if m > threshold {
                    above += 1;
                }
                if !degenerate {
                    bins[bin_index(m / pert.th_g)] += 1.0;
                }
                total += 1;
            }
            LayerPerturbation {
                name: net.params[pi].name.clone(),
                weights: delta.data().len(),
                fraction_perturbed: above as f64 / delta.data().len() as f64,
                max_abs,
            }
        })
        .collect();

    if !degenerate && total > 0 {
        bins.iter_mut().for_each(|b| *b /= total as f64);
    }
    PerturbationProfile { bins, degenerate, per_layer }
}
