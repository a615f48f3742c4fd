//! Differentiable stand-ins for "is this sample classified correctly".
//!
//! Counting correct classifications is piecewise constant in the weights, so
//! the worst-case search minimizes a relaxation instead: a per-sample score
//! `p` that is positive while the sample is still classified correctly and
//! bottoms out once it is not. Every variant here follows that orientation —
//! minimizing the dataset sum of any of them pushes samples across the
//! decision boundary. Several well-known scores are listed in the literature
//! with the opposite sign (zero when *misclassified* would be the maximum,
//! not the minimum); those are flipped here so that gradient *descent* on the
//! sum is always the attacking direction, and the original printed form is
//! noted on each variant.
//!
//! Variants operate either on raw logits `O` or on softmax probabilities `Z`;
//! `t` is the true label and `m = x_t − max_{i≠t} x_i` the margin of the true
//! class over the strongest competitor.

use crate::error::{Error, Result};
use crate::graph::{softmax_row, Graph, NodeId, Reduction};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Clamp floor for the logarithm in [`SurrogateKind::P5`]; hitting it is
/// counted by [`Graph::log_clamp_events`].
pub const P5_LOG_CLAMP: f64 = 1e-12;

/// The seven relaxation candidates. `P2` — the hinge on the logit margin —
/// is the default used throughout; the others are kept for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    /// `1 − CE(O, t)`: one minus the cross-entropy loss. Already oriented
    /// correctly as printed (large when confidently correct).
    P1,
    /// `max{O_t − max_{i≠t} O_i, 0}`: hinge on the logit margin. Zero exactly
    /// when the sample is misclassified (commonly printed with the argument
    /// negated, which orients the hinge the other way).
    #[default]
    P2,
    /// `softplus(O_t − max_{i≠t} O_i) − ln 2`: smooth hinge on the logit
    /// margin, zero at the decision boundary (printed form has the argument
    /// negated).
    P3,
    /// `max{Z_t − 1/2, 0}`: hinge on the true-class probability against the
    /// majority threshold (printed as `max{1/2 − O_t, 0}`, which is the
    /// negated argument, and on a quantity only meaningful as a probability).
    P4,
    /// `−ln(2 − 2·Z_t)`: log-barrier form of the majority threshold, positive
    /// for `Z_t > 1/2` (printed as `−ln(2·O_t − 2)`, whose argument is never
    /// positive for a probability; the sign of the argument is flipped). The
    /// argument is clamped at [`P5_LOG_CLAMP`] when `Z_t` rounds to 1.
    P5,
    /// `max{Z_t − max_{i≠t} Z_i, 0}`: hinge on the probability margin
    /// (printed with the argument negated).
    P6,
    /// `softplus(Z_t − max_{i≠t} Z_i) − ln 2`: smooth hinge on the
    /// probability margin (printed with the argument negated).
    P7,
}

impl SurrogateKind {
    pub const ALL: [SurrogateKind; 7] = [
        SurrogateKind::P1,
        SurrogateKind::P2,
        SurrogateKind::P3,
        SurrogateKind::P4,
        SurrogateKind::P5,
        SurrogateKind::P6,
        SurrogateKind::P7,
    ];
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = Self::ALL.iter().position(|k| k == self).expect("listed") + 1;
        write!(f, "p{n}")
    }
}

impl FromStr for SurrogateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("unknown surrogate {s:?}, expected p1..p7"))
            })
    }
}

fn margin(row: &[f64], label: usize) -> f64 {
    let rival = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    row[label] - rival
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Score a single sample from its logit row. Reference scalar form of the
/// graph construction in [`surrogate_sum`], used by tests and report code.
pub fn surrogate_value(kind: SurrogateKind, logits: &[f64], label: usize) -> f64 {
    debug_assert!(label < logits.len());
    let mut probs = vec![0.0; logits.len()];
    match kind {
        SurrogateKind::P1 => {
            // CE = ln Σ exp(O_i) − O_t, computed against the row max for
            // stability (same reduction the graph op uses).
            let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            1.0 - (lse - logits[label])
        }
        SurrogateKind::P2 => margin(logits, label).max(0.0),
        SurrogateKind::P3 => softplus(margin(logits, label)) - 2f64.ln(),
        SurrogateKind::P4 => {
            softmax_row(logits, &mut probs);
            (probs[label] - 0.5).max(0.0)
        }
        SurrogateKind::P5 => {
            softmax_row(logits, &mut probs);
            -(2.0 - 2.0 * probs[label]).max(P5_LOG_CLAMP).ln()
        }
        SurrogateKind::P6 => {
            softmax_row(logits, &mut probs);
            margin(&probs, label).max(0.0)
        }
        SurrogateKind::P7 => {
            softmax_row(logits, &mut probs);
            softplus(margin(&probs, label)) - 2f64.ln()
        }
    }
}

/// Build the batch sum `Σ_x p(x)` on the tape, differentiable w.r.t. whatever
/// produced `logits` (shape `[B, C]`). This is the data term of the relaxed
/// search objective.
pub fn surrogate_sum(
    g: &mut Graph,
    kind: SurrogateKind,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let node = match kind {
        SurrogateKind::P1 => {
            let ce = g.cross_entropy(logits, labels, Reduction::Sum)?;
            let neg = g.scale(ce, -1.0);
            g.add_const(neg, labels.len() as f64)
        }
        SurrogateKind::P2 | SurrogateKind::P3 => {
            let own = g.gather_label(logits, labels)?;
            let rival = g.reduce_max_excluding_index(logits, labels)?;
            let m = g.sub(own, rival)?;
            match kind {
                SurrogateKind::P2 => g.hinge(m),
                _ => {
                    let sp = g.softplus(m);
                    g.add_const(sp, -(2f64.ln()))
                }
            }
        }
        SurrogateKind::P4 | SurrogateKind::P5 => {
            let z = g.softmax(logits)?;
            let own = g.gather_label(z, labels)?;
            match kind {
                SurrogateKind::P4 => {
                    let m = g.add_const(own, -0.5);
                    g.hinge(m)
                }
                _ => {
                    let flipped = g.scale(own, -2.0);
                    let arg = g.add_const(flipped, 2.0);
                    let ln = g.log_clamped(arg, P5_LOG_CLAMP);
                    g.scale(ln, -1.0)
                }
            }
        }
        SurrogateKind::P6 | SurrogateKind::P7 => {
            let z = g.softmax(logits)?;
            let own = g.gather_label(z, labels)?;
            let rival = g.reduce_max_excluding_index(z, labels)?;
            let m = g.sub(own, rival)?;
            match kind {
                SurrogateKind::P6 => g.hinge(m),
                _ => {
                    let sp = g.softplus(m);
                    g.add_const(sp, -(2f64.ln()))
                }
            }
        }
    };
    Ok(g.sum(node))
}
