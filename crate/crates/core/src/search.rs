//! Worst-case perturbation search.
//!
//! Accuracy under a bounded weight perturbation is a piecewise-constant
//! function of the perturbation, so it is attacked through a relaxation: a
//! differentiable per-sample surrogate summed over the evaluation set, plus a
//! penalty coupling the perturbation's largest magnitude to the bound,
//!
//! ```text
//!     objective(ΔW) = c · Σ_x p(x; W_q + ΔW)  +  (max|ΔW| − th_g)
//! ```
//!
//! minimized over ΔW with adaptive-moment gradient descent while the network
//! weights stay frozen at their deployed (quantized) values. The constant `c`
//! trades misclassification pressure against perturbation size; the largest
//! `c` whose optimized perturbation still satisfies `max|ΔW| ≤ th_g` is found
//! by bisection on `log10 c`. Larger feasible `c` means the data term is
//! allowed to push harder before the penalty reins the magnitude in, which is
//! what makes the bisected solution the worst *within* the bound.
//!
//! Perturbations are applied to the already-quantized weights and are not
//! re-quantized — they model analog device deviations, not integer weight
//! flips.

use crate::data::Dataset;
use crate::device::WeightPerturbation;
use crate::error::{Error, Result};
use crate::graph::{softmax_row, Graph};
use crate::model::{argmax_row, ForwardOptions, Network, WeightMode};
use crate::surrogate::{surrogate_sum, surrogate_value, SurrogateKind};
use crate::tensor::Tensor;
use crate::train::{rng_for, streams};
use rand::Rng;
use serde::Serialize;

/// Evaluation chunk size: small enough that one chunk of the larger network's
/// activations fits comfortably in memory, large enough to amortize graph
/// construction.
const EVAL_CHUNK: usize = 64;

/// Hyper-parameters of the worst-case search.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Surrogate used for the data term.
    pub surrogate: SurrogateKind,
    /// Lagrange constant for fixed-`c` optimization; [`binary_search_c`]
    /// overrides it per round.
    pub c: f64,
    /// Adam learning rate on the perturbation.
    pub lr: f64,
    /// Optimizer steps per optimization.
    pub iters: usize,
    /// Bound on `max|ΔW|`.
    pub th_g: f64,
    /// Samples per forward/backward chunk.
    pub batch: usize,
    /// When set, every step accumulates gradients over the full evaluation
    /// set in `batch`-sized chunks; otherwise each step uses the next single
    /// chunk (cheaper, noisier — used for the large network).
    pub full_batch: bool,
    /// Bisection bracket for `c` (log10 scale) and total optimization budget.
    pub c_lo: f64,
    pub c_hi: f64,
    pub rounds: usize,
    /// 0 starts the perturbation at zero (default); a positive value draws
    /// each delta uniformly from `±random_init` for ablation.
    pub random_init: f64,
    /// Seed for the optional random initialization.
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            surrogate: SurrogateKind::default(),
            c: 1e-3,
            lr: 1e-4,
            iters: 500,
            th_g: 0.03,
            batch: 256,
            full_batch: true,
            c_lo: 1e-8,
            c_hi: 1e-1,
            rounds: 12,
            random_init: 0.0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let complain = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.c.is_finite() && self.c >= 0.0) {
            return complain(format!("c must be ≥ 0, got {}", self.c));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return complain(format!("lr must be > 0, got {}", self.lr));
        }
        if self.iters == 0 {
            return complain("iters must be ≥ 1".into());
        }
        if self.batch == 0 {
            return complain("batch must be ≥ 1".into());
        }
        if !(self.th_g.is_finite() && self.th_g >= 0.0) {
            return complain(format!("th_g must be ≥ 0, got {}", self.th_g));
        }
        if !(self.c_lo > 0.0 && self.c_lo < self.c_hi) {
            return complain(format!(
                "need 0 < c_lo < c_hi, got [{}, {}]",
                self.c_lo, self.c_hi
            ));
        }
        if self.rounds < 2 {
            return complain("rounds must be ≥ 2 (both bracket ends are probed)".into());
        }
        if !(self.random_init.is_finite() && self.random_init >= 0.0) {
            return complain(format!("random_init must be ≥ 0, got {}", self.random_init));
        }
        Ok(())
    }
}

/// One optimizer step of the search, as recorded in the trace.
#[derive(Debug, Clone, Serialize)]
pub struct TracePoint {
    pub iter: usize,
    /// Relaxed objective at the start of the step (data term over the samples
    /// this step looked at, plus the bound term).
    pub objective: f64,
    /// Accuracy over the same samples, measured from the already-computed
    /// logits — free to collect, unlike a full evaluation pass.
    pub batch_accuracy: f64,
    /// `max|ΔW|` at the start of the step.
    pub max_abs: f64,
}

/// Result of one fixed-`c` optimization.
#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub perturbation: WeightPerturbation,
    pub trace: Vec<TracePoint>,
    /// Saturation events of the `p5` surrogate's logarithm, if that surrogate
    /// was in use (0 otherwise).
    pub clamp_events: usize,
}

/// Per-sample evaluation record: predicted class, true label, and the softmax
/// probability of the predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleRecord {
    pub predicted: usize,
    pub label: usize,
    pub confidence: f64,
}

/// Accuracy plus the per-sample records behind it.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub records: Vec<SampleRecord>,
}

/// One bisection round of [`binary_search_c`].
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub c: f64,
    /// `max|ΔW|` of the round's optimized perturbation.
    pub achieved_l: f64,
    /// Whether that magnitude respects the bound.
    pub feasible: bool,
    /// Accuracy under the round's perturbation on the evaluation set.
    pub accuracy: f64,
}

/// Result of the full search: the chosen constant, the perturbation it
/// produced, and everything needed for reporting.
#[derive(Debug, Clone)]
pub struct CSearchOutcome {
    /// Largest tested `c` whose perturbation stayed within the bound
    /// (0 in the degenerate `th_g = 0` case, where no search happens).
    pub chosen_c: f64,
    pub perturbation: WeightPerturbation,
    /// Accuracy under `perturbation`; never above `clean_accuracy` because
    /// the zero perturbation is always admissible and used as fallback.
    pub worst_accuracy: f64,
    pub clean_accuracy: f64,
    /// Per-sample records of the worst-case evaluation.
    pub records: Vec<SampleRecord>,
    /// Optimizer trace of the chosen round.
    pub trace: Vec<TracePoint>,
    /// Every bisection round, in execution order.
    pub rounds: Vec<RoundRecord>,
    /// Empirical check that the achieved magnitude at `c_hi` is at least the
    /// one at `c_lo` — the monotone relation bisection relies on.
    pub monotone_endpoints: bool,
    pub clamp_events: usize,
}

fn chunk_ranges(n: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(chunk))
        .map(|i| (i * chunk, ((i + 1) * chunk).min(n)))
        .collect()
}

/// Data-term value/gradient of one chunk, accumulated into `grads`. Returns
/// `(c·Σp, correct predictions, log-clamp events)`; the backward pass is
/// skipped when `c == 0` since the scaled gradient is identically zero.
fn data_term_chunk(
    net: &Network,
    pert: &WeightPerturbation,
    data: &Dataset,
    range: (usize, usize),
    c: f64,
    kind: SurrogateKind,
    quantize_acts: bool,
    grads: &mut [Tensor],
) -> Result<(f64, usize, usize)> {
    let idxs: Vec<usize> = (range.0..range.1).collect();
    let (images, labels) = data.batch(&idxs);
    data_term_batch(net, pert, images, &labels, c, kind, WeightMode::Materialized, quantize_acts, grads)
}

/// Tensor-level core of [`data_term_chunk`], also driving the truncated
/// per-batch search inside adversarial training (which runs against
/// simulated-quantization weights instead of materialized ones).
#[allow(clippy::too_many_arguments)]
pub(crate) fn data_term_batch(
    net: &Network,
    pert: &WeightPerturbation,
    images: Tensor,
    labels: &[usize],
    c: f64,
    kind: SurrogateKind,
    weight_mode: WeightMode,
    quantize_acts: bool,
    grads: &mut [Tensor],
) -> Result<(f64, usize, usize)> {
    let mut g = Graph::new();
    let opts = ForwardOptions {
        weight_mode,
        training_stats: false,
        quantize_acts,
        perturbations: Some(&pert.deltas),
        trainable_params: false,
        trainable_perturbations: true,
    };
    let h = net.forward(&mut g, images, &opts)?;
    let correct = {
        let lv = g.value(h.logits).data();
        let classes = net.num_classes;
        labels
            .iter()
            .enumerate()
            .filter(|&(s, &t)| argmax_row(&lv[s * classes..][..classes]) == t)
            .count()
    };
    let total = surrogate_sum(&mut g, kind, h.logits, labels)?;
    let scaled = g.scale(total, c);
    if c != 0.0 {
        g.backward(scaled)?;
        for &(pos, node) in &h.delta_nodes {
            if let Some(dg) = g.grad(node) {
                for (acc, &dv) in grads[pos].data_mut().iter_mut().zip(dg) {
                    *acc += dv;
                }
            }
        }
    }
    Ok((g.value(scaled).data()[0], correct, g.log_clamp_events))
}

/// Value and location of the penalty subgradient: the single entry of
/// largest magnitude (ties to the lowest position in scan order), or `None`
/// at the all-zero origin where the subgradient is taken as zero.
pub(crate) fn bound_subgradient(pert: &WeightPerturbation) -> (f64, Option<(usize, usize, f64)>) {
    let mut max_abs = 0.0;
    let mut at = None;
    for (ti, d) in pert.deltas.iter().enumerate() {
        for (fi, &v) in d.data().iter().enumerate() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                at = Some((ti, fi, v.signum()));
            }
        }
    }
    (max_abs, at)
}

/// Relaxed objective at a point, without gradients: `c·Σp + (max|ΔW| − th_g)`
/// over the given batch. `quantize_acts` selects the deployed forward (true)
/// or the smooth variant used by gradient checks (false) — activation
/// quantization is a staircase whose finite differences say nothing about
/// the straight-through gradients the optimizer uses.
pub fn relaxed_objective(
    net: &Network,
    pert: &WeightPerturbation,
    images: Tensor,
    labels: &[usize],
    c: f64,
    kind: SurrogateKind,
    quantize_acts: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let opts = ForwardOptions {
        weight_mode: WeightMode::Materialized,
        quantize_acts,
        perturbations: Some(&pert.deltas),
        ..Default::default()
    };
    let h = net.forward(&mut g, images, &opts)?;
    let lv = g.value(h.logits).data();
    let classes = net.num_classes;
    let data_term: f64 = labels
        .iter()
        .enumerate()
        .map(|(s, &t)| surrogate_value(kind, &lv[s * classes..][..classes], t))
        .sum();
    Ok(c * data_term + (pert.max_abs() - pert.th_g))
}

/// Minimizes the relaxed objective over the perturbation at fixed `c` with
/// bias-corrected adaptive-moment updates (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
/// Weights, activation ranges and normalization statistics stay frozen; only
/// the perturbation moves. No projection is applied — the penalty term is
/// what keeps the magnitude in check, and [`binary_search_c`] rejects rounds
/// that exceed the bound.
pub fn optimize_perturbation(
    net: &Network,
    data: &Dataset,
    cfg: &SearchConfig,
) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    if data.len() == 0 {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut pert = WeightPerturbation::zeros(net, cfg.th_g);
    if cfg.random_init > 0.0 {
        let mut rng = rng_for(cfg.seed, streams::ATTACK_INIT);
        let r = cfg.random_init;
        for d in pert.deltas.iter_mut() {
            for v in d.data_mut().iter_mut() {
                *v = rng.gen_range(-r..=r);
            }
        }
    }
    let chunks = chunk_ranges(data.len(), cfg.batch);
    let mut grads: Vec<Tensor> =
        pert.deltas.iter().map(|d| Tensor::zeros(d.shape())).collect();
    let mut m: Vec<Tensor> = grads.clone();
    let mut v: Vec<Tensor> = grads.clone();
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut clamp_events = 0usize;

    for iter in 0..cfg.iters {
        for gt in grads.iter_mut() {
            gt.data_mut().fill(0.0);
        }
        let step_chunks: &[(usize, usize)] = if cfg.full_batch {
            &chunks
        } else {
            std::slice::from_ref(&chunks[iter % chunks.len()])
        };
        let mut data_value = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for &range in step_chunks {
            let (val, ok, clamps) = data_term_chunk(
                net,
                &pert,
                data,
                range,
                cfg.c,
                cfg.surrogate,
                true,
                &mut grads,
            )?;
            data_value += val;
            correct += ok;
            clamp_events += clamps;
            seen += range.1 - range.0;
        }
        let (max_abs, subgrad) = bound_subgradient(&pert);
        let objective = data_value + (max_abs - cfg.th_g);
        trace.push(TracePoint {
            iter,
            objective,
            batch_accuracy: correct as f64 / seen as f64,
            max_abs,
        });
        if !objective.is_finite() {
            return Err(Error::NonFiniteObjective { iter, trace });
        }
        if let Some((ti, fi, sign)) = subgrad {
            grads[ti].data_mut()[fi] += sign;
        }
        let t = (iter + 1) as i32;
        let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for ((dt, gt), (mt, vt)) in
            pert.deltas.iter_mut().zip(&grads).zip(m.iter_mut().zip(v.iter_mut()))
        {
            for (((dv, &gv), mv), vv) in dt
                .data_mut()
                .iter_mut()
                .zip(gt.data())
                .zip(mt.data_mut().iter_mut())
                .zip(vt.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *dv -= cfg.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
            }
        }
    }
    Ok(OptimizeOutcome { perturbation: pert, trace, clamp_events })
}

/// Deployed-network top-1 accuracy under an optional perturbation, with
/// per-sample records. Argmax ties break toward the lowest class index; the
/// confidence is the softmax probability of the predicted class. Chunking is
/// internal and does not affect any value.
pub fn evaluate_accuracy(
    net: &Network,
    pert: Option<&WeightPerturbation>,
    data: &Dataset,
) -> Result<EvalOutcome> {
    if data.len() == 0 {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let classes = net.num_classes;
    let mut records = Vec::with_capacity(data.len());
    let mut probs = vec![0.0; classes];
    for range in chunk_ranges(data.len(), EVAL_CHUNK) {
        let idxs: Vec<usize> = (range.0..range.1).collect();
        let (images, labels) = data.batch(&idxs);
        let logits = net.eval_logits(images, pert.map(|p| p.deltas.as_slice()))?;
        let lv = logits.data();
        for (s, &label) in labels.iter().enumerate() {
            let row = &lv[s * classes..][..classes];
            let predicted = argmax_row(row);
            softmax_row(row, &mut probs);
            records.push(SampleRecord { predicted, label, confidence: probs[predicted] });
        }
    }
    let correct = records.iter().filter(|r| r.predicted == r.label).count();
    Ok(EvalOutcome { accuracy: correct as f64 / records.len() as f64, records })
}

/// Finds the largest `c` in `[c_lo, c_hi]` whose optimized perturbation still
/// satisfies the bound, by bisection on `log10 c` with the perturbation
/// re-initialized each round. Both bracket ends count against the round
/// budget. Fails with [`Error::InfeasibleLowerBound`] when even `c_lo`
/// overshoots the bound.
pub fn binary_search_c(
    net: &Network,
    data: &Dataset,
    cfg: &SearchConfig,
) -> Result<CSearchOutcome> {
    cfg.validate()?;
    let clean = evaluate_accuracy(net, None, data)?;
    if cfg.th_g == 0.0 {
        // Degenerate bound: the only admissible perturbation is zero.
        return Ok(CSearchOutcome {
            chosen_c: 0.0,
            perturbation: WeightPerturbation::zeros(net, 0.0),
            worst_accuracy: clean.accuracy,
            clean_accuracy: clean.accuracy,
            records: clean.records,
            trace: Vec::new(),
            rounds: Vec::new(),
            monotone_endpoints: true,
            clamp_events: 0,
        });
    }

    let mut rounds: Vec<RoundRecord> = Vec::new();
    let run = |c: f64, rounds: &mut Vec<RoundRecord>| -> Result<(OptimizeOutcome, EvalOutcome)> {
        let out = optimize_perturbation(net, data, &SearchConfig { c, ..cfg.clone() })?;
        let eval = evaluate_accuracy(net, Some(&out.perturbation), data)?;
        let achieved_l = out.perturbation.max_abs();
        rounds.push(RoundRecord {
            c,
            achieved_l,
            feasible: achieved_l <= cfg.th_g,
            accuracy: eval.accuracy,
        });
        Ok((out, eval))
    };

    let (lo_out, lo_eval) = run(cfg.c_lo, &mut rounds)?;
    if !rounds[0].feasible {
        return Err(Error::InfeasibleLowerBound {
            c_lo: cfg.c_lo,
            achieved_l: rounds[0].achieved_l,
            th_g: cfg.th_g,
        });
    }
    let (hi_out, hi_eval) = run(cfg.c_hi, &mut rounds)?;
    let monotone_endpoints = rounds[1].achieved_l >= rounds[0].achieved_l;

    let mut best = (cfg.c_lo, lo_out, lo_eval);
    if rounds[1].feasible {
        best = (cfg.c_hi, hi_out, hi_eval);
    } else {
        let (mut lg_lo, mut lg_hi) = (cfg.c_lo.log10(), cfg.c_hi.log10());
        for _ in 0..cfg.rounds.saturating_sub(2) {
            let c_mid = 10f64.powf(0.5 * (lg_lo + lg_hi));
            let (out, eval) = run(c_mid, &mut rounds)?;
            if rounds.last().expect("just pushed").feasible {
                lg_lo = c_mid.log10();
                best = (c_mid, out, eval);
            } else {
                lg_hi = c_mid.log10();
            }
        }
    }

    let (chosen_c, best_out, best_eval) = best;
    // The zero perturbation is always admissible, so the report can never
    // claim a "worst case" better than the clean network.
    let (perturbation, worst) = if best_eval.accuracy > clean.accuracy {
        (WeightPerturbation::zeros(net, cfg.th_g), clean.clone())
    } else {
        (best_out.perturbation, best_eval)
    };
    perturbation.check_bound(0.0)?;
    Ok(CSearchOutcome {
        chosen_c,
        perturbation,
        worst_accuracy: worst.accuracy,
        clean_accuracy: clean.accuracy,
        records: worst.records,
        trace: best_out.trace,
        rounds,
        monotone_endpoints,
        clamp_events: best_out.clamp_events,
    })
}
