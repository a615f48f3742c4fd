//! Training-side defenses against worst-case weight perturbations.
//!
//! Three levers, in increasing order of cost: sweeping the write-verify
//! bound to find how tight it must be for an acceptable worst case,
//! variation-aware training (random weight noise in the training forward),
//! and adversarial training (a truncated worst-case search against every
//! mini-batch, with the weight update taken at the perturbed point). The
//! trainers return ordinary [`TrainOutcome`]s — checkpoint selection stays by
//! clean deployed validation accuracy.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::device::WeightPerturbation;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::search::{binary_search_c, bound_subgradient, data_term_batch, SearchConfig};
use crate::tensor::Tensor;
use crate::train::{train_with, EpochRecord, TrainConfig, TrainOutcome};

/// How a model was produced, for aggregated reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Regular,
    VariationAware,
    Adversarial,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Regular => "regular",
            Method::VariationAware => "variation_aware",
            Method::Adversarial => "adversarial",
        })
    }
}

/// Worst-case accuracies of one method over independently trained seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardeningResult {
    pub method: Method,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl HardeningResult {
    pub fn aggregate(method: Method, per_seed: Vec<f64>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::InvalidArgument("aggregation over zero seeds".into()));
        }
        let (mean, std) = mean_std(&per_seed);
        Ok(Self { method, per_seed, mean, std })
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Training with fresh uniform weight noise in `[-th_g, th_g]` sampled every
/// step and applied to the forward pass only; the backward pass treats the
/// noise as a constant and updates clean weights. `th_g = 0` is exactly
/// regular training, same trajectory under the same seed.
pub fn variation_aware_train(
    net: &mut Network,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    th_g: f64,
    on_epoch: impl FnMut(&EpochRecord, &Network),
) -> Result<TrainOutcome> {
    if !(th_g >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise bound {th_g} must be ≥ 0")));
    }
    let cfg = TrainConfig { noise_bound: th_g, ..cfg.clone() };
    crate::train::train(net, train_data, val_data, &cfg, on_epoch)
}

/// Budget of the per-batch search inside adversarial training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerSearchMode {
    /// A fixed-`c` run of a few optimizer steps — the default; keeps the
    /// per-batch cost at `iters` forward/backward passes.
    #[serde(alias = "truncated")]
    Truncated,
    /// A full bisection over `c` against every batch. Orders of magnitude
    /// slower; only sensible for tiny runs.
    Full,
}

impl Default for InnerSearchMode {
    fn default() -> Self {
        InnerSearchMode::Truncated
    }
}

/// Adversarial training: before each weight update, a truncated worst-case
/// search finds a bounded perturbation against the current batch, and the
/// gradient is taken at the perturbed weights. `inner` supplies the search
/// budget (`c`, `lr`, `iters`, surrogate; plus the `c` interval and round
/// count in [`InnerSearchMode::Full`]); its own `th_g` and batching fields
/// are superseded by the `th_g` argument and the training batch.
pub fn adversarial_train(
    net: &mut Network,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    th_g: f64,
    inner: &SearchConfig,
    mode: InnerSearchMode,
    on_epoch: impl FnMut(&EpochRecord, &Network),
) -> Result<TrainOutcome> {
    if !(th_g >= 0.0) {
        return Err(Error::InvalidArgument(format!("perturbation bound {th_g} must be ≥ 0")));
    }
    if cfg.noise_bound > 0.0 {
        return Err(Error::InvalidArgument(
            "adversarial training already perturbs every step; it cannot be combined \
             with variation-aware noise (noise_bound > 0)"
                .into(),
        ));
    }
    SearchConfig { th_g, ..inner.clone() }.validate()?;

    let weight_mode = cfg.weight_mode;
    train_with(net, train_data, val_data, cfg, on_epoch, |current, images, labels| {
        if th_g == 0.0 {
            return Ok(None);
        }
        let mut pert = match mode {
            InnerSearchMode::Truncated => {
                batch_search(current, images, labels, th_g, inner.c, inner, weight_mode)?
            }
            InnerSearchMode::Full => {
                batch_bisect(current, images, labels, th_g, inner, weight_mode)?
            }
        };
        // The truncated search has no feasibility guarantee; the box
        // projection supplies it, which is exactly the write-verify model.
        pert.project();
        Ok(Some(pert))
    })
}

/// Fixed-`c` relaxed-objective descent against a single batch.
fn batch_search(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    th_g: f64,
    c: f64,
    inner: &SearchConfig,
    weight_mode: crate::model::WeightMode,
) -> Result<WeightPerturbation> {
    let mut pert = WeightPerturbation::zeros(net, th_g);
    let mut m: Vec<Tensor> = pert.deltas.iter().map(|d| Tensor::zeros(d.shape())).collect();
    let mut v: Vec<Tensor> = pert.deltas.iter().map(|d| Tensor::zeros(d.shape())).collect();
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    for t in 1..=inner.iters {
        let mut grads: Vec<Tensor> =
            pert.deltas.iter().map(|d| Tensor::zeros(d.shape())).collect();
        data_term_batch(
            net,
            &pert,
            images.clone(),
            labels,
            c,
            inner.surrogate,
            weight_mode,
            true,
            &mut grads,
        )?;
        if let (_, Some((ti, fi, sign))) = bound_subgradient(&pert) {
            grads[ti].data_mut()[fi] += sign;
        }

        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for ((delta, grad), (mt, vt)) in
            pert.deltas.iter_mut().zip(&grads).zip(m.iter_mut().zip(v.iter_mut()))
        {
            for (((dv, &gv), mv), vv) in delta
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(mt.data_mut())
                .zip(vt.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *dv -= inner.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
            }
        }
    }
    Ok(pert)
}

/// Full bisection over `c` against a single batch: probes the interval ends,
/// then bisects in log space, and returns the feasible probe that
/// misclassified the most. Falls back to the last probe when no probe stayed
/// inside the bound (the caller projects either way).
fn batch_bisect(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    th_g: f64,
    inner: &SearchConfig,
    weight_mode: crate::model::WeightMode,
) -> Result<WeightPerturbation> {
    let correct_at = |pert: &WeightPerturbation| -> Result<usize> {
        let mut sink: Vec<Tensor> =
            pert.deltas.iter().map(|d| Tensor::zeros(d.shape())).collect();
        let (_, correct, _) = data_term_batch(
            net,
            pert,
            images.clone(),
            labels,
            0.0,
            inner.surrogate,
            weight_mode,
            true,
            &mut sink,
        )?;
        Ok(correct)
    };

    let probe = |c: f64| -> Result<(WeightPerturbation, bool, usize)> {
        let pert = batch_search(net, images, labels, th_g, c, inner, weight_mode)?;
        let feasible = pert.max_abs() <= th_g;
        let correct = correct_at(&pert)?;
        Ok((pert, feasible, correct))
    };

    let mut best: Option<(WeightPerturbation, usize)> = None;
    let consider = |cand: (WeightPerturbation, bool, usize), best: &mut Option<_>| {
        let (pert, feasible, correct) = cand;
        if feasible && best.as_ref().is_none_or(|(_, bc)| correct < *bc) {
            *best = Some((pert, correct));
        }
    };

    let (mut lo, mut hi) = (inner.c_lo, inner.c_hi);
    consider(probe(lo)?, &mut best);
    let last = probe(hi)?;
    let mut fallback = last.0.clone();
    let hi_feasible = last.1;
    consider(last, &mut best);

    if !hi_feasible {
        for _ in 0..inner.rounds.saturating_sub(2) {
            let mid = 10f64.powf((lo.log10() + hi.log10()) / 2.0);
            let cand = probe(mid)?;
            fallback = cand.0.clone();
            if cand.1 {
                lo = mid;
            } else {
                hi = mid;
            }
            consider(cand, &mut best);
        }
    }
    Ok(best.map(|(p, _)| p).unwrap_or(fallback))
}

/// The write-verify sweep: one worst-case search per bound value per
/// independently trained network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Bound values to evaluate; distinct, each ≥ 0.
    pub th_g_values: Vec<f64>,
    /// Maximum tolerated drop of mean worst-case accuracy below the clean
    /// reference, as a fraction (0.05 = five percentage points).
    pub drop_threshold: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            th_g_values: vec![0.001, 0.003, 0.005, 0.007, 0.009, 0.012, 0.02, 0.03],
            drop_threshold: 0.05,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.th_g_values.is_empty() {
            return Err(Error::InvalidArgument("sweep needs at least one bound value".into()));
        }
        for &v in &self.th_g_values {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("bad sweep bound {v}")));
            }
        }
        let mut sorted = self.th_g_values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate sweep bound values".into()));
        }
        if !(self.drop_threshold >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "drop threshold {} must be ≥ 0",
                self.drop_threshold
            )));
        }
        Ok(())
    }
}

/// One seed's result at one bound value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeedPoint {
    pub clean_accuracy: f64,
    pub worst_accuracy: f64,
    pub chosen_c: f64,
}

/// All seeds at one bound value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub th_g: f64,
    pub seeds: Vec<SeedPoint>,
    pub mean_clean: f64,
    pub mean_worst: f64,
    pub std_worst: f64,
}

/// The full curve plus the star point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    /// Points in ascending bound order.
    pub points: Vec<SweepPoint>,
    /// Mean clean accuracy over the swept networks — by the degenerate
    /// zero-bound case, exactly the curve value at `th_g = 0`.
    pub reference_accuracy: f64,
    /// Largest swept bound whose mean worst-case accuracy stays within
    /// `drop_threshold` of the reference; absent when every point fails.
    pub star: Option<f64>,
    pub drop_threshold: f64,
}

/// Runs the worst-case search for every bound value on every network (one
/// per training seed) and locates the largest bound that keeps the mean
/// worst-case accuracy within the configured drop of the clean reference.
/// `on_point` fires after each completed bound, in ascending bound order.
///
/// The search learning rate is rescaled per point to keep the lr : bound
/// ratio of the supplied configuration. The perturbation's natural scale is
/// the bound itself, and the adaptive-moment optimizer moves every
/// coordinate about `lr` per step regardless of gradient magnitude — a
/// fixed lr would overshoot every bound much smaller than the one the
/// configuration was calibrated for.
pub fn write_verify_sweep(
    nets: &[Network],
    data: &Dataset,
    spec: &SweepSpec,
    search: &SearchConfig,
    mut on_point: impl FnMut(&SweepPoint),
) -> Result<SweepOutcome> {
    spec.validate()?;
    if nets.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one trained network".into()));
    }

    let mut values = spec.th_g_values.clone();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut points = Vec::with_capacity(values.len());
    for &th_g in &values {
        let lr = if search.th_g > 0.0 { search.lr * th_g / search.th_g } else { search.lr };
        let mut seeds = Vec::with_capacity(nets.len());
        for net in nets {
            let cfg = SearchConfig { th_g, lr, ..search.clone() };
            let out = binary_search_c(net, data, &cfg)?;
            seeds.push(SeedPoint {
                clean_accuracy: out.clean_accuracy,
                worst_accuracy: out.worst_accuracy,
                chosen_c: out.chosen_c,
            });
        }
        let worst: Vec<f64> = seeds.iter().map(|s| s.worst_accuracy).collect();
        let clean: Vec<f64> = seeds.iter().map(|s| s.clean_accuracy).collect();
        let (mean_worst, std_worst) = mean_std(&worst);
        let (mean_clean, _) = mean_std(&clean);
        let point = SweepPoint { th_g, seeds, mean_clean, mean_worst, std_worst };
        on_point(&point);
        points.push(point);
    }

    let reference_accuracy = points[0].mean_clean;
    let star = points
        .iter()
        .rev()
        .find(|p| p.mean_worst >= reference_accuracy - spec.drop_threshold)
        .map(|p| p.th_g);

    Ok(SweepOutcome { points, reference_accuracy, star, drop_threshold: spec.drop_threshold })
}
