//! Reference attacks the relaxed search is measured against.
//!
//! Two baselines bracket the proposed method from the weak side: Monte-Carlo
//! sampling, which evaluates random in-bound perturbations and keeps the
//! worst, and a weight-space projected gradient attack, which climbs the
//! cross-entropy loss by coordinate signs and clamps back to the box after
//! every step. Both run against deployed forward semantics (quantized
//! weights and activations) so their accuracies are directly comparable with
//! the search results.

use crate::data::Dataset;
use crate::device::{mc_rng, sample_perturbation, NoiseDistribution, WeightPerturbation};
use crate::error::{Error, Result};
use crate::graph::{Graph, Reduction};
use crate::model::{ForwardOptions, Network, WeightMode};
use crate::search::{evaluate_accuracy, SampleRecord};
use crate::tensor::Tensor;

/// Default step count for the projected-gradient baseline.
pub const PGD_DEFAULT_STEPS: usize = 40;

/// Default step size as a fraction of the bound: `th_g / 10`.
pub const PGD_DEFAULT_STEP_FRACTION: f64 = 0.1;

/// Samples evaluated per forward pass; bounds activation memory.
const EVAL_CHUNK: usize = 64;

/// Result of a Monte-Carlo worst-case scan.
#[derive(Debug, Clone)]
pub struct McOutcome {
    pub clean_accuracy: f64,
    /// Lowest accuracy over all runs.
    pub worst_accuracy: f64,
    /// Index of the run that produced it; ties keep the earliest run.
    pub worst_run: usize,
    /// Accuracy of every run, in run order. Entry `worst_run` equals
    /// `worst_accuracy`; the running minimum is non-increasing by
    /// construction.
    pub accuracies: Vec<f64>,
    /// The perturbation of the worst run.
    pub perturbation: WeightPerturbation,
    /// Per-sample records of the worst run.
    pub records: Vec<SampleRecord>,
}

/// Result of the projected-gradient baseline.
#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub clean_accuracy: f64,
    pub accuracy: f64,
    pub perturbation: WeightPerturbation,
    pub records: Vec<SampleRecord>,
    /// `max |delta|` after each step; every entry respects the bound.
    pub trace: Vec<f64>,
}

/// Evaluates `n_runs` sampled perturbations and keeps the worst. Each run
/// draws from its own seed-derived stream, so prefixes are stable: the first
/// `k` runs of an `n`-run scan are identical to a `k`-run scan.
pub fn mc_worstcase(
    net: &Network,
    data: &Dataset,
    th_g: f64,
    n_runs: usize,
    dist: NoiseDistribution,
    seed: u64,
) -> Result<McOutcome> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("Monte-Carlo needs at least one run".into()));
    }
    if th_g < 0.0 {
        return Err(Error::InvalidArgument(format!("negative bound {th_g}")));
    }
    let clean = evaluate_accuracy(net, None, data)?;

    let mut accuracies = Vec::with_capacity(n_runs);
    let mut worst: Option<(usize, f64, WeightPerturbation, Vec<SampleRecord>)> = None;
    for run in 0..n_runs {
        let mut rng = mc_rng(seed, run as u64);
        let pert = sample_perturbation(net, th_g, dist, &mut rng);
        let eval = evaluate_accuracy(net, Some(&pert), data)?;
        accuracies.push(eval.accuracy);
        if worst.as_ref().is_none_or(|(_, acc, _, _)| eval.accuracy < *acc) {
            worst = Some((run, eval.accuracy, pert, eval.records));
        }
    }
    let (worst_run, worst_accuracy, perturbation, records) = worst.unwrap();
    Ok(McOutcome {
        clean_accuracy: clean.accuracy,
        worst_accuracy,
        worst_run,
        accuracies,
        perturbation,
        records,
    })
}

/// Accumulates the gradient of summed cross-entropy w.r.t. the perturbation
/// over the whole dataset, returning the total loss.
fn ce_gradient(
    net: &Network,
    pert: &WeightPerturbation,
    data: &Dataset,
    grads: &mut [Tensor],
) -> Result<f64> {
    let n = data.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idxs: Vec<usize> = (start..end).collect();
        let (images, labels) = data.batch(&idxs);
        let mut g = Graph::new();
        let opts = ForwardOptions {
            weight_mode: WeightMode::Materialized,
            training_stats: false,
            quantize_acts: true,
            perturbations: Some(&pert.deltas),
            trainable_params: false,
            trainable_perturbations: true,
        };
        let h = net.forward(&mut g, images, &opts)?;
        let loss = g.cross_entropy(h.logits, &labels, Reduction::Sum)?;
        total += g.value(loss).data()[0];
        g.backward(loss)?;
        for &(pos, node) in &h.delta_nodes {
            if let Some(grad) = g.grad(node) {
                for (acc, &gv) in grads[pos].data_mut().iter_mut().zip(grad) {
                    *acc += gv;
                }
            }
        }
        start = end;
    }
    Ok(total)
}

/// Sign-gradient ascent on cross-entropy w.r.t. the perturbation, projected
/// onto `[-th_g, th_g]` after every step. Zero-initialized, full-batch, no
/// restarts; coordinates with zero gradient stay put.
pub fn weight_pgd(
    net: &Network,
    data: &Dataset,
    th_g: f64,
    steps: usize,
    step_size: f64,
) -> Result<PgdOutcome> {
    if steps == 0 {
        return Err(Error::InvalidArgument("projected-gradient attack needs at least one step".into()));
    }
    if !(step_size > 0.0) {
        return Err(Error::InvalidArgument(format!("step size {step_size} must be positive")));
    }
    if th_g < 0.0 {
        return Err(Error::InvalidArgument(format!("negative bound {th_g}")));
    }
    let clean = evaluate_accuracy(net, None, data)?;
    let mut pert = WeightPerturbation::zeros(net, th_g);

    // A zero bound projects every step back to the origin; the answer is the
    // clean network without spending gradient passes to find out.
    if th_g == 0.0 {
        return Ok(PgdOutcome {
            clean_accuracy: clean.accuracy,
            accuracy: clean.accuracy,
            perturbation: pert,
            records: clean.records,
            trace: vec![0.0; steps],
        });
    }

    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut grads: Vec<Tensor> =
            pert.deltas.iter().map(|d| Tensor::zeros(d.shape())).collect();
        ce_gradient(net, &pert, data, &mut grads)?;
        for (delta, grad) in pert.deltas.iter_mut().zip(&grads) {
            for (v, &gv) in delta.data_mut().iter_mut().zip(grad.data()) {
                // Ascent: the attack climbs the loss. signum() of ±0.0 is
                // ±1.0 in IEEE terms, so dead coordinates need the explicit
                // guard to stay put.
                if gv != 0.0 {
                    *v += step_size * gv.signum();
                }
            }
        }
        pert.project();
        trace.push(pert.max_abs());
    }
    pert.check_bound(0.0)?;
    let eval = evaluate_accuracy(net, Some(&pert), data)?;
    Ok(PgdOutcome {
        clean_accuracy: clean.accuracy,
        accuracy: eval.accuracy,
        perturbation: pert,
        records: eval.records,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::quant::QuantConfig;
    use crate::train::{rng_for, streams, train, TrainConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn brightness_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = rng_for(seed, 77);
        let mut images = Vec::with_capacity(n * 28 * 28);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let bright = i % 2 == 1;
            labels.push(bright as u8);
            for _ in 0..28 * 28 {
                let base: u8 = if bright { 180 } else { 60 };
                images.push(base.saturating_add(rng.gen_range(0..40)));
            }
        }
        Dataset::new("toy", 1, 28, 28, images, labels, vec![0.5], vec![0.25]).unwrap()
    }

    fn deployed_lenet(seed: u64) -> Network {
        let mut net = crate::model::lenet(QuantConfig::default());
        let mut rng = rng_for(seed, streams::INIT);
        net.init_parameters(&mut rng);
        for o in net.act_observers.iter_mut() {
            o.value = Some(2.5);
        }
        net.quantize_weights();
        net
    }

    fn trained_lenet(seed: u64) -> Network {
        let mut net = crate::model::lenet(QuantConfig::default());
        net.init_parameters(&mut rng_for(seed, streams::INIT));
        let train_set = brightness_dataset(96, 21);
        let val_set = brightness_dataset(32, 22);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr: 0.02,
            val_subset: 0,
            seed,
            ..TrainConfig::default()
        };
        train(&mut net, &train_set, &val_set, &cfg, |_, _| {}).unwrap();
        net.quantize_weights();
        net
    }

    #[test]
    fn single_run_with_zero_bound_is_the_clean_accuracy() {
        let net = deployed_lenet(1);
        let data = brightness_dataset(12, 5);
        let clean = evaluate_accuracy(&net, None, &data).unwrap();
        let mc = mc_worstcase(&net, &data, 0.0, 1, NoiseDistribution::Uniform, 7).unwrap();
        assert_eq!(mc.worst_accuracy, clean.accuracy);
        assert_eq!(mc.clean_accuracy, clean.accuracy);
        assert_eq!(mc.perturbation.max_abs(), 0.0);
        assert_eq!(mc.worst_run, 0);
    }

    #[test]
    fn mc_scan_is_reproducible_and_prefix_stable() {
        let net = deployed_lenet(2);
        let data = brightness_dataset(12, 6);
        let a = mc_worstcase(&net, &data, 0.03, 6, NoiseDistribution::Uniform, 11).unwrap();
        let b = mc_worstcase(&net, &data, 0.03, 6, NoiseDistribution::Uniform, 11).unwrap();
        assert_eq!(a.accuracies, b.accuracies);
        assert_eq!(a.perturbation.deltas[0].data(), b.perturbation.deltas[0].data());

        // The first three runs of a longer scan are the same three runs.
        let short = mc_worstcase(&net, &data, 0.03, 3, NoiseDistribution::Uniform, 11).unwrap();
        assert_eq!(short.accuracies[..], a.accuracies[..3]);
        assert!(a.worst_accuracy <= short.worst_accuracy);
    }

    #[test]
    fn mc_worst_is_the_minimum_and_respects_the_bound() {
        let net = deployed_lenet(3);
        let data = brightness_dataset(12, 7);
        for dist in [NoiseDistribution::Uniform, NoiseDistribution::Gaussian] {
            let mc = mc_worstcase(&net, &data, 0.05, 5, dist, 13).unwrap();
            let min = mc.accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(mc.worst_accuracy, min);
            assert_eq!(mc.accuracies[mc.worst_run], min);
            mc.perturbation.check_bound(0.0).unwrap();
            assert!(mc.perturbation.max_abs() > 0.0, "noise was actually applied");
        }
    }

    #[test]
    fn mc_rejects_zero_runs() {
        let net = deployed_lenet(4);
        let data = brightness_dataset(4, 8);
        assert!(matches!(
            mc_worstcase(&net, &data, 0.03, 0, NoiseDistribution::Uniform, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn pgd_with_zero_bound_returns_the_clean_network() {
        let net = deployed_lenet(5);
        let data = brightness_dataset(12, 9);
        let out = weight_pgd(&net, &data, 0.0, 3, 0.01).unwrap();
        assert_eq!(out.accuracy, out.clean_accuracy);
        assert_eq!(out.perturbation.max_abs(), 0.0);
        assert!(out.trace.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn pgd_respects_the_bound_after_every_step() {
        let net = trained_lenet(30);
        let data = brightness_dataset(24, 10);
        let th = 0.02;
        // A step size larger than the bound forces the projection to act on
        // every step.
        let out = weight_pgd(&net, &data, th, 3, th * 2.0).unwrap();
        assert_eq!(out.trace.len(), 3);
        for &m in &out.trace {
            assert!(m <= th, "max |delta| {m} exceeded the bound {th}");
        }
        // Something moved, and moved coordinates sit exactly on the box edge.
        assert_eq!(out.trace[0], th);
        out.perturbation.check_bound(0.0).unwrap();
    }

    #[test]
    fn pgd_is_deterministic() {
        let net = trained_lenet(31);
        let data = brightness_dataset(16, 11);
        let a = weight_pgd(&net, &data, 0.03, 4, 0.003).unwrap();
        let b = weight_pgd(&net, &data, 0.03, 4, 0.003).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        for (x, y) in a.perturbation.deltas.iter().zip(&b.perturbation.deltas) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn pgd_hurts_a_trained_network() {
        let net = trained_lenet(32);
        let data = brightness_dataset(32, 12);
        let clean = evaluate_accuracy(&net, None, &data).unwrap().accuracy;
        assert!(clean >= 0.9, "toy training failed: clean accuracy {clean}");
        let out = weight_pgd(&net, &data, 0.2, 12, 0.04).unwrap();
        assert!(
            out.accuracy < clean,
            "a generous bound should break a toy model: {} vs clean {clean}",
            out.accuracy
        );
    }

    #[test]
    fn pgd_rejects_bad_arguments() {
        let net = deployed_lenet(6);
        let data = brightness_dataset(4, 13);
        assert!(matches!(
            weight_pgd(&net, &data, 0.03, 0, 0.003),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            weight_pgd(&net, &data, 0.03, 4, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            weight_pgd(&net, &data, -0.01, 4, 0.003),
            Err(Error::InvalidArgument(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        // The running minimum over a fixed stream of runs can only go down
        // as more runs are added.
        #[test]
        fn mc_minimum_is_non_increasing_in_run_count(k in 1usize..5) {
            let net = deployed_lenet(7);
            let data = brightness_dataset(8, 14);
            let long = mc_worstcase(&net, &data, 0.04, 5, NoiseDistribution::Uniform, 17).unwrap();
            let short = mc_worstcase(&net, &data, 0.04, k, NoiseDistribution::Uniform, 17).unwrap();
            prop_assert!(long.worst_accuracy <= short.worst_accuracy);
        }
    }
}
