//! Quantization-aware training.
//!
//! The loop trains full-precision master weights through straight-through
//! fake quantization, maintains activation-range observers and batch-norm
//! running statistics, and selects the checkpoint by *deployed* validation
//! accuracy — the network with weights snapped onto the grid and frozen
//! activation ranges, exactly what later analysis attacks.
//!
//! All randomness flows from an explicit seed through fixed ChaCha streams
//! (see [`streams`]), so a run is reproducible bit for bit.

use crate::data::Dataset;
use crate::device::WeightPerturbation;
use crate::error::{Error, Result};
use crate::graph::{Graph, Reduction};
use crate::model::{ForwardOptions, Network, ParamKind, WeightMode};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed ChaCha stream ids so independent random decisions never share a
/// sequence. The same seed with a different stream is an independent RNG.
pub mod streams {
    /// Parameter initialization.
    pub const INIT: u64 = 0;
    /// Epoch shuffling.
    pub const SHUFFLE: u64 = 1;
    /// Data augmentation.
    pub const AUGMENT: u64 = 2;
    /// Training-time weight noise (variation-aware training).
    pub const NOISE: u64 = 3;
    /// Optional random initialization of the perturbation search.
    pub const ATTACK_INIT: u64 = 4;
    /// Base for per-run sampling; run `i` uses `MC_BASE + i`.
    pub const MC_BASE: u64 = 1000;
}

/// Constructs the RNG for a given seed and stream.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// SGD with classical momentum.
    Sgd,
    /// Adam with the usual (0.9, 0.999, 1e-8) defaults.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over the full run.
    Cosine,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    /// Random crop + flip on training batches.
    pub augment: bool,
    /// Simulated quantization during training; `Float` for a plain baseline.
    pub weight_mode: WeightMode,
    /// Max-abs bound of uniform weight noise injected after quantization on
    /// every training forward (variation-aware training). 0 disables the
    /// mechanism entirely, making the run identical to plain training.
    pub noise_bound: f64,
    /// Validation subset size for per-epoch checkpoint selection
    /// (0 = the full validation set).
    pub val_subset: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            optimizer: OptimizerKind::Sgd,
            schedule: LrSchedule::Cosine,
            augment: false,
            weight_mode: WeightMode::SimulatedQuant,
            noise_bound: 0.0,
            val_subset: 0,
            seed: 0,
        }
    }
}

/// One epoch of the training history.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Per-parameter optimizer state.
enum OptState {
    Sgd { velocity: Vec<Vec<f64>> },
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: u64 },
}

impl OptState {
    fn new(kind: OptimizerKind, params: &[usize], net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> =
            params.iter().map(|&i| vec![0.0; net.params[i].data.len()]).collect();
        match kind {
            OptimizerKind::Sgd => OptState::Sgd { velocity: zeros },
            OptimizerKind::Adam => OptState::Adam { m: zeros.clone(), v: zeros, t: 0 },
        }
    }

    /// Applies one update. `grads[i]` belongs to trainable param slot `i`.
    fn step(&mut self, net: &mut Network, slots: &[usize], grads: &[Vec<f64>], lr: f64, momentum: f64) {
        match self {
            OptState::Sgd { velocity } => {
                for (slot, &pi) in slots.iter().enumerate() {
                    let vel = &mut velocity[slot];
                    let data = net.params[pi].data.data_mut();
                    for ((w, v), &g) in data.iter_mut().zip(vel.iter_mut()).zip(&grads[slot]) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let bc1 = 1.0 - b1.powi(*t as i32);
                let bc2 = 1.0 - b2.powi(*t as i32);
                for (slot, &pi) in slots.iter().enumerate() {
                    let (ms, vs) = (&mut m[slot], &mut v[slot]);
                    let data = net.params[pi].data.data_mut();
                    for (((w, mi), vi), &g) in
                        data.iter_mut().zip(ms.iter_mut()).zip(vs.iter_mut()).zip(&grads[slot])
                    {
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Deployed-model accuracy over the given sample indices: weights snapped,
/// activation ranges frozen, running statistics in place.
fn deployed_accuracy(net: &Network, data: &Dataset, idxs: &[usize]) -> Result<f64> {
    let mut deployed = net.clone();
    deployed.quantize_weights();
    let mut correct = 0usize;
    for chunk in idxs.chunks(256) {
        let (x, labels) = data.batch(chunk);
        let logits = deployed.eval_logits(x, None)?;
        let c = deployed.num_classes;
        for (s, &t) in labels.iter().enumerate() {
            if crate::model::argmax_row(&logits.data()[s * c..(s + 1) * c]) == t {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / idxs.len() as f64)
}

/// Trains `net` in place and restores the best-validation epoch's state
/// before returning. `net` must already be initialized. `on_epoch` fires
/// after every epoch with the fresh record and the network in its current
/// (end-of-epoch, not yet best-restored) state — callers use it for progress
/// logging and crash-safe snapshots.
pub fn train(
    net: &mut Network,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord, &Network),
) -> Result<TrainOutcome> {
    train_with(net, train_data, val_data, cfg, on_epoch, |_, _, _| Ok(None))
}

/// [`train`] with a per-batch perturbation provider: before each forward the
/// provider sees the current network and the batch and may return a weight
/// perturbation to apply (as a constant) for that step — the mechanism behind
/// adversarial training. Returning `None` leaves the step untouched. The
/// provider is mutually exclusive with `noise_bound`, and anything it returns
/// must already satisfy its own bound.
pub fn train_with(
    net: &mut Network,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Network),
    mut perturber: impl FnMut(&Network, &Tensor, &[usize]) -> Result<Option<WeightPerturbation>>,
) -> Result<TrainOutcome> {
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
    }
    let mut shuffle_rng = rng_for(cfg.seed, streams::SHUFFLE);
    let mut augment_rng = rng_for(cfg.seed, streams::AUGMENT);
    let mut noise_rng = rng_for(cfg.seed, streams::NOISE);

    let val_idxs: Vec<usize> = if cfg.val_subset == 0 || cfg.val_subset >= val_data.len() {
        (0..val_data.len()).collect()
    } else {
        val_data.balanced_indices(cfg.val_subset / val_data.num_classes().max(1))
    };

    let trainable: Vec<usize> = (0..net.params.len()).collect();
    let mut opt = OptState::new(cfg.optimizer, &trainable, net);
    let widx = net.weight_param_indices();

    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let mut step = 0usize;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>, Vec<crate::model::NormStats>, Vec<crate::quant::EmaObserver>)> =
        None;

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = if cfg.augment {
                train_data.batch_augmented(chunk, &mut augment_rng)
            } else {
                train_data.batch(chunk)
            };

            // fresh uniform weight noise per step (variation-aware training)
            let noise: Option<Vec<Tensor>> = (cfg.noise_bound > 0.0).then(|| {
                widx.iter()
                    .map(|&i| {
                        let shape = net.params[i].data.shape().to_vec();
                        let n: usize = shape.iter().product();
                        Tensor::new(
                            shape,
                            (0..n)
                                .map(|_| noise_rng.gen_range(-cfg.noise_bound..=cfg.noise_bound))
                                .collect(),
                        )
                        .expect("noise shape")
                    })
                    .collect()
            });

            let injected: Option<Vec<Tensor>> = match perturber(net, &x, &labels)? {
                Some(p) => {
                    if noise.is_some() {
                        return Err(Error::InvalidArgument(
                            "a perturbation provider and noise_bound > 0 are mutually \
                             exclusive; pick one weight-perturbation mechanism"
                                .into(),
                        ));
                    }
                    p.check_bound(0.0)?;
                    Some(p.deltas)
                }
                None => noise,
            };

            let mut g = Graph::new();
            let opts = ForwardOptions {
                weight_mode: cfg.weight_mode,
                training_stats: true,
                quantize_acts: true,
                perturbations: injected.as_deref(),
                trainable_params: true,
                trainable_perturbations: false,
            };
            let h = net.forward(&mut g, x, &opts)?;
            let loss = g.cross_entropy(h.logits, &labels, Reduction::Mean)?;
            let loss_val = g.value(loss).data()[0];
            // the stabilized loss stays finite even after the weights blow
            // up, so guard on magnitude as well as on NaN/inf
            if !loss_val.is_finite() || loss_val > 1e30 {
                return Err(Error::Divergence(format!(
                    "training loss {loss_val:.3e} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss_val * labels.len() as f64;
            seen += labels.len();
            g.backward(loss)?;

            // gather gradients in trainable-slot order, adding weight decay
            // to weights only
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(trainable.len());
            let mut by_param = vec![None::<&[f64]>; net.params.len()];
            for &(pi, node) in &h.param_nodes {
                by_param[pi] = g.grad(node);
            }
            for &pi in &trainable {
                let mut gr = by_param[pi].map_or_else(
                    || vec![0.0; net.params[pi].data.len()],
                    |s| s.to_vec(),
                );
                if cfg.weight_decay > 0.0 && net.params[pi].kind == ParamKind::Weight {
                    for (gv, &w) in gr.iter_mut().zip(net.params[pi].data.data()) {
                        *gv += cfg.weight_decay * w;
                    }
                }
                grads.push(gr);
            }

            let lr = match cfg.schedule {
                LrSchedule::Constant => cfg.lr,
                LrSchedule::Cosine => {
                    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos())
                }
            };
            opt.step(net, &trainable, &grads, lr, cfg.momentum);

            // range observers and batch-norm running statistics
            for (site, &mx) in h.act_site_max.iter().enumerate() {
                net.act_observers[site].observe(mx);
            }
            for (si, mean, var, count) in &h.bn_batch_stats {
                let stats = &mut net.norm_stats[*si];
                let unbias = *count as f64 / (*count as f64 - 1.0);
                for (r, &b) in stats.mean.iter_mut().zip(mean) {
                    *r = 0.9 * *r + 0.1 * b;
                }
                for (r, &b) in stats.var.iter_mut().zip(var) {
                    *r = 0.9 * *r + 0.1 * (b * unbias);
                }
            }
            step += 1;
        }

        let val_accuracy = deployed_accuracy(net, val_data, &val_idxs)?;
        let record = EpochRecord { epoch, train_loss: loss_sum / seen as f64, val_accuracy };
        on_epoch(&record, net);
        history.push(record);
        let improved = best.as_ref().is_none_or(|(acc, ..)| val_accuracy > *acc);
        if improved {
            best = Some((
                val_accuracy,
                epoch,
                net.params.iter().map(|p| p.data.clone()).collect(),
                net.norm_stats.clone(),
                net.act_observers.clone(),
            ));
        }
    }

    let (best_val_accuracy, best_epoch, params, stats, observers) =
        best.expect("at least one epoch ran");
    for (p, data) in net.params.iter_mut().zip(params) {
        p.data = data;
    }
    net.norm_stats = stats;
    net.act_observers = observers;
    Ok(TrainOutcome { history, best_epoch, best_val_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lenet;
    use crate::quant::QuantConfig;

    /// Tiny learnable task: class 0 = dark image, class 1 = bright image.
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

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr: 0.02,
            val_subset: 0,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_a_learnable_task() {
        let mut net = lenet(QuantConfig::default());
        net.init_parameters(&mut rng_for(42, streams::INIT));
        let train_set = brightness_dataset(128, 1);
        let val_set = brightness_dataset(32, 2);
        let out = train(&mut net, &train_set, &val_set, &quick_cfg(), |_, _| {}).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.history[1].train_loss < out.history[0].train_loss);
        assert!(out.best_val_accuracy >= 0.5);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let run = || {
            let mut net = lenet(QuantConfig::default());
            net.init_parameters(&mut rng_for(7, streams::INIT));
            let train_set = brightness_dataset(64, 3);
            let val_set = brightness_dataset(16, 4);
            let cfg = TrainConfig { epochs: 1, seed: 7, ..quick_cfg() };
            let out = train(&mut net, &train_set, &val_set, &cfg, |_, _| {}).unwrap();
            (out.history[0].train_loss, net.params[0].data.data().to_vec())
        };
        let (l1, w1) = run();
        let (l2, w2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        let b1: Vec<u64> = w1.iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u64> = w2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2);
    }

    #[test]
    fn zero_noise_bound_reduces_to_plain_training() {
        let run = |noise_bound: f64| {
            let mut net = lenet(QuantConfig::default());
            net.init_parameters(&mut rng_for(11, streams::INIT));
            let train_set = brightness_dataset(64, 5);
            let val_set = brightness_dataset(16, 6);
            let cfg = TrainConfig { epochs: 1, seed: 11, noise_bound, ..quick_cfg() };
            train(&mut net, &train_set, &val_set, &cfg, |_, _| {}).unwrap();
            net.params
                .iter()
                .flat_map(|p| p.data.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(0.0), run(0.0));
        let plain = run(0.0);
        let noisy = run(0.02);
        assert_eq!(plain, run(0.0));
        assert_ne!(plain, noisy, "noise must actually change the trajectory");
    }

    #[test]
    fn adam_also_learns() {
        let mut net = lenet(QuantConfig::default());
        net.init_parameters(&mut rng_for(13, streams::INIT));
        let train_set = brightness_dataset(64, 7);
        let val_set = brightness_dataset(16, 8);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            epochs: 2,
            seed: 13,
            ..quick_cfg()
        };
        let out = train(&mut net, &train_set, &val_set, &cfg, |_, _| {}).unwrap();
        assert!(out.history[1].train_loss < out.history[0].train_loss);
    }

    #[test]
    fn divergence_is_reported_not_propagated() {
        let mut net = lenet(QuantConfig::default());
        net.init_parameters(&mut rng_for(17, streams::INIT));
        let train_set = brightness_dataset(64, 9);
        let val_set = brightness_dataset(16, 10);
        let cfg = TrainConfig { lr: 1e12, epochs: 3, seed: 17, ..quick_cfg() };
        match train(&mut net, &train_set, &val_set, &cfg, |_, _| {}) {
            Err(Error::Divergence(msg)) => assert!(msg.contains("epoch")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let mut net = lenet(QuantConfig::default());
        let d = brightness_dataset(8, 11);
        let empty = d.subset(&[]);
        assert!(train(&mut net, &empty, &d, &quick_cfg(), |_, _| {}).is_err());
        assert!(train(&mut net, &d, &empty, &quick_cfg(), |_, _| {}).is_err());
    }
}
