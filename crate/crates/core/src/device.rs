//! Multi-cell storage model for quantized weights.
//!
//! An `M`-bit weight is stored on `M/K` memory cells of `K` bits each. The
//! write procedure re-programs a cell until its analog level is within a
//! verification threshold `th` of the target, so each cell contributes at
//! most `th` (in level units) of error. A weight reassembled from its cells
//! therefore deviates by at most
//!
//! ```text
//! th_g = Σ_{i=0}^{M/K−1} th · 2^{i·K} · weight_scale
//! ```
//!
//! in weight units — the global per-weight bound the worst-case analysis
//! operates under. Perturbations are applied to the *quantized* weight
//! values and are not re-quantized: the physical deviation is analog.

use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Storage-device parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DeviceConfig {
    /// Bits per stored weight (`M`).
    pub bits_per_weight: u32,
    /// Bits per memory cell (`K`); must divide `M`.
    pub bits_per_cell: u32,
    /// Per-cell write-verify threshold in level units (`th`).
    pub cell_threshold: f64,
    /// Conversion from integer levels to weight units.
    pub weight_scale: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self { bits_per_weight: 4, bits_per_cell: 2, cell_threshold: 0.006, weight_scale: 1.0 }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits_per_cell == 0 || self.bits_per_weight == 0 {
            return Err(Error::InvalidArgument("bit widths must be positive".into()));
        }
        if self.bits_per_weight % self.bits_per_cell != 0 {
            return Err(Error::InvalidArgument(format!(
                "bits_per_cell {} must divide bits_per_weight {}",
                self.bits_per_cell, self.bits_per_weight
            )));
        }
        if self.cell_threshold < 0.0 || !self.cell_threshold.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cell_threshold {} must be finite and non-negative",
                self.cell_threshold
            )));
        }
        if self.weight_scale <= 0.0 || !self.weight_scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "weight_scale {} must be finite and positive",
                self.weight_scale
            )));
        }
        Ok(())
    }

    /// Number of cells per weight.
    pub fn cells(&self) -> u32 {
        self.bits_per_weight / self.bits_per_cell
    }

    /// The global per-weight perturbation bound `th_g`.
    pub fn th_g(&self) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.cells() {
            sum += self.cell_threshold * f64::from(1u32 << (i * self.bits_per_cell));
        }
        sum * self.weight_scale
    }

    /// The same bound with a different cell threshold — used by
    /// write-verify sweeps that vary `th` only.
    pub fn with_cell_threshold(mut self, th: f64) -> Self {
        self.cell_threshold = th;
        self
    }
}

/// Splits a non-negative level value into `M/K` cell levels, least
/// significant cell first. `level` must fit in `M` bits.
pub fn slice_level(level: u64, cfg: &DeviceConfig) -> Result<Vec<u64>> {
    if level >= 1u64 << cfg.bits_per_weight {
        return Err(Error::InvalidArgument(format!(
            "level {level} does not fit in {} bits",
            cfg.bits_per_weight
        )));
    }
    let mask = (1u64 << cfg.bits_per_cell) - 1;
    Ok((0..cfg.cells()).map(|i| (level >> (i * cfg.bits_per_cell)) & mask).collect())
}

/// Reassembles a level from its cell values (inverse of [`slice_level`]).
pub fn join_level(cells: &[u64], cfg: &DeviceConfig) -> u64 {
    cells
        .iter()
        .enumerate()
        .map(|(i, &c)| c << (i as u32 * cfg.bits_per_cell))
        .sum()
}

/// A bounded additive perturbation of the network's weight tensors, aligned
/// with [`Network::weight_param_indices`].
#[derive(Debug, Clone)]
pub struct WeightPerturbation {
    pub deltas: Vec<Tensor>,
    /// Bound the perturbation is supposed to respect.
    pub th_g: f64,
}

impl WeightPerturbation {
    /// The all-zero perturbation for a network.
    pub fn zeros(net: &Network, th_g: f64) -> Self {
        let deltas = net
            .weight_param_indices()
            .iter()
            .map(|&i| Tensor::zeros(net.params[i].data.shape()))
            .collect();
        Self { deltas, th_g }
    }

    /// Largest magnitude across all deltas.
    pub fn max_abs(&self) -> f64 {
        self.deltas.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }

    /// Verifies `max|δ| ≤ th_g + slack`.
    pub fn check_bound(&self, slack: f64) -> Result<()> {
        let m = self.max_abs();
        if m > self.th_g + slack {
            return Err(Error::BoundViolation(format!(
                "perturbation magnitude {m:.3e} exceeds bound {:.3e}",
                self.th_g
            )));
        }
        Ok(())
    }

    /// Clamps every delta into `[−th_g, th_g]` in place.
    pub fn project(&mut self) {
        let b = self.th_g;
        for d in self.deltas.iter_mut() {
            for v in d.data_mut().iter_mut() {
                *v = v.clamp(-b, b);
            }
        }
    }

    /// Flips the sign of every delta.
    pub fn negated(&self) -> Self {
        let deltas = self
            .deltas
            .iter()
            .map(|d| {
                Tensor::new(d.shape().to_vec(), d.data().iter().map(|&v| -v).collect())
                    .expect("same shape")
            })
            .collect();
        Self { deltas, th_g: self.th_g }
    }
}

/// Distribution of random device deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDistribution {
    /// Independent uniform draws over `[−th_g, th_g]` — the worst-case-
    /// agnostic model of write-verify residuals.
    Uniform,
    /// Zero-mean gaussian with σ = th_g/3, truncated to `[−th_g, th_g]`.
    Gaussian,
}

/// Samples one random perturbation. Draw order is deterministic: tensors in
/// weight order, scalars in flat order, one `f64` range draw each (gaussian
/// redraws until inside the bound, still from the same stream).
pub fn sample_perturbation<R: Rng>(
    net: &Network,
    th_g: f64,
    dist: NoiseDistribution,
    rng: &mut R,
) -> WeightPerturbation {
    let mut p = WeightPerturbation::zeros(net, th_g);
    if th_g == 0.0 {
        return p;
    }
    let sigma = th_g / 3.0;
    for d in p.deltas.iter_mut() {
        for v in d.data_mut().iter_mut() {
            *v = match dist {
                NoiseDistribution::Uniform => rng.gen_range(-th_g..=th_g),
                NoiseDistribution::Gaussian => loop {
                    // Box–Muller from two uniform draws; reject outside the bound
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let n = (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos()
                        * sigma;
                    if n.abs() <= th_g {
                        break n;
                    }
                },
            };
        }
    }
    p
}

/// The RNG for Monte-Carlo run `run_idx` under `seed`: same seed, dedicated
/// stream per run, so runs are independent and individually reproducible.
pub fn mc_rng(seed: u64, run_idx: u64) -> ChaCha8Rng {
    crate::train::rng_for(seed, crate::train::streams::MC_BASE + run_idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lenet;
    use crate::quant::QuantConfig;
    use rand::SeedableRng;

    #[test]
    fn default_bound_is_exactly_0_03() {
        let cfg = DeviceConfig::default();
        // 0.006·(2⁰ + 2²) = 0.006·5 = 0.03
        assert_eq!(cfg.th_g(), 0.03);
        assert_eq!(cfg.cells(), 2);
    }

    #[test]
    fn bound_scales_linearly_with_threshold_and_scale() {
        let cfg = DeviceConfig::default();
        assert!((cfg.with_cell_threshold(0.012).th_g() - 0.06).abs() < 1e-15);
        let scaled = DeviceConfig { weight_scale: 2.0, ..cfg };
        assert!((scaled.th_g() - 0.06).abs() < 1e-15);
        let single = DeviceConfig { bits_per_cell: 4, ..cfg };
        // one 4-bit cell: th_g = th·2⁰ = 0.006
        assert_eq!(single.th_g(), 0.006);
        let four = DeviceConfig { bits_per_cell: 1, ..cfg };
        // four 1-bit cells: th·(1+2+4+8) = 0.09
        assert!((four.th_g() - 0.09).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = DeviceConfig::default();
        assert!(ok.validate().is_ok());
        assert!(DeviceConfig { bits_per_cell: 3, ..ok }.validate().is_err());
        assert!(DeviceConfig { bits_per_cell: 0, ..ok }.validate().is_err());
        assert!(DeviceConfig { cell_threshold: -0.1, ..ok }.validate().is_err());
        assert!(DeviceConfig { weight_scale: 0.0, ..ok }.validate().is_err());
    }

    #[test]
    fn slicing_is_a_bijection_for_every_representable_level() {
        for (m, k) in [(4u32, 2u32), (4, 1), (4, 4), (8, 2), (8, 4), (6, 3), (8, 8)] {
            let cfg = DeviceConfig {
                bits_per_weight: m,
                bits_per_cell: k,
                ..DeviceConfig::default()
            };
            cfg.validate().unwrap();
            for level in 0..(1u64 << m) {
                let cells = slice_level(level, &cfg).unwrap();
                assert_eq!(cells.len(), cfg.cells() as usize);
                assert!(cells.iter().all(|&c| c < (1 << k)));
                assert_eq!(join_level(&cells, &cfg), level, "M={m} K={k} level={level}");
            }
        }
    }

    #[test]
    fn slicing_is_least_significant_cell_first() {
        let cfg = DeviceConfig::default();
        // 13 = 0b1101 → cells [0b01, 0b11]
        assert_eq!(slice_level(13, &cfg).unwrap(), vec![1, 3]);
        assert!(slice_level(16, &cfg).is_err());
    }

    #[test]
    fn worst_case_cell_errors_add_up_to_the_bound() {
        // with every cell off by ±th in the same direction, the reassembled
        // weight deviates by exactly th_g — the bound is tight
        let cfg = DeviceConfig::default();
        for signs in [[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]] {
            let dev: f64 = signs
                .iter()
                .enumerate()
                .map(|(i, s)| s * cfg.cell_threshold * f64::from(1u32 << (i as u32 * 2)))
                .sum();
            assert!(dev.abs() <= cfg.th_g() + 1e-15);
        }
        let aligned: f64 = (0..2)
            .map(|i| cfg.cell_threshold * f64::from(1u32 << (i * 2)))
            .sum();
        assert!((aligned - cfg.th_g()).abs() < 1e-15);
    }

    #[test]
    fn projection_and_bound_check_agree() {
        let net = lenet(QuantConfig::default());
        let mut p = WeightPerturbation::zeros(&net, 0.03);
        p.deltas[0].data_mut()[0] = 0.5;
        p.deltas[4].data_mut()[7] = -0.2;
        assert!(p.check_bound(1e-12).is_err());
        p.project();
        assert!(p.check_bound(1e-12).is_ok());
        assert_eq!(p.deltas[0].data()[0], 0.03);
        assert_eq!(p.deltas[4].data()[7], -0.03);
        assert!((p.max_abs() - 0.03).abs() < 1e-15);
    }

    #[test]
    fn negation_round_trips() {
        let net = lenet(QuantConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = sample_perturbation(&net, 0.03, NoiseDistribution::Uniform, &mut rng);
        let back = p.negated().negated();
        for (a, b) in p.deltas.iter().zip(&back.deltas) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(p.negated().max_abs(), p.max_abs());
    }

    #[test]
    fn uniform_samples_fill_the_box_with_near_zero_mean() {
        let net = lenet(QuantConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let th_g = 0.03;
        let p = sample_perturbation(&net, th_g, NoiseDistribution::Uniform, &mut rng);
        let all: Vec<f64> = p.deltas.iter().flat_map(|d| d.data().iter().copied()).collect();
        let n = all.len() as f64;
        assert!(n > 60_000.0);
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let max = all.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(max <= th_g);
        // near the theoretical box extreme but not over it
        assert!(max > th_g * 0.999, "max {max}");
        assert!(mean.abs() < 3.0 * th_g / (3.0f64).sqrt() / n.sqrt() * 4.0, "mean {mean}");
        let uniform_var = th_g * th_g / 3.0;
        assert!((var / uniform_var - 1.0).abs() < 0.05, "var ratio {}", var / uniform_var);
    }

    #[test]
    fn gaussian_samples_respect_the_bound_with_smaller_spread() {
        let net = lenet(QuantConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let th_g = 0.03;
        let p = sample_perturbation(&net, th_g, NoiseDistribution::Gaussian, &mut rng);
        let all: Vec<f64> = p.deltas.iter().flat_map(|d| d.data().iter().copied()).collect();
        let max = all.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(max <= th_g);
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // truncated normal with σ = th_g/3 has variance just under σ²
        let sigma2 = (th_g / 3.0) * (th_g / 3.0);
        assert!(var < sigma2 * 1.02 && var > sigma2 * 0.9, "var {var} vs σ² {sigma2}");
    }

    #[test]
    fn zero_bound_yields_the_zero_perturbation() {
        let net = lenet(QuantConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = sample_perturbation(&net, 0.0, NoiseDistribution::Uniform, &mut rng);
        assert_eq!(p.max_abs(), 0.0);
    }

    #[test]
    fn per_run_streams_are_independent_and_reproducible() {
        let net = lenet(QuantConfig::default());
        let a1 = sample_perturbation(&net, 0.03, NoiseDistribution::Uniform, &mut mc_rng(1, 0));
        let a2 = sample_perturbation(&net, 0.03, NoiseDistribution::Uniform, &mut mc_rng(1, 0));
        let b = sample_perturbation(&net, 0.03, NoiseDistribution::Uniform, &mut mc_rng(1, 1));
        assert_eq!(a1.deltas[0].data(), a2.deltas[0].data());
        assert_ne!(a1.deltas[0].data(), b.deltas[0].data());
    }
}
