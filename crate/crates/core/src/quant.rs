//! Symmetric uniform fake quantization.
//!
//! Weights and activations are snapped onto a per-tensor symmetric integer
//! grid `{-qmax, …, -1, 0, 1, …, qmax}·scale` where `qmax = 2^(bits−1) − 1`.
//! The scale maps the largest magnitude in the tensor onto the outermost
//! level; an all-zero tensor gets scale 1.0 so the mapping stays total.
//! Training uses straight-through gradients (see `graph::Graph::fake_quant`);
//! this module holds the value-level pieces shared by training, checkpoints
//! and analysis.

use serde::{Deserialize, Serialize};

/// Bit-width configuration for weight and activation grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Total bits per value, sign included.
    pub weight_bits: u32,
    /// Total bits per quantized activation.
    pub act_bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { weight_bits: 4, act_bits: 4 }
    }
}

/// Largest level index of a symmetric `bits`-wide grid: `2^(bits−1) − 1`.
pub fn qmax(bits: u32) -> f64 {
    assert!((2..=16).contains(&bits), "bit width {bits} out of the supported 2..=16 range");
    ((1u32 << (bits - 1)) - 1) as f64
}

/// Per-tensor scale: `max|x| / qmax`, or 1.0 for an all-zero tensor.
pub fn tensor_scale(data: &[f64], qmax: f64) -> f64 {
    let m = data.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if m == 0.0 {
        1.0
    } else {
        m / qmax
    }
}

/// Snaps one value onto the grid.
pub fn snap(v: f64, scale: f64, qmax: f64) -> f64 {
    (v / scale).round().clamp(-qmax, qmax) * scale
}

/// Snaps a slice in place.
pub fn snap_all(data: &mut [f64], scale: f64, qmax: f64) {
    for v in data.iter_mut() {
        *v = snap(*v, scale, qmax);
    }
}

/// Exponential-moving-average range observer for activations.
///
/// During training each forward pass reports the batch max-abs at a
/// quantization site; the smoothed value is frozen into the checkpoint and
/// used as the deployed activation range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmaObserver {
    /// Smoothed max-abs, `None` until the first observation.
    pub value: Option<f64>,
    /// Fraction of the old value kept per update.
    pub decay: f64,
}

impl EmaObserver {
    pub fn new(decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "decay must be in [0,1)");
        Self { value: None, decay }
    }

    pub fn observe(&mut self, batch_max_abs: f64) {
        self.value = Some(match self.value {
            None => batch_max_abs,
            Some(v) => v * self.decay + batch_max_abs * (1.0 - self.decay),
        });
    }

    /// Grid scale for the observed range, or `None` before any observation.
    /// A degenerate all-zero range falls back to scale 1.0.
    pub fn scale(&self, qmax: f64) -> Option<f64> {
        self.value.map(|v| if v == 0.0 { 1.0 } else { v / qmax })
    }
}
