//! Worst-case accuracy analysis for small quantized CNNs whose weights are
//! subject to bounded perturbation (write-verify NVM device model).
//!
//! The crate provides, bottom-up:
//!
//! * [`tensor`] / [`linalg`] / [`graph`] — a minimal dense-tensor engine with
//!   reverse-mode automatic differentiation, sized for small CNNs.
//! * [`quant`] — symmetric per-tensor fake quantization with straight-through
//!   gradients, for quantization-aware training.
//! * [`model`] / [`train`] / [`data`] / [`checkpoint`] — LeNet and a VGG-style
//!   8-layer ConvNet, their training loops, batch assembly and a binary
//!   checkpoint container.
//! * [`device`] — the bit-sliced NVM device model: how an M-bit weight maps to
//!   K-bit devices and how a per-device write-verify threshold `th` induces
//!   the weight-space perturbation bound `th_g`.
//! * [`surrogate`] / [`search`] — the relaxed worst-case search: a
//!   differentiable penalty objective over the perturbation, optimized by
//!   Adam, with bisection over the penalty constant to pin the perturbation
//!   to its bound.
//! * [`baselines`] — Monte-Carlo sampling and sign-gradient (PGD-style)
//!   baselines for the same question.
//! * [`hardening`] — write-verify threshold sweeps, variation-aware training
//!   and adversarial training against worst-case perturbations.

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod device;
pub mod error;
pub mod graph;
pub mod hardening;
pub mod linalg;
pub mod model;
pub mod quant;
pub mod search;
pub mod surrogate;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
