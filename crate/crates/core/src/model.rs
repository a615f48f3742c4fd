//! Network definitions and forward-graph assembly.
//!
//! A [`Network`] owns its parameters as plain tensors plus the bookkeeping a
//! quantized deployment needs: per-site activation range observers and
//! per-layer batch-norm running statistics. Every forward pass builds a fresh
//! [`Graph`], so the same definition serves training (straight-through fake
//! quantization, batch statistics), deployment evaluation (materialized
//! quantized weights, frozen ranges) and perturbation analysis (additive
//! weight deltas as graph leaves).
//!
//! Only convolution and fully-connected *weights* are quantized and exposed
//! to perturbation. Biases and normalization parameters stay in full
//! precision and are never perturbed.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::quant::{self, EmaObserver, QuantConfig};
use crate::tensor::Tensor;
use rand::Rng;

/// What a parameter tensor is, which decides its quantization and
/// perturbation treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv/linear kernel: quantized, perturbable.
    Weight,
    /// Additive bias: full precision, never perturbed.
    Bias,
    /// Batch-norm scale (γ): full precision, never perturbed.
    NormGamma,
    /// Batch-norm shift (β): full precision, never perturbed.
    NormBeta,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub data: Tensor,
}

/// Batch-norm running statistics (eval-mode constants).
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One step of the forward computation.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv { weight: usize, bias: Option<usize>, stride: usize, pad: usize },
    Linear { weight: usize, bias: Option<usize> },
    BatchNorm { gamma: usize, beta: usize, stats: usize },
    Relu,
    MaxPool { k: usize, stride: usize },
    /// Activation quantization site, indexing into `Network::act_observers`.
    ActQuant { site: usize },
    Flatten,
}

/// How conv/linear weights enter the forward graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Full precision, no quantization (plain float training).
    Float,
    /// Straight-through fake quantization with the scale recomputed from the
    /// live tensor each pass (quantization-aware training).
    SimulatedQuant,
    /// Parameters already hold snapped values; use them as-is (deployment).
    Materialized,
}

/// Options controlling one forward-graph build.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub weight_mode: WeightMode,
    /// Batch statistics + trainable affine for batch norm (training) vs
    /// frozen running statistics (deployment).
    pub training_stats: bool,
    /// Apply activation fake quantization at the marked sites.
    pub quantize_acts: bool,
    /// Additive per-weight deltas, aligned with
    /// [`Network::weight_param_indices`]; applied after quantization and
    /// never re-quantized.
    pub perturbations: Option<&'a [Tensor]>,
    /// Register weights/biases/norm parameters as gradient targets.
    pub trainable_params: bool,
    /// Register the perturbation deltas as gradient targets.
    pub trainable_perturbations: bool,
}

impl Default for ForwardOptions<'_> {
    /// Deployment evaluation: materialized weights, frozen statistics and
    /// ranges, nothing trainable.
    fn default() -> Self {
        Self {
            weight_mode: WeightMode::Materialized,
            training_stats: false,
            quantize_acts: true,
            perturbations: None,
            trainable_params: false,
            trainable_perturbations: false,
        }
    }
}

/// Node handles a forward build hands back to its caller.
#[derive(Debug)]
pub struct ForwardHandles {
    pub logits: NodeId,
    /// (param index, leaf node) for every parameter that was registered
    /// trainable, in parameter order.
    pub param_nodes: Vec<(usize, NodeId)>,
    /// (weight-list position, leaf node) for every perturbation delta.
    pub delta_nodes: Vec<(usize, NodeId)>,
    /// Pre-quantization max-abs activation per quantization site.
    pub act_site_max: Vec<f64>,
    /// (stats index, batch mean, batch var, per-channel element count) per
    /// batch-norm layer when `training_stats` was set.
    pub bn_batch_stats: Vec<(usize, Vec<f64>, Vec<f64>, usize)>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub arch: String,
    pub quant: QuantConfig,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    pub params: Vec<Param>,
    pub norm_stats: Vec<NormStats>,
    pub act_observers: Vec<EmaObserver>,
}

impl Network {
    /// Indices of perturbable weight parameters, in declaration order. This
    /// ordering is the alignment contract for perturbation tensors.
    pub fn weight_param_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == ParamKind::Weight)
            .map(|(i, _)| i)
            .collect()
    }

    /// Total number of perturbable weight scalars.
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.data.len())
            .sum()
    }

    /// Snaps every weight parameter onto its quantization grid in place
    /// (bias and norm parameters untouched). After this the network is the
    /// deployed model and forwards should use [`WeightMode::Materialized`].
    pub fn quantize_weights(&mut self) {
        let q = quant::qmax(self.quant.weight_bits);
        for p in self.params.iter_mut() {
            if p.kind == ParamKind::Weight {
                let s = quant::tensor_scale(p.data.data(), q);
                quant::snap_all(p.data.data_mut(), s, q);
            }
        }
    }

    /// He-uniform initialization for weights, ±1/√fan_in for biases, (1, 0)
    /// for norm affine parameters. Draw order is parameter declaration order.
    pub fn init_parameters<R: Rng>(&mut self, rng: &mut R) {
        // fan_in per param index, derived from layer topology
        let mut fan_in = vec![0usize; self.params.len()];
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } => {
                    let ws = self.params[*weight].data.shape();
                    let f = ws[1] * ws[2] * ws[3];
                    fan_in[*weight] = f;
                    if let Some(b) = bias {
                        fan_in[*b] = f;
                    }
                }
                Layer::Linear { weight, bias } => {
                    let f = self.params[*weight].data.shape()[1];
                    fan_in[*weight] = f;
                    if let Some(b) = bias {
                        fan_in[*b] = f;
                    }
                }
                _ => {}
            }
        }
        for (i, p) in self.params.iter_mut().enumerate() {
            match p.kind {
                ParamKind::Weight => {
                    let bound = (6.0 / fan_in[i] as f64).sqrt();
                    for v in p.data.data_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                ParamKind::Bias => {
                    let bound = 1.0 / (fan_in[i] as f64).sqrt();
                    for v in p.data.data_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                ParamKind::NormGamma => p.data.data_mut().fill(1.0),
                ParamKind::NormBeta => p.data.data_mut().fill(0.0),
            }
        }
    }

    /// Builds the forward graph for one batch. `x` must be `[B,C,H,W]`
    /// matching the network input shape.
    pub fn forward(&self, g: &mut Graph, x: Tensor, opts: &ForwardOptions) -> Result<ForwardHandles> {
        let xs = x.shape().to_vec();
        if xs.len() != 4 || xs[1..] != self.input_shape {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("input {:?}, want [B, {:?}]", xs, self.input_shape),
            });
        }
        if let Some(deltas) = opts.perturbations {
            let widx = self.weight_param_indices();
            if deltas.len() != widx.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} perturbation tensors for {} weight parameters",
                    deltas.len(),
                    widx.len()
                )));
            }
            for (d, &wi) in deltas.iter().zip(&widx) {
                if d.shape() != self.params[wi].data.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "forward",
                        detail: format!(
                            "perturbation {:?} vs weight `{}` {:?}",
                            d.shape(),
                            self.params[wi].name,
                            self.params[wi].data.shape()
                        ),
                    });
                }
            }
        }

        let wq = quant::qmax(self.quant.weight_bits);
        let aq = quant::qmax(self.quant.act_bits);
        let mut handles = ForwardHandles {
            logits: 0,
            param_nodes: Vec::new(),
            delta_nodes: Vec::new(),
            act_site_max: vec![0.0; self.act_observers.len()],
            bn_batch_stats: Vec::new(),
        };
        let mut weight_pos = 0usize; // position in weight_param_indices order

        let param_leaf = |g: &mut Graph, handles: &mut ForwardHandles, idx: usize| -> NodeId {
            let id = g.leaf(self.params[idx].data.clone(), opts.trainable_params);
            if opts.trainable_params {
                handles.param_nodes.push((idx, id));
            }
            id
        };

        let mut cur = g.constant(x);
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv { weight, bias, stride, pad } => {
                    let w = self.weight_node(g, &mut handles, *weight, &mut weight_pos, wq, opts)?;
                    let b = bias.map(|bi| param_leaf(g, &mut handles, bi));
                    g.conv2d(cur, w, b, *stride, *pad)?
                }
                Layer::Linear { weight, bias } => {
                    let w = self.weight_node(g, &mut handles, *weight, &mut weight_pos, wq, opts)?;
                    let b = bias.map(|bi| param_leaf(g, &mut handles, bi));
                    g.linear(cur, w, b)?
                }
                Layer::BatchNorm { gamma, beta, stats } => {
                    let in_shape = g.value(cur).shape().to_vec();
                    let count = in_shape[0] * in_shape[2] * in_shape[3];
                    let ga = param_leaf(g, &mut handles, *gamma);
                    let be = param_leaf(g, &mut handles, *beta);
                    let st = &self.norm_stats[*stats];
                    let running = if opts.training_stats {
                        None
                    } else {
                        Some((st.mean.as_slice(), st.var.as_slice()))
                    };
                    let (y, m, v) = g.batch_norm(cur, ga, be, running, 1e-5)?;
                    if opts.training_stats {
                        handles.bn_batch_stats.push((*stats, m, v, count));
                    }
                    y
                }
                Layer::Relu => g.relu(cur),
                Layer::MaxPool { k, stride } => g.maxpool2d(cur, *k, *stride)?,
                Layer::ActQuant { site } => {
                    let batch_max = g.value(cur).max_abs();
                    handles.act_site_max[*site] = batch_max;
                    if opts.quantize_acts {
                        // prefer the observer's smoothed range; fall back to
                        // the live batch max before the first observation
                        let range = self.act_observers[*site].value.unwrap_or(batch_max);
                        if range > 0.0 {
                            g.fake_quant(cur, range / aq, aq)?
                        } else {
                            cur
                        }
                    } else {
                        cur
                    }
                }
                Layer::Flatten => g.flatten(cur)?,
            };
        }
        let out_shape = g.value(cur).shape();
        if out_shape.len() != 2 || out_shape[1] != self.num_classes {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("logits {:?}, want [B, {}]", out_shape, self.num_classes),
            });
        }
        handles.logits = cur;
        Ok(handles)
    }

    /// Installs one weight parameter into the graph according to the weight
    /// mode, then applies its perturbation delta if one was supplied.
    fn weight_node(
        &self,
        g: &mut Graph,
        handles: &mut ForwardHandles,
        idx: usize,
        weight_pos: &mut usize,
        wq: f64,
        opts: &ForwardOptions,
    ) -> Result<NodeId> {
        let leaf = g.leaf(self.params[idx].data.clone(), opts.trainable_params);
        if opts.trainable_params {
            handles.param_nodes.push((idx, leaf));
        }
        let mut node = match opts.weight_mode {
            WeightMode::Float | WeightMode::Materialized => leaf,
            WeightMode::SimulatedQuant => {
                let s = quant::tensor_scale(self.params[idx].data.data(), wq);
                g.fake_quant(leaf, s, wq)?
            }
        };
        if let Some(deltas) = opts.perturbations {
            let d = g.leaf(deltas[*weight_pos].clone(), opts.trainable_perturbations);
            handles.delta_nodes.push((*weight_pos, d));
            node = g.add(node, d)?;
        }
        *weight_pos += 1;
        Ok(node)
    }

    /// Eval-mode logits for one batch (materialized weights, frozen ranges,
    /// optional perturbation). Convenience wrapper used by accuracy sweeps.
    pub fn eval_logits(&self, x: Tensor, perturbations: Option<&[Tensor]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let opts = ForwardOptions { perturbations, ..Default::default() };
        let h = self.forward(&mut g, x, &opts)?;
        Ok(g.value(h.logits).clone())
    }
}

/// Row-wise argmax with ties resolved to the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg
}

fn conv(params: &mut Vec<Param>, name: &str, oc: usize, ic: usize, k: usize, with_bias: bool) -> (usize, Option<usize>) {
    params.push(Param {
        name: format!("{name}.weight"),
        kind: ParamKind::Weight,
        data: Tensor::zeros(&[oc, ic, k, k]),
    });
    let w = params.len() - 1;
    let b = with_bias.then(|| {
        params.push(Param {
            name: format!("{name}.bias"),
            kind: ParamKind::Bias,
            data: Tensor::zeros(&[oc]),
        });
        params.len() - 1
    });
    (w, b)
}

fn linear(params: &mut Vec<Param>, name: &str, of: usize, inf: usize) -> (usize, Option<usize>) {
    params.push(Param {
        name: format!("{name}.weight"),
        kind: ParamKind::Weight,
        data: Tensor::zeros(&[of, inf]),
    });
    let w = params.len() - 1;
    params.push(Param {
        name: format!("{name}.bias"),
        kind: ParamKind::Bias,
        data: Tensor::zeros(&[of]),
    });
    (w, Some(params.len() - 1))
}

fn norm(params: &mut Vec<Param>, stats: &mut Vec<NormStats>, name: &str, c: usize) -> (usize, usize, usize) {
    params.push(Param {
        name: format!("{name}.gamma"),
        kind: ParamKind::NormGamma,
        data: Tensor::zeros(&[c]),
    });
    let g = params.len() - 1;
    params.push(Param {
        name: format!("{name}.beta"),
        kind: ParamKind::NormBeta,
        data: Tensor::zeros(&[c]),
    });
    let b = params.len() - 1;
    stats.push(NormStats { mean: vec![0.0; c], var: vec![1.0; c] });
    (g, b, stats.len() - 1)
}

/// Classic 5-layer convolutional classifier for 1×28×28 inputs:
/// two 5×5 conv+pool stages (6 then 16 channels) and three fully-connected
/// layers (120, 84, 10), with activation quantization after every relu.
pub fn lenet(quant: QuantConfig) -> Network {
    let mut params = Vec::new();
    let mut layers = Vec::new();
    let mut site = 0usize;
    let mut actq = |layers: &mut Vec<Layer>| {
        layers.push(Layer::ActQuant { site });
        site += 1;
    };

    let (w, b) = conv(&mut params, "conv1", 6, 1, 5, true);
    layers.push(Layer::Conv { weight: w, bias: b, stride: 1, pad: 2 });
    layers.push(Layer::Relu);
    actq(&mut layers);
    layers.push(Layer::MaxPool { k: 2, stride: 2 });

    let (w, b) = conv(&mut params, "conv2", 16, 6, 5, true);
    layers.push(Layer::Conv { weight: w, bias: b, stride: 1, pad: 0 });
    layers.push(Layer::Relu);
    actq(&mut layers);
    layers.push(Layer::MaxPool { k: 2, stride: 2 });

    layers.push(Layer::Flatten);
    let (w, b) = linear(&mut params, "fc1", 120, 400);
    layers.push(Layer::Linear { weight: w, bias: b });
    layers.push(Layer::Relu);
    actq(&mut layers);
    let (w, b) = linear(&mut params, "fc2", 84, 120);
    layers.push(Layer::Linear { weight: w, bias: b });
    layers.push(Layer::Relu);
    actq(&mut layers);
    let (w, b) = linear(&mut params, "fc3", 10, 84);
    layers.push(Layer::Linear { weight: w, bias: b });

    Network {
        arch: "lenet".into(),
        quant,
        input_shape: [1, 28, 28],
        num_classes: 10,
        layers,
        params,
        norm_stats: Vec::new(),
        act_observers: vec![EmaObserver::new(0.99); site],
    }
}

/// VGG-style 8-layer classifier for 3×32×32 inputs: three double-conv
/// stages (64, 128, 256 channels) with batch norm, then two fully-connected
/// layers, activation quantization after every relu.
pub fn convnet(quant: QuantConfig) -> Network {
    let mut params = Vec::new();
    let mut stats = Vec::new();
    let mut layers = Vec::new();
    let mut site = 0usize;

    let stage = |params: &mut Vec<Param>,
                     stats: &mut Vec<NormStats>,
                     layers: &mut Vec<Layer>,
                     site: &mut usize,
                     name: &str,
                     ic: usize,
                     oc: usize| {
        let (w, b) = conv(params, name, oc, ic, 3, false);
        layers.push(Layer::Conv { weight: w, bias: b, stride: 1, pad: 1 });
        let (g, be, st) = norm(params, stats, &format!("{name}.norm"), oc);
        layers.push(Layer::BatchNorm { gamma: g, beta: be, stats: st });
        layers.push(Layer::Relu);
        layers.push(Layer::ActQuant { site: *site });
        *site += 1;
    };

    stage(&mut params, &mut stats, &mut layers, &mut site, "conv1", 3, 64);
    stage(&mut params, &mut stats, &mut layers, &mut site, "conv2", 64, 64);
    layers.push(Layer::MaxPool { k: 2, stride: 2 });
    stage(&mut params, &mut stats, &mut layers, &mut site, "conv3", 64, 128);
    stage(&mut params, &mut stats, &mut layers, &mut site, "conv4", 128, 128);
    layers.push(Layer::MaxPool { k: 2, stride: 2 });
    stage(&mut params, &mut stats, &mut layers, &mut site, "conv5", 128, 256);
    stage(&mut params, &mut stats, &mut layers, &mut site, "conv6", 256, 256);
    layers.push(Layer::MaxPool { k: 2, stride: 2 });

    layers.push(Layer::Flatten);
    let (w, b) = linear(&mut params, "fc1", 1024, 256 * 4 * 4);
    layers.push(Layer::Linear { weight: w, bias: b });
    layers.push(Layer::Relu);
    layers.push(Layer::ActQuant { site });
    site += 1;
    let (w, b) = linear(&mut params, "fc2", 10, 1024);
    layers.push(Layer::Linear { weight: w, bias: b });

    Network {
        arch: "convnet".into(),
        quant,
        input_shape: [3, 32, 32],
        num_classes: 10,
        layers,
        params,
        norm_stats: stats,
        act_observers: vec![EmaObserver::new(0.99); site],
    }
}

/// Builds a network by architecture name.
pub fn by_name(arch: &str, quant: QuantConfig) -> Result<Network> {
    match arch {
        "lenet" => Ok(lenet(quant)),
        "convnet" => Ok(convnet(quant)),
        other => Err(Error::InvalidArgument(format!(
            "unknown architecture `{other}` (expected `lenet` or `convnet`)"
        ))),
    }
}
