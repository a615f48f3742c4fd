//! Eager reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every builder method validates shapes, computes the
//! forward value immediately, and records a node. [`Graph::backward`] walks
//! the tape in reverse, accumulating gradients into per-node buffers that can
//! be read back for any leaf.
//!
//! Conventions chosen for determinism and testability:
//!
//! * subgradient 0 at the kinks of `relu`/`hinge`/`maxpool`,
//! * ties in `maxpool`, `reduce_max_excluding` and `max_abs` resolve to the
//!   lowest flat index,
//! * a graph is single-threaded and rebuilt per batch; tensors entering as
//!   non-trainable leaves are never mutated.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Index of a node on the tape.
pub type NodeId = usize;

/// How `cross_entropy` aggregates per-sample losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Relu { x: NodeId },
    Hinge { x: NodeId },
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    AvgPool2d { x: NodeId, k: usize, stride: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    AddConst { x: NodeId },
    Softmax { x: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64>, reduction: Reduction },
    ReduceMaxExcluding { x: NodeId, argmax: Vec<usize> },
    GatherLabel { x: NodeId, labels: Vec<usize> },
    Softplus { x: NodeId },
    /// `ln(max(x, clamp))`; clamp hits are counted on the graph.
    Log { x: NodeId, clamp: f64 },
    Sum { x: NodeId },
    /// Straight-through fake quantization: forward rounds onto the grid,
    /// backward passes gradients where `|x| <= qmax·scale` and blocks them
    /// where the forward clamp saturated.
    FakeQuant { x: NodeId, scale: f64, qmax: f64 },
    /// Per-channel batch normalization on `[B,C,H,W]`. `mean`/`inv_std` hold
    /// the statistics actually used (batch or running, per `batch_stats`).
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    /// Scalar `max_i |x_i|` over the concatenation of several inputs;
    /// `arg` records which input/offset won (first maximum in scan order).
    MaxAbsMulti { xs: Vec<NodeId>, arg: (usize, usize) },
    Reshape { x: NodeId },
}

struct Node {
    op: Op,
    out: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Number of times a clamped `log` saturated at its epsilon this graph.
    pub log_clamp_events: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].out
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any
    /// reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn push(&mut self, op: Op, out: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, out, grad: None, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch { op, detail }
    }

    // ───────────────────────── leaves ─────────────────────────

    /// Installs `t` as a leaf. `trainable` marks it as a gradient target.
    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> NodeId {
        self.push(Op::Leaf, t, trainable)
    }

    /// Non-trainable leaf (inputs, frozen weights, constants).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    // ──────────────────── network primitives ────────────────────

    /// 2-D convolution, NCHW input `[B,C,H,W]`, OIHW kernel `[F,C,KH,KW]`,
    /// optional per-output-channel bias `[F]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.nodes[x].out.shape().to_vec();
        let ws = self.nodes[w].out.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Self::shape_err(
                "conv2d",
                format!("input {:?} vs kernel {:?} (want NCHW and OIHW with matching C)", xs, ws),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (bsz, c, h, wdim) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if h + 2 * pad < kh || wdim + 2 * pad < kw {
            return Err(Self::shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wdim} (pad {pad})"),
            ));
        }
        if let Some(bid) = b {
            let bs = self.nodes[bid].out.shape();
            if bs != [f] {
                return Err(Self::shape_err("conv2d", format!("bias {:?}, want [{f}]", bs)));
            }
        }
        let oh = linalg::conv_out_dim(h, kh, stride, pad);
        let ow = linalg::conv_out_dim(wdim, kw, stride, pad);
        let ckk = c * kh * kw;
        let mut out = Tensor::zeros(&[bsz, f, oh, ow]);
        {
            let xd = self.nodes[x].out.data();
            let wd = self.nodes[w].out.data();
            let od = out.data_mut();
            let mut cols = vec![0.0f64; ckk * oh * ow];
            for s in 0..bsz {
                linalg::im2col(&xd[s * c * h * wdim..][..c * h * wdim], c, h, wdim, kh, kw, stride, pad, &mut cols);
                // out[s] is an [F, OH·OW] block, contiguous in NCHW.
                linalg::gemm_nn(f, ckk, oh * ow, wd, &cols, &mut od[s * f * oh * ow..][..f * oh * ow]);
            }
            if let Some(bid) = b {
                let bd = self.nodes[bid].out.data().to_vec();
                for s in 0..bsz {
                    for fc in 0..f {
                        let base = (s * f + fc) * oh * ow;
                        let bias = bd[fc];
                        for v in &mut od[base..base + oh * ow] {
                            *v += bias;
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|bid| self.needs(bid));
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, out, needs))
    }

    /// Fully-connected layer: input `[B,I]`, weight `[O,I]`, optional bias
    /// `[O]`; output `[B,O] = x·wᵀ (+ b)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.nodes[x].out.shape().to_vec();
        let ws = self.nodes[w].out.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Self::shape_err(
                "linear",
                format!("input {:?} vs weight {:?} (want [B,I] and [O,I])", xs, ws),
            ));
        }
        let (bsz, i, o) = (xs[0], xs[1], ws[0]);
        if let Some(bid) = b {
            let bs = self.nodes[bid].out.shape();
            if bs != [o] {
                return Err(Self::shape_err("linear", format!("bias {:?}, want [{o}]", bs)));
            }
        }
        let mut out = Tensor::zeros(&[bsz, o]);
        linalg::gemm_nt(bsz, i, o, self.nodes[x].out.data(), self.nodes[w].out.data(), out.data_mut());
        if let Some(bid) = b {
            let bd = self.nodes[bid].out.data().to_vec();
            let od = out.data_mut();
            for s in 0..bsz {
                for (j, bj) in bd.iter().enumerate() {
                    od[s * o + j] += bj;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|bid| self.needs(bid));
        Ok(self.push(Op::Linear { x, w, b }, out, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::new(
            self.nodes[x].out.shape().to_vec(),
            self.nodes[x].out.data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        let needs = self.needs(x);
        self.push(Op::Relu { x }, out, needs)
    }

    /// `max(x, 0)` elementwise — the hinge used by margin surrogates.
    /// Identical forward to `relu`; kept as its own kind so traces name it.
    pub fn hinge(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::new(
            self.nodes[x].out.shape().to_vec(),
            self.nodes[x].out.data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        let needs = self.needs(x);
        self.push(Op::Hinge { x }, out, needs)
    }

    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let xs = self.nodes[x].out.shape().to_vec();
        if xs.len() != 4 {
            return Err(Self::shape_err("maxpool2d", format!("input {:?}, want NCHW", xs)));
        }
        if k == 0 || stride == 0 || xs[2] < k || xs[3] < k {
            return Err(Error::InvalidArgument(format!(
                "maxpool2d window {k} stride {stride} on {}x{} input",
                xs[2], xs[3]
            )));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = Tensor::zeros(&[bsz, c, oh, ow]);
        let mut argmax = vec![0usize; bsz * c * oh * ow];
        {
            let xd = self.nodes[x].out.data();
            let od = out.data_mut();
            for sc in 0..bsz * c {
                let plane = &xd[sc * h * w..][..h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0usize;
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            for kx in 0..k {
                                let ix = ox * stride + kx;
                                let v = plane[iy * w + ix];
                                // strict `>` keeps the lowest flat index on ties
                                if v > best {
                                    best = v;
                                    arg = iy * w + ix;
                                }
                            }
                        }
                        let oi = (sc * oh + oy) * ow + ox;
                        od[oi] = best;
                        argmax[oi] = arg;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MaxPool2d { x, argmax }, out, needs))
    }

    pub fn avgpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let xs = self.nodes[x].out.shape().to_vec();
        if xs.len() != 4 {
            return Err(Self::shape_err("avgpool2d", format!("input {:?}, want NCHW", xs)));
        }
        if k == 0 || stride == 0 || xs[2] < k || xs[3] < k {
            return Err(Error::InvalidArgument(format!(
                "avgpool2d window {k} stride {stride} on {}x{} input",
                xs[2], xs[3]
            )));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let inv = 1.0 / (k * k) as f64;
        let mut out = Tensor::zeros(&[bsz, c, oh, ow]);
        {
            let xd = self.nodes[x].out.data();
            let od = out.data_mut();
            for sc in 0..bsz * c {
                let plane = &xd[sc * h * w..][..h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                s += plane[(oy * stride + ky) * w + ox * stride + kx];
                            }
                        }
                        od[(sc * oh + oy) * ow + ox] = s * inv;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::AvgPool2d { x, k, stride }, out, needs))
    }

    // ──────────────────── elementwise / scalar ────────────────────

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].out.shape(), self.nodes[b].out.shape());
        if sa != sb {
            return Err(Self::shape_err("add", format!("{:?} vs {:?}", sa, sb)));
        }
        let out = Tensor::new(
            sa.to_vec(),
            self.nodes[a]
                .out
                .data()
                .iter()
                .zip(self.nodes[b].out.data())
                .map(|(x, y)| x + y)
                .collect(),
        )
        .expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, out, needs))
    }

    /// Elementwise difference `a − b` of two same-shape tensors.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].out.shape(), self.nodes[b].out.shape());
        if sa != sb {
            return Err(Self::shape_err("sub", format!("{:?} vs {:?}", sa, sb)));
        }
        let out = Tensor::new(
            sa.to_vec(),
            self.nodes[a]
                .out
                .data()
                .iter()
                .zip(self.nodes[b].out.data())
                .map(|(x, y)| x - y)
                .collect(),
        )
        .expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub { a, b }, out, needs))
    }

    /// Multiplication by a compile-time-constant scalar.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = Tensor::new(
            self.nodes[x].out.shape().to_vec(),
            self.nodes[x].out.data().iter().map(|&v| v * factor).collect(),
        )
        .expect("same shape");
        let needs = self.needs(x);
        self.push(Op::Scale { x, factor }, out, needs)
    }

    /// Adds a constant scalar to every element.
    pub fn add_const(&mut self, x: NodeId, value: f64) -> NodeId {
        let out = Tensor::new(
            self.nodes[x].out.shape().to_vec(),
            self.nodes[x].out.data().iter().map(|&v| v + value).collect(),
        )
        .expect("same shape");
        let needs = self.needs(x);
        self.push(Op::AddConst { x }, out, needs)
    }

    /// Row-wise softmax over a `[B,C]` tensor (numerically stabilized).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].out.shape().to_vec();
        if xs.len() != 2 {
            return Err(Self::shape_err("softmax", format!("input {:?}, want [B,C]", xs)));
        }
        let (bsz, c) = (xs[0], xs[1]);
        let mut out = Tensor::zeros(&[bsz, c]);
        {
            let xd = self.nodes[x].out.data();
            let od = out.data_mut();
            for s in 0..bsz {
                softmax_row(&xd[s * c..][..c], &mut od[s * c..][..c]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::Softmax { x }, out, needs))
    }

    /// Cross-entropy of logits `[B,C]` against integer labels, reduced to a
    /// scalar. The softmax computed along the way is cached for backward.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        let xs = self.nodes[logits].out.shape().to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(Self::shape_err(
                "cross_entropy",
                format!("logits {:?} vs {} labels", xs, labels.len()),
            ));
        }
        let (bsz, c) = (xs[0], xs[1]);
        if let Some(&bad) = labels.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0f64; bsz * c];
        let mut total = 0.0;
        {
            let xd = self.nodes[logits].out.data();
            for s in 0..bsz {
                let row = &xd[s * c..][..c];
                let p = &mut probs[s * c..][..c];
                // loss via log-sum-exp; p kept for backward
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut z = 0.0;
                for (pi, &v) in p.iter_mut().zip(row) {
                    *pi = (v - m).exp();
                    z += *pi;
                }
                for pi in p.iter_mut() {
                    *pi /= z;
                }
                total += z.ln() - (row[labels[s]] - m);
            }
        }
        if reduction == Reduction::Mean {
            total /= bsz as f64;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs, reduction },
            Tensor::scalar(total),
            needs,
        ))
    }

    /// Per-row maximum of a `[B,C]` tensor **excluding** the labeled column:
    /// `out[b] = max_{i≠t_b} x[b,i]`. Gradient is 1 on the (lowest-index)
    /// argmax, 0 elsewhere.
    pub fn reduce_max_excluding_index(&mut self, x: NodeId, labels: &[usize]) -> Result<NodeId> {
        let xs = self.nodes[x].out.shape().to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(Self::shape_err(
                "reduce_max_excluding_index",
                format!("input {:?} vs {} labels", xs, labels.len()),
            ));
        }
        let (bsz, c) = (xs[0], xs[1]);
        if c < 2 {
            return Err(Error::InvalidArgument(
                "reduce_max_excluding_index needs at least 2 classes".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "reduce_max_excluding_index label {bad} out of range for {c} classes"
            )));
        }
        let mut out = Tensor::zeros(&[bsz]);
        let mut argmax = vec![0usize; bsz];
        {
            let xd = self.nodes[x].out.data();
            let od = out.data_mut();
            for s in 0..bsz {
                let row = &xd[s * c..][..c];
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if i != labels[s] && v > best {
                        best = v;
                        arg = i;
                    }
                }
                od[s] = best;
                argmax[s] = s * c + arg;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::ReduceMaxExcluding { x, argmax }, out, needs))
    }

    /// Picks the labeled column of each row: `out[b] = x[b, t_b]`.
    pub fn gather_label(&mut self, x: NodeId, labels: &[usize]) -> Result<NodeId> {
        let xs = self.nodes[x].out.shape().to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(Self::shape_err(
                "gather_label",
                format!("input {:?} vs {} labels", xs, labels.len()),
            ));
        }
        let (bsz, c) = (xs[0], xs[1]);
        if let Some(&bad) = labels.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "gather_label label {bad} out of range for {c} classes"
            )));
        }
        let xd = self.nodes[x].out.data();
        let out = Tensor::new(vec![bsz], (0..bsz).map(|s| xd[s * c + labels[s]]).collect())
            .expect("length bsz");
        let needs = self.needs(x);
        Ok(self.push(Op::GatherLabel { x, labels: labels.to_vec() }, out, needs))
    }

    /// Numerically stable `ln(1 + eˣ)` elementwise.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::new(
            self.nodes[x].out.shape().to_vec(),
            self.nodes[x]
                .out
                .data()
                .iter()
                .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
                .collect(),
        )
        .expect("same shape");
        let needs = self.needs(x);
        self.push(Op::Softplus { x }, out, needs)
    }

    /// `ln(max(x, clamp))` elementwise; saturation events are counted in
    /// [`Graph::log_clamp_events`] so callers can flag them.
    pub fn log_clamped(&mut self, x: NodeId, clamp: f64) -> NodeId {
        let mut events = 0usize;
        let out = Tensor::new(
            self.nodes[x].out.shape().to_vec(),
            self.nodes[x]
                .out
                .data()
                .iter()
                .map(|&v| {
                    if v < clamp {
                        events += 1;
                        clamp.ln()
                    } else {
                        v.ln()
                    }
                })
                .collect(),
        )
        .expect("same shape");
        self.log_clamp_events += events;
        let needs = self.needs(x);
        self.push(Op::Log { x, clamp }, out, needs)
    }

    /// Sum of all elements → scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x].out.data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum { x }, Tensor::scalar(total), needs)
    }

    /// Fake quantization onto the symmetric integer grid
    /// `{-qmax, …, qmax}·scale` with straight-through gradients.
    pub fn fake_quant(&mut self, x: NodeId, scale: f64, qmax: f64) -> Result<NodeId> {
        if !(scale > 0.0) || !(qmax > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fake_quant needs positive scale/qmax, got {scale}/{qmax}"
            )));
        }
        let out = Tensor::new(
            self.nodes[x].out.shape().to_vec(),
            self.nodes[x]
                .out
                .data()
                .iter()
                .map(|&v| (v / scale).round().clamp(-qmax, qmax) * scale)
                .collect(),
        )
        .expect("same shape");
        let needs = self.needs(x);
        Ok(self.push(Op::FakeQuant { x, scale, qmax }, out, needs))
    }

    /// Per-channel batch normalization over `[B,C,H,W]` with affine
    /// parameters `gamma`/`beta` of shape `[C]`.
    ///
    /// With `batch_stats` the statistics come from the batch itself (training
    /// mode) and are returned so the caller can maintain running averages;
    /// otherwise the provided running statistics are treated as constants
    /// (eval mode).
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let xs = self.nodes[x].out.shape().to_vec();
        if xs.len() != 4 {
            return Err(Self::shape_err("batch_norm", format!("input {:?}, want NCHW", xs)));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[id].out.shape() != [c] {
                return Err(Self::shape_err(
                    "batch_norm",
                    format!("{name} {:?}, want [{c}]", self.nodes[id].out.shape()),
                ));
            }
        }
        let plane = h * w;
        let count = (bsz * plane) as f64;
        let (mean, var, batch_stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
            None => {
                let xd = self.nodes[x].out.data();
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for s in 0..bsz {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let mut acc = 0.0;
                        for &v in &xd[base..base + plane] {
                            acc += v;
                        }
                        mean[ch] += acc;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= count;
                }
                for s in 0..bsz {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let m = mean[ch];
                        let mut acc = 0.0;
                        for &v in &xd[base..base + plane] {
                            let d = v - m;
                            acc += d * d;
                        }
                        var[ch] += acc;
                    }
                }
                for v in var.iter_mut() {
                    *v /= count;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(&xs);
        {
            let xd = self.nodes[x].out.data();
            let gd = self.nodes[gamma].out.data().to_vec();
            let bd = self.nodes[beta].out.data().to_vec();
            let od = out.data_mut();
            for s in 0..bsz {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    let (m, is, g, bb) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                    for (o, &v) in od[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                        *o = (v - m) * is * g + bb;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let var_out = var.clone();
        let mean_out = mean.clone();
        let id = self.push(
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats },
            out,
            needs,
        );
        Ok((id, mean_out, var_out))
    }

    /// Scalar `max |x|` over the concatenation of the given tensors.
    /// Subgradient: `sign` on the single winning entry (first in scan
    /// order), zero elsewhere; zero everywhere when the max is 0.
    pub fn max_abs_multi(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("max_abs_multi needs at least one input".into()));
        }
        let mut best = f64::NEG_INFINITY;
        let mut arg = (0usize, 0usize);
        for (pos, &id) in xs.iter().enumerate() {
            for (i, &v) in self.nodes[id].out.data().iter().enumerate() {
                if v.abs() > best {
                    best = v.abs();
                    arg = (pos, i);
                }
            }
        }
        let needs = xs.iter().any(|&id| self.needs(id));
        Ok(self.push(Op::MaxAbsMulti { xs: xs.to_vec(), arg }, Tensor::scalar(best), needs))
    }

    /// Reshape to an equal-element-count shape (data shared logically;
    /// gradient flows through unchanged).
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.nodes[x].out.reshaped(shape.to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape { x }, out, needs))
    }

    /// Flattens `[B, …]` to `[B, rest]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].out.shape();
        let b = xs[0];
        let rest: usize = xs[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse pass from a scalar `loss` node. Gradients accumulate into
    /// every node on a path from `loss` to a trainable leaf and can be read
    /// back with [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].out.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].out.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    /// Adds this node's contribution to its inputs' gradient buffers.
    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Allocate-on-demand accumulator for an input node.
        macro_rules! buf {
            ($nid:expr) => {
                grads[$nid].get_or_insert_with(|| vec![0.0; self.nodes[$nid].out.len()])
            };
        }
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.nodes[*x].out.shape();
                let ws = self.nodes[*w].out.shape();
                let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (f, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let oh = linalg::conv_out_dim(h, kh, *stride, *pad);
                let ow = linalg::conv_out_dim(wd, kw, *stride, *pad);
                let ckk = c * kh * kw;
                let xd = self.nodes[*x].out.data();
                let wd_ = self.nodes[*w].out.data();
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut cols = vec![0.0f64; ckk * oh * ow];
                let mut dcols = vec![0.0f64; ckk * oh * ow];
                // accumulate dW in a local, then add once (keeps borrow simple)
                let mut dw_local = vec![0.0f64; f * ckk];
                let mut dx_local = if need_x { vec![0.0f64; bsz * c * h * wd] } else { Vec::new() };
                for s in 0..bsz {
                    let dout = &g[s * f * oh * ow..][..f * oh * ow];
                    if need_w {
                        linalg::im2col(&xd[s * c * h * wd..][..c * h * wd], c, h, wd, kh, kw, *stride, *pad, &mut cols);
                        linalg::gemm_nt(f, oh * ow, ckk, dout, &cols, &mut dw_local);
                    }
                    if need_x {
                        dcols.fill(0.0);
                        linalg::gemm_tn(ckk, f, oh * ow, wd_, dout, &mut dcols);
                        linalg::col2im(
                            &dcols,
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            *stride,
                            *pad,
                            &mut dx_local[s * c * h * wd..][..c * h * wd],
                        );
                    }
                }
                if need_w {
                    let dw = buf!(*w);
                    for (d, v) in dw.iter_mut().zip(&dw_local) {
                        *d += v;
                    }
                }
                if need_x {
                    let dx = buf!(*x);
                    for (d, v) in dx.iter_mut().zip(&dx_local) {
                        *d += v;
                    }
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        let db = buf!(*bid);
                        for s in 0..bsz {
                            for fc in 0..f {
                                let base = (s * f + fc) * oh * ow;
                                let mut acc = 0.0;
                                for &v in &g[base..base + oh * ow] {
                                    acc += v;
                                }
                                db[fc] += acc;
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[*x].out.shape();
                let ws = self.nodes[*w].out.shape();
                let (bsz, i, o) = (xs[0], xs[1], ws[0]);
                if self.needs(*x) {
                    let mut dx_local = vec![0.0f64; bsz * i];
                    linalg::gemm_nn(bsz, o, i, g, self.nodes[*w].out.data(), &mut dx_local);
                    let dx = buf!(*x);
                    for (d, v) in dx.iter_mut().zip(&dx_local) {
                        *d += v;
                    }
                }
                if self.needs(*w) {
                    let mut dw_local = vec![0.0f64; o * i];
                    linalg::gemm_tn(o, bsz, i, g, self.nodes[*x].out.data(), &mut dw_local);
                    let dw = buf!(*w);
                    for (d, v) in dw.iter_mut().zip(&dw_local) {
                        *d += v;
                    }
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        let db = buf!(*bid);
                        for s in 0..bsz {
                            for j in 0..o {
                                db[j] += g[s * o + j];
                            }
                        }
                    }
                }
            }
            Op::Relu { x } | Op::Hinge { x } => {
                if self.needs(*x) {
                    let xd = self.nodes[*x].out.data();
                    let dx = buf!(*x);
                    for ((d, &v), &gg) in dx.iter_mut().zip(xd).zip(g) {
                        if v > 0.0 {
                            *d += gg;
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.needs(*x) {
                    let xs = self.nodes[*x].out.shape();
                    let plane = xs[2] * xs[3];
                    let os = self.nodes[id].out.shape();
                    let oplane = os[2] * os[3];
                    let dx = buf!(*x);
                    for sc in 0..xs[0] * xs[1] {
                        for oi in 0..oplane {
                            dx[sc * plane + argmax[sc * oplane + oi]] += g[sc * oplane + oi];
                        }
                    }
                }
            }
            Op::AvgPool2d { x, k, stride } => {
                if self.needs(*x) {
                    let xs = self.nodes[*x].out.shape();
                    let (h, w) = (xs[2], xs[3]);
                    let os = self.nodes[id].out.shape();
                    let (oh, ow) = (os[2], os[3]);
                    let inv = 1.0 / (k * k) as f64;
                    let dx = buf!(*x);
                    for sc in 0..xs[0] * xs[1] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(sc * oh + oy) * ow + ox] * inv;
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        dx[sc * h * w + (oy * stride + ky) * w + ox * stride + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for nid in [*a, *b] {
                    if self.needs(nid) {
                        let d = buf!(nid);
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    let d = buf!(*a);
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if self.needs(*b) {
                    let d = buf!(*b);
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    let d = buf!(*x);
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv * factor;
                    }
                }
            }
            Op::AddConst { x } => {
                if self.needs(*x) {
                    let d = buf!(*x);
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let os = self.nodes[id].out.shape();
                    let (bsz, c) = (os[0], os[1]);
                    let z = self.nodes[id].out.data();
                    let dx = buf!(*x);
                    for s in 0..bsz {
                        let zr = &z[s * c..][..c];
                        let gr = &g[s * c..][..c];
                        let inner: f64 = zr.iter().zip(gr).map(|(zv, gv)| zv * gv).sum();
                        for i in 0..c {
                            dx[s * c + i] += zr[i] * (gr[i] - inner);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs, reduction } => {
                if self.needs(*logits) {
                    let c = self.nodes[*logits].out.shape()[1];
                    let bsz = labels.len();
                    let w = match reduction {
                        Reduction::Mean => g[0] / bsz as f64,
                        Reduction::Sum => g[0],
                    };
                    let dx = buf!(*logits);
                    for s in 0..bsz {
                        for i in 0..c {
                            let ind = if i == labels[s] { 1.0 } else { 0.0 };
                            dx[s * c + i] += w * (probs[s * c + i] - ind);
                        }
                    }
                }
            }
            Op::ReduceMaxExcluding { x, argmax } => {
                if self.needs(*x) {
                    let dx = buf!(*x);
                    for (s, &flat) in argmax.iter().enumerate() {
                        dx[flat] += g[s];
                    }
                }
            }
            Op::GatherLabel { x, labels } => {
                if self.needs(*x) {
                    let c = self.nodes[*x].out.shape()[1];
                    let dx = buf!(*x);
                    for (s, &t) in labels.iter().enumerate() {
                        dx[s * c + t] += g[s];
                    }
                }
            }
            Op::Softplus { x } => {
                if self.needs(*x) {
                    let xd = self.nodes[*x].out.data();
                    let dx = buf!(*x);
                    for ((dv, &v), &gv) in dx.iter_mut().zip(xd).zip(g) {
                        // d/dx ln(1+eˣ) = sigmoid(x)
                        *dv += gv / (1.0 + (-v).exp());
                    }
                }
            }
            Op::Log { x, clamp } => {
                if self.needs(*x) {
                    let xd = self.nodes[*x].out.data();
                    let dx = buf!(*x);
                    for ((dv, &v), &gv) in dx.iter_mut().zip(xd).zip(g) {
                        // zero slope inside the clamped region, 1/x outside
                        if v >= *clamp {
                            *dv += gv / v;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let dx = buf!(*x);
                    for dv in dx.iter_mut() {
                        *dv += g[0];
                    }
                }
            }
            Op::FakeQuant { x, scale, qmax } => {
                if self.needs(*x) {
                    let bound = scale * qmax;
                    let xd = self.nodes[*x].out.data();
                    let dx = buf!(*x);
                    for ((dv, &v), &gv) in dx.iter_mut().zip(xd).zip(g) {
                        // straight-through inside the representable range
                        if v.abs() <= bound {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let xs = self.nodes[*x].out.shape();
                let (bsz, c) = (xs[0], xs[1]);
                let plane = xs[2] * xs[3];
                let count = (bsz * plane) as f64;
                let xd = self.nodes[*x].out.data();
                let gd = self.nodes[*gamma].out.data();
                // per-channel reductions Σg and Σg·x̂ are shared by all terms
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for s in 0..bsz {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let (m, is) = (mean[ch], inv_std[ch]);
                        let mut a = 0.0;
                        let mut b2 = 0.0;
                        for (&gv, &v) in g[base..base + plane].iter().zip(&xd[base..base + plane]) {
                            a += gv;
                            b2 += gv * (v - m) * is;
                        }
                        sum_g[ch] += a;
                        sum_gx[ch] += b2;
                    }
                }
                if self.needs(*gamma) {
                    let dg = buf!(*gamma);
                    for (d, v) in dg.iter_mut().zip(&sum_gx) {
                        *d += v;
                    }
                }
                if self.needs(*beta) {
                    let db = buf!(*beta);
                    for (d, v) in db.iter_mut().zip(&sum_g) {
                        *d += v;
                    }
                }
                if self.needs(*x) {
                    let dx = buf!(*x);
                    for s in 0..bsz {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let (m, is, ga) = (mean[ch], inv_std[ch], gd[ch]);
                            if *batch_stats {
                                let mg = sum_g[ch] / count;
                                let mgx = sum_gx[ch] / count;
                                for ((dv, &gv), &v) in dx[base..base + plane]
                                    .iter_mut()
                                    .zip(&g[base..base + plane])
                                    .zip(&xd[base..base + plane])
                                {
                                    let xhat = (v - m) * is;
                                    *dv += ga * is * (gv - mg - xhat * mgx);
                                }
                            } else {
                                // running stats are constants: pure affine
                                for (dv, &gv) in
                                    dx[base..base + plane].iter_mut().zip(&g[base..base + plane])
                                {
                                    *dv += ga * is * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxAbsMulti { xs, arg } => {
                let (pos, idx) = *arg;
                let nid = xs[pos];
                if self.needs(nid) {
                    let v = self.nodes[nid].out.data()[idx];
                    let d = buf!(nid);
                    // sign subgradient; exactly 0 at the all-zero kink
                    d[idx] += g[0] * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let d = buf!(*x);
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
        }
    }
}

/// In-place stable softmax of one row.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Central-difference gradient check for a scalar-valued function.
///
/// `f` evaluates the loss at a given setting of the leaf's flat values,
/// `x0` is the point being checked, `analytic` the gradient produced by
/// [`Graph::backward`]. Returns the max over `coords` of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    analytic: &[f64],
    epsilon: f64,
    coords: &[usize],
) -> f64 {
    assert!(epsilon > 0.0, "epsilon must be positive");
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let keep = x[i];
        x[i] = keep + epsilon;
        let hi = f(&x);
        x[i] = keep - epsilon;
        let lo = f(&x);
        x[i] = keep;
        let numeric = (hi - lo) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Random ≤3-layer relu MLPs agree with finite differences at points
        /// safely away from the relu kinks.
        #[test]
        fn random_mlp_gradients_match_finite_differences(
            seed in 0u64..1_000_000,
            depth in 1usize..4,
            dims in proptest::collection::vec(2usize..6, 4),
        ) {
            let bsz = 2usize;
            let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(7);
            let mut rnd = move |n: usize| -> Vec<f64> {
                (0..n).map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                }).collect()
            };
            let layer_dims: Vec<usize> = std::iter::once(dims[0])
                .chain(dims[1..=depth].iter().cloned())
                .collect();
            let x0 = rnd(bsz * layer_dims[0]);
            let ws: Vec<Vec<f64>> = (0..depth)
                .map(|l| rnd(layer_dims[l + 1] * layer_dims[l]))
                .collect();
            let labels: Vec<usize> = (0..bsz).map(|s| s % layer_dims[depth]).collect();
            let build = |wflat: &[f64]| {
                let mut g = Graph::new();
                let x = g.constant(
                    Tensor::new(vec![bsz, layer_dims[0]], x0.clone()).unwrap(),
                );
                let mut cur = x;
                let mut offset = 0usize;
                let mut wids = Vec::new();
                let mut min_preact = f64::INFINITY;
                for l in 0..depth {
                    let (o, i) = (layer_dims[l + 1], layer_dims[l]);
                    let w = g.leaf(
                        Tensor::new(vec![o, i], wflat[offset..offset + o * i].to_vec()).unwrap(),
                        true,
                    );
                    offset += o * i;
                    wids.push(w);
                    cur = g.linear(cur, w, None).unwrap();
                    if l + 1 < depth {
                        for &v in g.value(cur).data() {
                            min_preact = min_preact.min(v.abs());
                        }
                        cur = g.relu(cur);
                    }
                }
                let loss = g.cross_entropy(cur, &labels, Reduction::Mean).unwrap();
                (g, wids, loss, min_preact)
            };
            let wflat: Vec<f64> = ws.concat();
            let (mut g, wids, loss, min_preact) = build(&wflat);
            // keep finite differences away from relu kinks
            prop_assume!(depth == 1 || min_preact > 1e-3);
            g.backward(loss).unwrap();
            let analytic: Vec<f64> = wids
                .iter()
                .flat_map(|&w| g.grad(w).unwrap_or(&[]).to_vec())
                .collect();
            let coords: Vec<usize> = (0..wflat.len()).collect();
            let err = finite_difference_check(
                |v| {
                    let (g, _, loss, _) = build(v);
                    g.value(loss).data()[0]
                },
                &wflat,
                &analytic,
                1e-6,
                &coords,
            );
            prop_assert!(err < 1e-4, "max rel err {}", err);
        }

        /// maxpool forward equals a brute-force window maximum.
        #[test]
        fn maxpool_forward_is_window_max(
            seed in 0u64..100_000,
            h in 2usize..8,
            w in 2usize..8,
            k in 2usize..4,
        ) {
            prop_assume!(k <= h && k <= w);
            let mut s = seed.wrapping_add(3);
            let vals: Vec<f64> = (0..h * w).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            }).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![1, 1, h, w], vals.clone()).unwrap());
            let p = g.maxpool2d(x, k, k).unwrap();
            let (oh, ow) = ((h - k) / k + 1, (w - k) / k + 1);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            best = best.max(vals[(oy * k + ky) * w + ox * k + kx]);
                        }
                    }
                    prop_assert_eq!(g.value(p).data()[oy * ow + ox], best);
                }
            }
        }
    }
}
