//! Reverse-mode differentiation tape.
//!
//! Each operation appends a node holding its output value and the information
//! needed to replay its local gradient rule. `backward` walks the nodes in
//! exact reverse execution order; gradient accumulation across fan-out is
//! additive. Execution is single-threaded and bitwise deterministic.

use super::kernels::{self, ScanDir, SignumOrZero};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Per-channel (mean, biased variance) returned by a training-mode
/// batch normalization.
pub type BatchStats = (Vec<f64>, Vec<f64>);

/// Scan direction for spatial propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::LeftToRight,
        ScanDirection::RightToLeft,
        ScanDirection::TopToBottom,
        ScanDirection::BottomToTop,
    ];

    fn to_kernel(self) -> ScanDir {
        match self {
            ScanDirection::LeftToRight => ScanDir::LeftToRight,
            ScanDirection::RightToLeft => ScanDir::RightToLeft,
            ScanDirection::TopToBottom => ScanDir::TopToBottom,
            ScanDirection::BottomToTop => ScanDir::BottomToTop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Swish,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// y = a * x + b, elementwise with scalar a, b.
    Affine { input: usize, a: f64 },
    Abs(usize),
    Exp(usize),
    Act { input: usize, kind: Activation, alpha: f64 },
    /// y = max(x, floor).
    ClampMin { input: usize, floor: f64 },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { input: usize, axis: usize, start: usize, len: usize },
    Softmax { input: usize, axis: usize },
    Sum(usize),
    Mean(usize),
    /// Reduce one axis to extent 1, keeping rank.
    SumAxis { input: usize, axis: usize },
    Conv2d { input: usize, weight: usize, bias: usize, stride: usize, padding: usize },
    MaxPool2x2(usize),
    UpsampleBilinear2x(usize),
    UpsampleNearest2x(usize),
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        training: bool,
    },
    CostVolumeFull { left: usize, right: usize, d_count: usize },
    CostVolumeResidual { left: usize, right_warped: usize, k: usize },
    Warp { features: usize, disparity: usize },
    SpnScan { input: usize, weights: [usize; 3], dir: ScanDirection },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    label: Option<String>,
    macs: u64,
}

/// Topologically ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push_node(value, Op::Leaf, requires_grad, None)
    }

    pub fn leaf_labeled(&mut self, value: Tensor, requires_grad: bool, label: &str) -> TensorId {
        self.push_node(value, Op::Leaf, requires_grad, Some(label.to_string()))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, label: Option<String>) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad, grad: None, label, macs: 0 });
        TensorId(id)
    }

    /// Appends an op output, enforcing the all-finite forward contract.
    fn push_op(&mut self, name: &'static str, value: Tensor, op: Op, macs: u64) -> Result<TensorId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.op_requires_grad(&op);
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad, grad: None, label: None, macs });
        Ok(TensorId(id))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let mut req = false;
        self.visit_inputs(op, |i| req |= self.nodes[i].requires_grad);
        req
    }

    fn visit_inputs(&self, op: &Op, mut f: impl FnMut(usize)) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Affine { input, .. }
            | Op::Abs(input)
            | Op::Exp(input)
            | Op::Act { input, .. }
            | Op::ClampMin { input, .. }
            | Op::Narrow { input, .. }
            | Op::Softmax { input, .. }
            | Op::Sum(input)
            | Op::Mean(input)
            | Op::SumAxis { input, .. }
            | Op::MaxPool2x2(input)
            | Op::UpsampleBilinear2x(input)
            | Op::UpsampleNearest2x(input) => f(*input),
            Op::Concat { inputs, .. } => inputs.iter().copied().for_each(f),
            Op::Conv2d { input, weight, bias, .. } => {
                f(*input);
                f(*weight);
                f(*bias);
            }
            Op::BatchNorm { input, gamma, beta, .. } => {
                f(*input);
                f(*gamma);
                f(*beta);
            }
            Op::CostVolumeFull { left, right, .. } => {
                f(*left);
                f(*right);
            }
            Op::CostVolumeResidual { left, right_warped, .. } => {
                f(*left);
                f(*right_warped);
            }
            Op::Warp { features, disparity } => {
                f(*features);
                f(*disparity);
            }
            Op::SpnScan { input, weights, .. } => {
                f(*input);
                weights.iter().copied().for_each(f);
            }
        }
    }

    // ── Elementwise and algebra ─────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push_op("add", data, Op::Add(a.0, b.0), 0)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push_op("sub", data, Op::Sub(a.0, b.0), 0)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push_op("mul", data, Op::Mul(a.0, b.0), 0)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("div", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push_op("div", data, Op::Div(a.0, b.0), 0)
    }

    /// y = a * x + b.
    pub fn affine(&mut self, input: TensorId, a: f64, b: f64) -> Result<TensorId> {
        let data = map(self.value(input), |x| a * x + b);
        self.push_op("affine", data, Op::Affine { input: input.0, a }, 0)
    }

    pub fn scale(&mut self, input: TensorId, a: f64) -> Result<TensorId> {
        self.affine(input, a, 0.0)
    }

    pub fn neg(&mut self, input: TensorId) -> Result<TensorId> {
        self.affine(input, -1.0, 0.0)
    }

    /// Subgradient at 0 is 0.
    pub fn abs(&mut self, input: TensorId) -> Result<TensorId> {
        let data = map(self.value(input), f64::abs);
        self.push_op("abs", data, Op::Abs(input.0), 0)
    }

    pub fn exp(&mut self, input: TensorId) -> Result<TensorId> {
        let data = map(self.value(input), f64::exp);
        self.push_op("exp", data, Op::Exp(input.0), 0)
    }

    pub fn clamp_min(&mut self, input: TensorId, floor: f64) -> Result<TensorId> {
        let data = map(self.value(input), |x| x.max(floor));
        self.push_op("clamp_min", data, Op::ClampMin { input: input.0, floor }, 0)
    }

    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        self.activation(input, Activation::Relu, 0.0)
    }

    pub fn leaky_relu(&mut self, input: TensorId, alpha: f64) -> Result<TensorId> {
        self.activation(input, Activation::LeakyRelu, alpha)
    }

    pub fn sigmoid(&mut self, input: TensorId) -> Result<TensorId> {
        self.activation(input, Activation::Sigmoid, 0.0)
    }

    /// swish(x) = x * sigmoid(x).
    pub fn swish(&mut self, input: TensorId) -> Result<TensorId> {
        self.activation(input, Activation::Swish, 0.0)
    }

    pub(crate) fn activation(&mut self, input: TensorId, kind: Activation, alpha: f64) -> Result<TensorId> {
        let data = map(self.value(input), |x| apply_activation(x, kind, alpha));
        self.push_op("activation", data, Op::Act { input: input.0, kind, alpha }, 0)
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::arg("concat: no inputs".to_string()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::arg(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len() {
                return Err(Error::shape("concat: rank mismatch".to_string()));
            }
            for (d, (&a, &b)) in first.iter().zip(s.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(format!(
                        "concat: non-axis extents differ: {first:?} vs {s:?}"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for &id in inputs {
            let src = self.value(id);
            let a = src.shape()[axis];
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * a * inner;
                data[dst_base..dst_base + a * inner]
                    .copy_from_slice(&src.data()[src_base..src_base + a * inner]);
            }
            offset += a;
        }
        let value = Tensor::new(out_shape, data)?;
        let op = Op::Concat { inputs: inputs.iter().map(|i| i.0).collect(), axis };
        self.push_op("concat", value, op, 0)
    }

    pub fn narrow(&mut self, input: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::arg(format!(
                "narrow: axis {axis} range {start}..{} invalid for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(input).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * shape[axis] + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let value = Tensor::new(out_shape, data)?;
        self.push_op("narrow", value, Op::Narrow { input: input.0, axis, start, len }, 0)
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg(format!("softmax: axis {axis} out of range for {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(input).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                let mut max_val = f64::NEG_INFINITY;
                for k in 0..extent {
                    max_val = max_val.max(src[at(k)]);
                }
                let mut denom = 0.0;
                for k in 0..extent {
                    let e = (src[at(k)] - max_val).exp();
                    data[at(k)] = e;
                    denom += e;
                }
                for k in 0..extent {
                    data[at(k)] /= denom;
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push_op("softmax", value, Op::Softmax { input: input.0, axis }, 0)
    }

    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(input).data().iter().sum();
        self.push_op("sum", Tensor::scalar(s), Op::Sum(input.0), 0)
    }

    pub fn mean(&mut self, input: TensorId) -> Result<TensorId> {
        let v = self.value(input);
        let s: f64 = v.data().iter().sum();
        let m = s / v.numel() as f64;
        self.push_op("mean", Tensor::scalar(m), Op::Mean(input.0), 0)
    }

    /// Sums along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(input).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..extent {
                let base = (o * extent + k) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    data[dst + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(out_shape, data)?;
        self.push_op("sum_axis", value, Op::SumAxis { input: input.0, axis }, 0)
    }

    /// Mean of elements where the (non-differentiated) mask is non-zero.
    pub fn masked_mean(&mut self, input: TensorId, mask: &Tensor) -> Result<TensorId> {
        if self.shape(input) != mask.shape() {
            return Err(Error::shape(format!(
                "masked_mean: {:?} vs mask {:?}",
                self.shape(input),
                mask.shape()
            )));
        }
        let count = mask.data().iter().filter(|&&m| m != 0.0).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let m = self.constant(mask.clone());
        let prod = self.mul(input, m)?;
        let s = self.sum(prod)?;
        self.affine(s, 1.0 / count as f64, 0.0)
    }

    // ── Structured ops ──────────────────────────────────────────────────

    /// 2-D cross-correlation: input NCHW, weight OIHW, bias O.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (n, ci, h, w) = self.value(input).dims4()?;
        let (co, wi, kh, kw) = self.value(weight).dims4()?;
        if wi != ci {
            return Err(Error::shape(format!(
                "conv2d: input has {ci} channels, weight expects {wi}"
            )));
        }
        if self.shape(bias) != [co] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?}, expected [{co}]",
                self.shape(bias)
            )));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d: stride must be positive".to_string()));
        }
        let oh = conv_extent_checked(h, kh, stride, padding)?;
        let ow = conv_extent_checked(w, kw, stride, padding)?;
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n, ci, h, w, co, kh, kw, stride, padding, oh, ow,
        );
        let macs = (n * co * oh * ow * ci * kh * kw) as u64;
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        let op = Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, stride, padding };
        let id = self.push_op("conv2d", value, op, macs)?;
        // Attribute the MACs to the weight's parameter name when present.
        if let Some(label) = self.nodes[weight.0].label.clone() {
            self.nodes[id.0].label = Some(label);
        }
        Ok(id)
    }

    pub fn maxpool2x2(&mut self, input: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("maxpool2x2: odd spatial extents {h}x{w}")));
        }
        let out = kernels::maxpool2x2_forward(self.value(input).data(), n, c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.push_op("maxpool2x2", value, Op::MaxPool2x2(input.0), 0)
    }

    /// 2x bilinear upsampling, align-corners-false convention.
    pub fn upsample_bilinear2x(&mut self, input: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let out = kernels::upsample_bilinear2x_forward(self.value(input).data(), n, c, h, w);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        self.push_op("upsample_bilinear2x", value, Op::UpsampleBilinear2x(input.0), 0)
    }

    pub fn upsample_nearest2x(&mut self, input: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let out = kernels::upsample_nearest2x_forward(self.value(input).data(), n, c, h, w);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        self.push_op("upsample_nearest2x", value, Op::UpsampleNearest2x(input.0), 0)
    }

    /// Batch normalization over N, H, W per channel.
    ///
    /// Training mode normalizes by batch statistics and returns them (biased
    /// variance) so the caller can update running state; eval mode normalizes
    /// by the provided running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        training: bool,
        eps: f64,
    ) -> Result<(TensorId, Option<BatchStats>)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [c] {
                return Err(Error::shape(format!(
                    "batchnorm2d: {name} shape {:?}, expected [{c}]",
                    self.shape(id)
                )));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(format!(
                "batchnorm2d: running stats length {} / {}, expected {c}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let (mean, var) = if training {
            kernels::batch_stats(self.value(input).data(), n, c, h, w)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let out = kernels::batchnorm_forward(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &var,
            eps,
            n, c, h, w,
        );
        let stats = training.then(|| (mean.clone(), var.clone()));
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let op = Op::BatchNorm { input: input.0, gamma: gamma.0, beta: beta.0, mean, var, eps, training };
        let id = self.push_op("batchnorm2d", value, op, 0)?;
        Ok((id, stats))
    }

    /// cost[d, y, x] = mean over channels of |L[:, y, x] - R[:, y, x-d]|.
    pub fn cost_volume_full(&mut self, left: TensorId, right: TensorId, d_count: usize) -> Result<TensorId> {
        self.check_same_shape("cost_volume_full", left, right)?;
        let (n, c, h, w) = self.value(left).dims4()?;
        if d_count == 0 || d_count > w {
            return Err(Error::arg(format!(
                "cost_volume_full: candidate count {d_count} exceeds feature width {w}"
            )));
        }
        let out = kernels::cost_volume_full_forward(
            self.value(left).data(),
            self.value(right).data(),
            n, c, h, w, d_count,
        );
        let value = Tensor::new(vec![n, d_count, h, w], out)?;
        let op = Op::CostVolumeFull { left: left.0, right: right.0, d_count };
        self.push_op("cost_volume_full", value, op, 0)
    }

    /// Residual matching costs over offsets -k..=k on pre-warped features.
    pub fn cost_volume_residual(&mut self, left: TensorId, right_warped: TensorId, k: usize) -> Result<TensorId> {
        self.check_same_shape("cost_volume_residual", left, right_warped)?;
        let (n, c, h, w) = self.value(left).dims4()?;
        let out = kernels::cost_volume_residual_forward(
            self.value(left).data(),
            self.value(right_warped).data(),
            n, c, h, w, k,
        );
        let value = Tensor::new(vec![n, 2 * k + 1, h, w], out)?;
        let op = Op::CostVolumeResidual { left: left.0, right_warped: right_warped.0, k };
        self.push_op("cost_volume_residual", value, op, 0)
    }

    /// Samples features at (y, x - disparity) with horizontal interpolation.
    pub fn warp_with_disparity(&mut self, features: TensorId, disparity: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.value(features).dims4()?;
        let (dn, dc, dh, dw) = self.value(disparity).dims4()?;
        if (dn, dc, dh, dw) != (n, 1, h, w) {
            return Err(Error::shape(format!(
                "warp: disparity shape {:?}, expected [{n}, 1, {h}, {w}]",
                self.shape(disparity)
            )));
        }
        let out = kernels::warp_forward(
            self.value(features).data(),
            self.value(disparity).data(),
            n, c, h, w,
        );
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let op = Op::Warp { features: features.0, disparity: disparity.0 };
        self.push_op("warp", value, op, 0)
    }

    /// One directional propagation scan with three per-pixel neighbour weights.
    pub fn spn_scan(
        &mut self,
        input: TensorId,
        weights: [TensorId; 3],
        dir: ScanDirection,
    ) -> Result<TensorId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        for wid in weights {
            self.check_same_shape("spn_scan", input, wid)?;
        }
        let out = kernels::spn_scan_forward(
            self.value(input).data(),
            [
                self.value(weights[0]).data(),
                self.value(weights[1]).data(),
                self.value(weights[2]).data(),
            ],
            dir.to_kernel(),
            n, c, h, w,
        );
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let op = Op::SpnScan { input: input.0, weights: [weights[0].0, weights[1].0, weights[2].0], dir };
        self.push_op("spn_scan", value, op, 0)
    }

    // ── MAC accounting ──────────────────────────────────────────────────

    /// Total multiply-accumulate count recorded on this tape (convolutions;
    /// activations, normalization and resampling are not counted).
    pub fn total_macs(&self) -> u64 {
        self.nodes.iter().map(|n| n.macs).sum()
    }

    /// Per-layer MAC counts in execution order, labelled by parameter name
    /// where the convolution weight was a named leaf.
    pub fn mac_report(&self) -> Vec<(String, u64)> {
        self.nodes
            .iter()
            .filter(|n| n.macs > 0)
            .map(|n| (n.label.clone().unwrap_or_else(|| "conv2d".to_string()), n.macs))
            .collect()
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populates gradients on every `requires_grad` leaf reachable from the
    /// scalar `loss`. Repeated calls accumulate into leaf gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::arg(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut work: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        work[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                work[i] = None;
                continue;
            }
            let Some(grad) = work[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    if self.nodes[i].requires_grad {
                        match &mut self.nodes[i].grad {
                            Some(g) => add_slices(g, &grad),
                            slot => *slot = Some(grad),
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut work, a, &grad);
                    self.accumulate(&mut work, b, &grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut work, a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accumulate(&mut work, b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(&mut work, a, &da);
                    self.accumulate(&mut work, b, &db);
                }
                Op::Div(a, b) => {
                    let bd = self.nodes[b].value.data();
                    let ad = self.nodes[a].value.data();
                    let da: Vec<f64> = grad.iter().zip(bd).map(|(g, y)| g / y).collect();
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(&mut work, a, &da);
                    self.accumulate(&mut work, b, &db);
                }
                Op::Affine { input, a } => {
                    let dg: Vec<f64> = grad.iter().map(|g| g * a).collect();
                    self.accumulate(&mut work, input, &dg);
                }
                Op::Abs(input) => {
                    let dg: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[input].value.data())
                        .map(|(g, x)| g * x.signum_or_zero())
                        .collect();
                    self.accumulate(&mut work, input, &dg);
                }
                Op::Exp(input) => {
                    let dg: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(g, e)| g * e)
                        .collect();
                    self.accumulate(&mut work, input, &dg);
                }
                Op::Act { input, kind, alpha } => {
                    let x = self.nodes[input].value.data();
                    let y = self.nodes[i].value.data();
                    let dg: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(j, g)| g * activation_derivative(x[j], y[j], kind, alpha))
                        .collect();
                    self.accumulate(&mut work, input, &dg);
                }
                Op::ClampMin { input, floor } => {
                    let dg: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[input].value.data())
                        .map(|(g, &x)| if x >= floor { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut work, input, &dg);
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let (outer, total, inner) = split_axis(&out_shape, axis);
                    let mut offset = 0;
                    for &src in &inputs {
                        let a = self.nodes[src].value.shape()[axis];
                        let mut part = vec![0.0; self.nodes[src].value.numel()];
                        for o in 0..outer {
                            let g_base = (o * total + offset) * inner;
                            let p_base = o * a * inner;
                            part[p_base..p_base + a * inner]
                                .copy_from_slice(&grad[g_base..g_base + a * inner]);
                        }
                        self.accumulate(&mut work, src, &part);
                        offset += a;
                    }
                }
                Op::Narrow { input, axis, start, len } => {
                    let in_shape = self.nodes[input].value.shape().to_vec();
                    let (outer, extent, inner) = split_axis(&in_shape, axis);
                    let mut dg = vec![0.0; self.nodes[input].value.numel()];
                    for o in 0..outer {
                        let dst_base = (o * extent + start) * inner;
                        let src_base = o * len * inner;
                        dg[dst_base..dst_base + len * inner]
                            .copy_from_slice(&grad[src_base..src_base + len * inner]);
                    }
                    self.accumulate(&mut work, input, &dg);
                }
                Op::Softmax { input, axis } => {
                    let shape = self.nodes[i].value.shape().to_vec();
                    let (outer, extent, inner) = split_axis(&shape, axis);
                    let s = self.nodes[i].value.data();
                    let mut dg = vec![0.0; s.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |k: usize| (o * extent + k) * inner + ii;
                            let mut dot = 0.0;
                            for k in 0..extent {
                                dot += grad[at(k)] * s[at(k)];
                            }
                            for k in 0..extent {
                                dg[at(k)] = s[at(k)] * (grad[at(k)] - dot);
                            }
                        }
                    }
                    self.accumulate(&mut work, input, &dg);
                }
                Op::Sum(input) => {
                    let dg = vec![grad[0]; self.nodes[input].value.numel()];
                    self.accumulate(&mut work, input, &dg);
                }
                Op::Mean(input) => {
                    let numel = self.nodes[input].value.numel();
                    let dg = vec![grad[0] / numel as f64; numel];
                    self.accumulate(&mut work, input, &dg);
                }
                Op::SumAxis { input, axis } => {
                    let in_shape = self.nodes[input].value.shape().to_vec();
                    let (outer, extent, inner) = split_axis(&in_shape, axis);
                    let mut dg = vec![0.0; self.nodes[input].value.numel()];
                    for o in 0..outer {
                        for k in 0..extent {
                            let base = (o * extent + k) * inner;
                            let g_base = o * inner;
                            dg[base..base + inner].copy_from_slice(&grad[g_base..g_base + inner]);
                        }
                    }
                    self.accumulate(&mut work, input, &dg);
                }
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    let (n_, ci, h, w) = self.nodes[input].value.dims4().expect("conv input 4-D");
                    let (co, _, kh, kw) = self.nodes[weight].value.dims4().expect("conv weight 4-D");
                    let oh = self.nodes[i].value.shape()[2];
                    let ow = self.nodes[i].value.shape()[3];
                    let mut gi = grad_buf(self.nodes[input].requires_grad, n_ * ci * h * w);
                    let mut gw = grad_buf(self.nodes[weight].requires_grad, co * ci * kh * kw);
                    let mut gb = grad_buf(self.nodes[bias].requires_grad, co);
                    kernels::conv2d_backward(
                        &grad,
                        self.nodes[input].value.data(),
                        self.nodes[weight].value.data(),
                        n_, ci, h, w, co, kh, kw, stride, padding, oh, ow,
                        &mut gi, &mut gw, &mut gb,
                    );
                    self.accumulate(&mut work, input, &gi);
                    self.accumulate(&mut work, weight, &gw);
                    self.accumulate(&mut work, bias, &gb);
                }
                Op::MaxPool2x2(input) => {
                    let (n_, c, h, w) = self.nodes[input].value.dims4().expect("pool input 4-D");
                    let mut gi = vec![0.0; n_ * c * h * w];
                    kernels::maxpool2x2_backward(&grad, self.nodes[input].value.data(), n_, c, h, w, &mut gi);
                    self.accumulate(&mut work, input, &gi);
                }
                Op::UpsampleBilinear2x(input) => {
                    let (n_, c, h, w) = self.nodes[input].value.dims4().expect("upsample input 4-D");
                    let mut gi = vec![0.0; n_ * c * h * w];
                    kernels::upsample_bilinear2x_backward(&grad, n_, c, h, w, &mut gi);
                    self.accumulate(&mut work, input, &gi);
                }
                Op::UpsampleNearest2x(input) => {
                    let (n_, c, h, w) = self.nodes[input].value.dims4().expect("upsample input 4-D");
                    let mut gi = vec![0.0; n_ * c * h * w];
                    kernels::upsample_nearest2x_backward(&grad, n_, c, h, w, &mut gi);
                    self.accumulate(&mut work, input, &gi);
                }
                Op::BatchNorm { input, gamma, beta, mean, var, eps, training } => {
                    let (n_, c, h, w) = self.nodes[input].value.dims4().expect("bn input 4-D");
                    let mut gi = grad_buf(self.nodes[input].requires_grad, n_ * c * h * w);
                    let mut gg = grad_buf(self.nodes[gamma].requires_grad, c);
                    let mut gb = grad_buf(self.nodes[beta].requires_grad, c);
                    let f = if training {
                        kernels::batchnorm_backward_training
                    } else {
                        kernels::batchnorm_backward_eval
                    };
                    f(
                        &grad,
                        self.nodes[input].value.data(),
                        self.nodes[gamma].value.data(),
                        &mean, &var, eps, n_, c, h, w,
                        &mut gi, &mut gg, &mut gb,
                    );
                    self.accumulate(&mut work, input, &gi);
                    self.accumulate(&mut work, gamma, &gg);
                    self.accumulate(&mut work, beta, &gb);
                }
                Op::CostVolumeFull { left, right, d_count } => {
                    let (n_, c, h, w) = self.nodes[left].value.dims4().expect("cv input 4-D");
                    let mut gl = vec![0.0; n_ * c * h * w];
                    let mut gr = vec![0.0; n_ * c * h * w];
                    kernels::cost_volume_full_backward(
                        &grad,
                        self.nodes[left].value.data(),
                        self.nodes[right].value.data(),
                        n_, c, h, w, d_count,
                        &mut gl, &mut gr,
                    );
                    self.accumulate(&mut work, left, &gl);
                    self.accumulate(&mut work, right, &gr);
                }
                Op::CostVolumeResidual { left, right_warped, k } => {
                    let (n_, c, h, w) = self.nodes[left].value.dims4().expect("cv input 4-D");
                    let mut gl = vec![0.0; n_ * c * h * w];
                    let mut gr = vec![0.0; n_ * c * h * w];
                    kernels::cost_volume_residual_backward(
                        &grad,
                        self.nodes[left].value.data(),
                        self.nodes[right_warped].value.data(),
                        n_, c, h, w, k,
                        &mut gl, &mut gr,
                    );
                    self.accumulate(&mut work, left, &gl);
                    self.accumulate(&mut work, right_warped, &gr);
                }
                Op::Warp { features, disparity } => {
                    let (n_, c, h, w) = self.nodes[features].value.dims4().expect("warp input 4-D");
                    let mut gf = grad_buf(self.nodes[features].requires_grad, n_ * c * h * w);
                    let mut gd = grad_buf(self.nodes[disparity].requires_grad, n_ * h * w);
                    kernels::warp_backward(
                        &grad,
                        self.nodes[features].value.data(),
                        self.nodes[disparity].value.data(),
                        n_, c, h, w,
                        &mut gf, &mut gd,
                    );
                    self.accumulate(&mut work, features, &gf);
                    self.accumulate(&mut work, disparity, &gd);
                }
                Op::SpnScan { input, weights, dir } => {
                    let (n_, c, h, w) = self.nodes[input].value.dims4().expect("scan input 4-D");
                    let numel = n_ * c * h * w;
                    let mut gi = vec![0.0; numel];
                    let mut gw0 = vec![0.0; numel];
                    let mut gw1 = vec![0.0; numel];
                    let mut gw2 = vec![0.0; numel];
                    kernels::spn_scan_backward(
                        &grad,
                        self.nodes[input].value.data(),
                        [
                            self.nodes[weights[0]].value.data(),
                            self.nodes[weights[1]].value.data(),
                            self.nodes[weights[2]].value.data(),
                        ],
                        self.nodes[i].value.data(),
                        dir.to_kernel(),
                        n_, c, h, w,
                        &mut gi,
                        [&mut gw0, &mut gw1, &mut gw2],
                    );
                    self.accumulate(&mut work, input, &gi);
                    self.accumulate(&mut work, weights[0], &gw0);
                    self.accumulate(&mut work, weights[1], &gw1);
                    self.accumulate(&mut work, weights[2], &gw2);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, work: &mut [Option<Vec<f64>>], target: usize, contrib: &[f64]) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut work[target] {
            Some(buf) => add_slices(buf, contrib),
            slot => *slot = Some(contrib.to_vec()),
        }
    }
}

fn grad_buf(wanted: bool, len: usize) -> Vec<f64> {
    if wanted {
        vec![0.0; len]
    } else {
        Vec::new()
    }
}

fn add_slices(dst: &mut [f64], src: &[f64]) {
    if src.is_empty() {
        return;
    }
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn conv_extent_checked(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    match kernels::conv_out_extent(input, kernel, stride, padding) {
        Some(e) if e >= 1 => Ok(e),
        _ => Err(Error::shape(format!(
            "conv2d: non-positive output extent for input {input}, kernel {kernel}, stride {stride}, padding {padding}"
        ))),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn apply_activation(x: f64, kind: Activation, alpha: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu => {
            if x >= 0.0 {
                x
            } else {
                alpha * x
            }
        }
        Activation::Sigmoid => sigmoid(x),
        Activation::Swish => x * sigmoid(x),
    }
}

/// Derivatives use the positive branch at exactly 0 for relu / leaky_relu.
fn activation_derivative(x: f64, y: f64, kind: Activation, alpha: f64) -> f64 {
    match kind {
        Activation::Relu => {
            if x >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::LeakyRelu => {
            if x >= 0.0 {
                1.0
            } else {
                alpha
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Swish => {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        }
    }
}
