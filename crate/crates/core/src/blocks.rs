//! Network building blocks, parameter storage, seeded initialization, and
//! the parameter / MAC counting used by the model-size experiments.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::{Tape, Tensor, TensorId};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Activation selection for blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActKind {
    Relu,
    LeakyRelu(f64),
    Swish,
    Sigmoid,
}

impl ActKind {
    pub fn apply(self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        match self {
            ActKind::Relu => tape.relu(x),
            ActKind::LeakyRelu(a) => tape.leaky_relu(x, a),
            ActKind::Swish => tape.swish(x),
            ActKind::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// What a stored tensor is, which decides how it is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Exact integer parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub trainable: u64,
    pub non_trainable: u64,
    pub total: u64,
}

/// Ordered, uniquely named parameter tensors.
///
/// Iteration order is insertion order and is the canonical order for
/// initialization, gradient collection and checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, kind: ParamKind, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let idx = self.entries.len();
        self.entries.push(Param { name: name.to_string(), value, kind, trainable });
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.entries[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.entries[idx]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    /// Exact counts; trainable and non-trainable partition the total.
    pub fn counts(&self) -> ParamCounts {
        let mut trainable = 0u64;
        let mut non_trainable = 0u64;
        for p in &self.entries {
            if p.trainable {
                trainable += p.value.numel() as u64;
            } else {
                non_trainable += p.value.numel() as u64;
            }
        }
        ParamCounts { trainable, non_trainable, total: trainable + non_trainable }
    }

    /// Seeded re-initialization of every entry, in store order.
    ///
    /// Conv weights draw from uniform(-b, b) with b = sqrt(6 / fan_in),
    /// fan_in = in_channels * kh * kw. Biases and BN beta are zero, BN gamma
    /// one; running statistics reset to mean 0 / var 1.
    pub fn init(&mut self, seed: u64) {
        let mut rng = DetRng::seed_from_u64(seed);
        for p in &mut self.entries {
            match p.kind {
                ParamKind::ConvWeight => {
                    let shape = p.value.shape();
                    debug_assert_eq!(shape.len(), 4, "conv weight must be OIHW");
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    for v in p.value.data_mut() {
                        *v = rng.uniform_in(-bound, bound);
                    }
                }
                ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnRunningMean => {
                    p.value.data_mut().fill(0.0);
                }
                ParamKind::BnGamma | ParamKind::BnRunningVar => {
                    p.value.data_mut().fill(1.0);
                }
            }
        }
    }
}

// ── Forward context ─────────────────────────────────────────────────────

/// Pending running-statistics update recorded during a training forward.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_idx: usize,
    pub var_idx: usize,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub count: usize,
}

/// Binds store parameters to tape leaves for one forward pass and collects
/// batch-norm running-statistic updates to apply afterwards.
pub struct ForwardCtx<'t> {
    pub tape: &'t mut Tape,
    pub training: bool,
    leaves: HashMap<usize, TensorId>,
    bound: Vec<(usize, TensorId)>,
    bn_updates: Vec<BnUpdate>,
}

impl<'t> ForwardCtx<'t> {
    pub fn new(tape: &'t mut Tape, training: bool) -> Self {
        ForwardCtx { tape, training, leaves: HashMap::new(), bound: Vec::new(), bn_updates: Vec::new() }
    }

    /// Leaf id for a store entry, inserted on first use.
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> TensorId {
        if let Some(&id) = self.leaves.get(&idx) {
            return id;
        }
        let p = store.get(idx);
        let id = self.tape.leaf_labeled(p.value.clone(), p.trainable, &p.name);
        self.leaves.insert(idx, id);
        self.bound.push((idx, id));
        id
    }

    pub fn record_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    /// (store index, leaf id) pairs bound during this forward, in bind order.
    pub fn bound_params(&self) -> &[(usize, TensorId)] {
        &self.bound
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Consumes the context, releasing the tape borrow and returning the
    /// bound parameters and pending running-statistic updates.
    pub fn finish(self) -> (Vec<(usize, TensorId)>, Vec<BnUpdate>) {
        (self.bound, self.bn_updates)
    }
}

/// Applies collected running-statistic updates with the standard momentum
/// rule; the running variance uses the unbiased batch estimate.
pub fn apply_bn_updates(store: &mut ParamStore, updates: Vec<BnUpdate>, momentum: f64) {
    for u in updates {
        let unbias = if u.count > 1 { u.count as f64 / (u.count as f64 - 1.0) } else { 1.0 };
        {
            let mean = store.get_mut(u.mean_idx).value.data_mut();
            for (r, b) in mean.iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        {
            let var = store.get_mut(u.var_idx).value.data_mut();
            for (r, b) in var.iter_mut().zip(&u.batch_var) {
                *r = (1.0 - momentum) * *r + momentum * b * unbias;
            }
        }
    }
}

// ── Layers ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ConvLayer {
    weight: usize,
    bias: Option<usize>,
    out_channels: usize,
    stride: usize,
    padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 {
            return Err(Error::Config(format!("{name}: channel counts must be positive")));
        }
        let weight = store.add(
            &format!("{name}.weight"),
            Tensor::zeros(vec![out_ch, in_ch, kernel, kernel]),
            ParamKind::ConvWeight,
            true,
        )?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(vec![out_ch]), ParamKind::Bias, true)?)
        } else {
            None
        };
        Ok(ConvLayer { weight, bias, out_channels: out_ch, stride, padding })
    }

    pub fn forward(&self, store: &ParamStore, ctx: &mut ForwardCtx, x: TensorId) -> Result<TensorId> {
        let w = ctx.param(store, self.weight);
        let b = match self.bias {
            Some(idx) => ctx.param(store, idx),
            None => ctx.tape.constant(Tensor::zeros(vec![self.out_channels])),
        };
        ctx.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(vec![channels], 1.0), ParamKind::BnGamma, true)?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(vec![channels]), ParamKind::BnBeta, true)?;
        let running_mean = store.add(
            &format!("{name}.running_mean"),
            Tensor::zeros(vec![channels]),
            ParamKind::BnRunningMean,
            false,
        )?;
        let running_var = store.add(
            &format!("{name}.running_var"),
            Tensor::full(vec![channels], 1.0),
            ParamKind::BnRunningVar,
            false,
        )?;
        Ok(BatchNormLayer { gamma, beta, running_mean, running_var, eps: BN_EPSILON, momentum: BN_MOMENTUM })
    }

    pub fn forward(&self, store: &ParamStore, ctx: &mut ForwardCtx, x: TensorId) -> Result<TensorId> {
        let gamma = ctx.param(store, self.gamma);
        let beta = ctx.param(store, self.beta);
        let rm = store.get(self.running_mean).value.data().to_vec();
        let rv = store.get(self.running_var).value.data().to_vec();
        let (y, stats) = ctx.tape.batchnorm2d(x, gamma, beta, &rm, &rv, ctx.training, self.eps)?;
        if let Some((batch_mean, batch_var)) = stats {
            let shape = ctx.tape.shape(x);
            let count = shape[0] * shape[2] * shape[3];
            ctx.record_bn_update(BnUpdate {
                mean_idx: self.running_mean,
                var_idx: self.running_var,
                batch_mean,
                batch_var,
                count,
            });
        }
        let _ = self.momentum;
        Ok(y)
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }
}

/// conv [+ BN] [+ activation] unit.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    conv: ConvLayer,
    bn: Option<BatchNormLayer>,
    act: Option<ActKind>,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        bn: bool,
        act: Option<ActKind>,
    ) -> Result<Self> {
        let padding = kernel / 2;
        let conv = ConvLayer::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, padding, bias)?;
        let bn = if bn { Some(BatchNormLayer::new(store, &format!("{name}.bn"), out_ch)?) } else { None };
        Ok(ConvUnit { conv, bn, act })
    }

    pub fn forward(&self, store: &ParamStore, ctx: &mut ForwardCtx, x: TensorId) -> Result<TensorId> {
        let mut y = self.conv.forward(store, ctx, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(store, ctx, y)?;
        }
        if let Some(act) = self.act {
            y = act.apply(ctx.tape, y)?;
        }
        Ok(y)
    }
}

// ── Table-style blocks ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// 2x(conv-BN-act) then 2x2 max pool; halves H and W.
    Downscale,
    /// 2x(conv-act), no BN; preserves spatial extents.
    Bottleneck,
    /// 2x bilinear upsample, optional skip concat, then 2x(conv-BN-act).
    Upscale,
    /// Single convolution, no BN or activation.
    PlainConv,
    /// conv-BN-act over a cost-volume channel layout.
    ConvVolume,
}

/// Declarative block description.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: ActKind,
    pub has_batchnorm: bool,
    /// Upscale only: channel count of the encoder tap concatenated after the
    /// upsample (0 for no skip).
    pub skip_channels: usize,
    pub kernel: usize,
    pub conv_bias: bool,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize, activation: ActKind) -> Self {
        BlockSpec {
            kind,
            in_channels,
            out_channels,
            activation,
            has_batchnorm: matches!(kind, BlockKind::Downscale | BlockKind::Upscale | BlockKind::ConvVolume),
            skip_channels: 0,
            kernel: 3,
            conv_bias: true,
        }
    }

    pub fn with_skip(mut self, skip_channels: usize) -> Self {
        self.skip_channels = skip_channels;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.conv_bias = bias;
        self
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }
}

/// A built network fragment.
#[derive(Debug, Clone)]
pub struct Block {
    kind: BlockKind,
    units: Vec<ConvUnit>,
}

/// Builds a block's layers, registering parameters under `name.*`.
pub fn build_block(store: &mut ParamStore, name: &str, spec: &BlockSpec) -> Result<Block> {
    if spec.in_channels == 0 || spec.out_channels == 0 {
        return Err(Error::Config(format!("{name}: channel counts must be positive")));
    }
    if spec.skip_channels > 0 && spec.kind != BlockKind::Upscale {
        return Err(Error::Config(format!("{name}: skip concat is only valid for upscale blocks")));
    }
    let act = Some(spec.activation);
    let units = match spec.kind {
        BlockKind::Downscale => vec![
            ConvUnit::new(store, &format!("{name}.unit1"), spec.in_channels, spec.out_channels, spec.kernel, 1, spec.conv_bias, spec.has_batchnorm, act)?,
            ConvUnit::new(store, &format!("{name}.unit2"), spec.out_channels, spec.out_channels, spec.kernel, 1, spec.conv_bias, spec.has_batchnorm, act)?,
        ],
        BlockKind::Bottleneck => vec![
            ConvUnit::new(store, &format!("{name}.unit1"), spec.in_channels, spec.out_channels, spec.kernel, 1, spec.conv_bias, false, act)?,
            ConvUnit::new(store, &format!("{name}.unit2"), spec.out_channels, spec.out_channels, spec.kernel, 1, spec.conv_bias, false, act)?,
        ],
        BlockKind::Upscale => vec![
            ConvUnit::new(
                store,
                &format!("{name}.unit1"),
                spec.in_channels + spec.skip_channels,
                spec.out_channels,
                spec.kernel, 1, spec.conv_bias, spec.has_batchnorm, act,
            )?,
            ConvUnit::new(store, &format!("{name}.unit2"), spec.out_channels, spec.out_channels, spec.kernel, 1, spec.conv_bias, spec.has_batchnorm, act)?,
        ],
        BlockKind::PlainConv => vec![ConvUnit::new(
            store,
            &format!("{name}.unit1"),
            spec.in_channels,
            spec.out_channels,
            spec.kernel, 1, spec.conv_bias, false, None,
        )?],
        BlockKind::ConvVolume => vec![ConvUnit::new(
            store,
            &format!("{name}.unit1"),
            spec.in_channels,
            spec.out_channels,
            spec.kernel, 1, spec.conv_bias, spec.has_batchnorm, act,
        )?],
    };
    Ok(Block { kind: spec.kind, units })
}

impl Block {
    /// Runs the block. `skip` is the encoder tap for upscale blocks with a
    /// configured skip concat.
    pub fn forward(
        &self,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        x: TensorId,
        skip: Option<TensorId>,
    ) -> Result<TensorId> {
        match self.kind {
            BlockKind::Downscale => {
                let mut y = x;
                for u in &self.units {
                    y = u.forward(store, ctx, y)?;
                }
                ctx.tape.maxpool2x2(y)
            }
            BlockKind::Upscale => {
                let mut y = ctx.tape.upsample_bilinear2x(x)?;
                if let Some(s) = skip {
                    y = ctx.tape.concat(&[y, s], 1)?;
                }
                for u in &self.units {
                    y = u.forward(store, ctx, y)?;
                }
                Ok(y)
            }
            BlockKind::Bottleneck | BlockKind::PlainConv | BlockKind::ConvVolume => {
                let mut y = x;
                for u in &self.units {
                    y = u.forward(store, ctx, y)?;
                }
                Ok(y)
            }
        }
    }

    /// Pre-pool output of a downscale block, used as a skip tap.
    pub fn forward_with_tap(
        &self,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        x: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        debug_assert_eq!(self.kind, BlockKind::Downscale);
        let mut y = x;
        for u in &self.units {
            y = u.forward(store, ctx, y)?;
        }
        let pooled = ctx.tape.maxpool2x2(y)?;
        Ok((pooled, y))
    }
}
