//! Monocular depth autoencoder: configurable 4-1-4 / 3-1-3 encoder-bottleneck-
//! decoder with skip connections, plus its three loss terms.

use crate::blocks::{
    apply_bn_updates, build_block, ActKind, Block, BlockKind, BlockSpec, ConvLayer, ForwardCtx,
    ParamStore, BN_MOMENTUM,
};
use crate::data::{Image, MonoSample, Plane};
use crate::error::{Error, Result};
use crate::ssim::ssim_loss;
use crate::tensor::{Tape, Tensor, TensorId};

/// Reference total parameter counts (trainable + batch-norm statistics) for
/// the reconstructed architectures, from the original implementation's
/// reported model sizes.
pub const MONO_414_REFERENCE_PARAMS: u64 = 1_966_467;
pub const MONO_313_REFERENCE_PARAMS: u64 = 489_091;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonoStructure {
    FourOneFour,
    ThreeOneThree,
}

impl MonoStructure {
    pub fn as_str(self) -> &'static str {
        match self {
            MonoStructure::FourOneFour => "4-1-4",
            MonoStructure::ThreeOneThree => "3-1-3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "4-1-4" => Ok(MonoStructure::FourOneFour),
            "3-1-3" => Ok(MonoStructure::ThreeOneThree),
            other => Err(Error::Config(format!("unknown mono structure {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonoConfig {
    pub structure: MonoStructure,
    /// Strictly increasing encoder filter ladder; the decoder mirrors it.
    pub filter_ladder: Vec<usize>,
    pub bottleneck_channels: usize,
    pub activation: ActKind,
    pub use_skip_connections: bool,
    /// Input images are square input_size x input_size.
    pub input_size: usize,
}

impl MonoConfig {
    pub fn new(structure: MonoStructure) -> Self {
        let (ladder, bottleneck) = match structure {
            MonoStructure::FourOneFour => (vec![16, 32, 64, 128], 256),
            MonoStructure::ThreeOneThree => (vec![16, 32, 64], 128),
        };
        MonoConfig {
            structure,
            filter_ladder: ladder,
            bottleneck_channels: bottleneck,
            activation: ActKind::LeakyRelu(0.2),
            use_skip_connections: true,
            input_size: 256,
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_activation(mut self, act: ActKind) -> Self {
        self.activation = act;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.filter_ladder.is_empty() {
            return Err(Error::Config("filter ladder must not be empty".to_string()));
        }
        if !self.filter_ladder.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("filter ladder must be strictly increasing".to_string()));
        }
        if *self.filter_ladder.last().expect("non-empty") >= self.bottleneck_channels {
            return Err(Error::Config("bottleneck must widen past the ladder".to_string()));
        }
        let down = 1usize << self.filter_ladder.len();
        if self.input_size == 0 || self.input_size % down != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^{} = {down}",
                self.input_size,
                self.filter_ladder.len()
            )));
        }
        Ok(())
    }
}

/// Non-negative weights for the three mono loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_ssim: f64,
    pub w_l1: f64,
    pub w_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_ssim: 0.85, w_l1: 0.1, w_smooth: 0.9 }
    }
}

impl LossWeights {
    pub fn validate_for_training(&self) -> Result<()> {
        if self.w_ssim < 0.0 || self.w_l1 < 0.0 || self.w_smooth < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".to_string()));
        }
        if self.w_ssim == 0.0 && self.w_l1 == 0.0 && self.w_smooth == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".to_string()));
        }
        Ok(())
    }
}

/// The autoencoder: downscale blocks, a bottleneck, mirrored upscale blocks,
/// and a sigmoid head that keeps predictions in [0, 1].
pub struct MonoModel {
    pub config: MonoConfig,
    store: ParamStore,
    down: Vec<Block>,
    bottleneck: Block,
    up: Vec<Block>,
    head: ConvLayer,
    /// 1x1 single-channel logit calibration ahead of the sigmoid.
    calibration: ConvLayer,
}

pub fn build_mono_model(config: MonoConfig) -> Result<MonoModel> {
    config.validate()?;
    let mut store = ParamStore::new();
    let act = config.activation;
    let mut down = Vec::new();
    let mut in_ch = 3;
    for (i, &out_ch) in config.filter_ladder.iter().enumerate() {
        let spec = BlockSpec::new(BlockKind::Downscale, in_ch, out_ch, act);
        down.push(build_block(&mut store, &format!("down{}", i + 1), &spec)?);
        in_ch = out_ch;
    }
    let bottleneck = build_block(
        &mut store,
        "bottleneck",
        &BlockSpec::new(BlockKind::Bottleneck, in_ch, config.bottleneck_channels, act),
    )?;
    let mut up = Vec::new();
    let mut dec_in = config.bottleneck_channels;
    for (i, &out_ch) in config.filter_ladder.iter().enumerate().rev() {
        let skip = if config.use_skip_connections { out_ch } else { 0 };
        let spec = BlockSpec::new(BlockKind::Upscale, dec_in, out_ch, act).with_skip(skip);
        up.push(build_block(&mut store, &format!("up{}", i + 1), &spec)?);
        dec_in = out_ch;
    }
    let head = ConvLayer::new(&mut store, "head", dec_in, 1, 1, 1, 0, true)?;
    let calibration = ConvLayer::new(&mut store, "calibration", 1, 1, 1, 1, 0, true)?;
    Ok(MonoModel { config, store, down, bottleneck, up, head, calibration })
}

impl MonoModel {
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Seeded initialization. The output head starts at zero and the
    /// calibration at identity, so an untrained model predicts the sigmoid
    /// midpoint everywhere.
    pub fn init(&mut self, seed: u64) {
        self.store.init(seed);
        for name in ["head.weight", "calibration.weight"] {
            let idx = self.store.lookup(name).expect("head params exist");
            let fill = if name == "calibration.weight" { 1.0 } else { 0.0 };
            self.store.get_mut(idx).value.data_mut().fill(fill);
        }
    }

    /// Forward pass: NCHW rgb in [0, 1] to Nx1xHxW depth in [0, 1].
    pub fn forward(&self, ctx: &mut ForwardCtx, image: TensorId) -> Result<TensorId> {
        let (_, c, h, w) = ctx.tape.value(image).dims4()?;
        if c != 3 || h != self.config.input_size || w != self.config.input_size {
            return Err(Error::shape(format!(
                "mono forward: expected 3x{0}x{0} input, got {c}x{h}x{w}",
                self.config.input_size
            )));
        }
        let mut x = image;
        let mut taps = Vec::new();
        for block in &self.down {
            let (pooled, tap) = block.forward_with_tap(&self.store, ctx, x)?;
            taps.push(tap);
            x = pooled;
        }
        x = self.bottleneck.forward(&self.store, ctx, x, None)?;
        for (block, tap) in self.up.iter().zip(taps.iter().rev()) {
            let skip = self.config.use_skip_connections.then_some(*tap);
            x = block.forward(&self.store, ctx, x, skip)?;
        }
        let logits = self.head.forward(&self.store, ctx, x)?;
        let calibrated = self.calibration.forward(&self.store, ctx, logits)?;
        ctx.tape.sigmoid(calibrated)
    }

    /// Eval-mode prediction for a single image; deterministic.
    pub fn predict_depth(&self, image: &Image) -> Result<Plane> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, false);
        let input = ctx.tape.constant(image.to_tensor());
        let out = self.forward(&mut ctx, input)?;
        let v = tape.value(out);
        let (_, _, h, w) = v.dims4()?;
        Ok(Plane { height: h, width: w, data: v.data().to_vec() })
    }

    /// Applies any batch-norm running-statistic updates collected during a
    /// training forward.
    pub fn apply_bn_updates(&mut self, ctx_updates: Vec<crate::blocks::BnUpdate>) {
        apply_bn_updates(&mut self.store, ctx_updates, BN_MOMENTUM);
    }
}

// ── Losses ──────────────────────────────────────────────────────────────

/// Masked mean absolute depth error.
pub fn l1_depth_loss(tape: &mut Tape, pred: TensorId, target: TensorId, mask: &Tensor) -> Result<TensorId> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(format!(
            "l1_depth_loss: {:?} vs {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let diff = tape.sub(target, pred)?;
    let abs = tape.abs(diff)?;
    tape.masked_mean(abs, mask)
}

/// Edge-aware smoothness: mean |dx depth| * exp(-|dx image|) plus the same
/// along y, with forward differences and channel-mean image gradients. The
/// image is data, not differentiated.
pub fn depth_smoothness_loss(tape: &mut Tape, depth: TensorId, image: &Tensor) -> Result<TensorId> {
    let (n, _, h, w) = tape.value(depth).dims4()?;
    let (in_, ic, ih, iw) = image.dims4()?;
    if (in_, ih, iw) != (n, h, w) {
        return Err(Error::shape(format!(
            "depth_smoothness_loss: depth {:?} vs image {:?}",
            tape.shape(depth),
            image.shape()
        )));
    }
    // exp(-|grad I|) weights, channel-mean, computed off-tape.
    let img = image.data();
    let at = |nn: usize, c: usize, y: usize, x: usize| img[((nn * ic + c) * ih + y) * iw + x];
    let mut wx = vec![0.0; n * h * (w - 1)];
    let mut wy = vec![0.0; n * (h - 1) * w];
    for nn in 0..n {
        for y in 0..h {
            for x in 0..w - 1 {
                let mut g = 0.0;
                for c in 0..ic {
                    g += (at(nn, c, y, x + 1) - at(nn, c, y, x)).abs();
                }
                wx[(nn * h + y) * (w - 1) + x] = (-(g / ic as f64)).exp();
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                let mut g = 0.0;
                for c in 0..ic {
                    g += (at(nn, c, y + 1, x) - at(nn, c, y, x)).abs();
                }
                wy[(nn * (h - 1) + y) * w + x] = (-(g / ic as f64)).exp();
            }
        }
    }
    let wx = tape.constant(Tensor::new(vec![n, 1, h, w - 1], wx)?);
    let wy = tape.constant(Tensor::new(vec![n, 1, h - 1, w], wy)?);

    let left = tape.narrow(depth, 3, 0, w - 1)?;
    let right = tape.narrow(depth, 3, 1, w - 1)?;
    let dx = tape.sub(right, left)?;
    let adx = tape.abs(dx)?;
    let term_x = tape.mul(adx, wx)?;
    let mean_x = tape.mean(term_x)?;

    let top = tape.narrow(depth, 2, 0, h - 1)?;
    let bottom = tape.narrow(depth, 2, 1, h - 1)?;
    let dy = tape.sub(bottom, top)?;
    let ady = tape.abs(dy)?;
    let term_y = tape.mul(ady, wy)?;
    let mean_y = tape.mean(term_y)?;

    tape.add(mean_x, mean_y)
}

/// w_ssim * (1 - ssim)/2 + w_l1 * l1 + w_smooth * smoothness.
pub fn mono_total_loss(
    tape: &mut Tape,
    pred: TensorId,
    target: TensorId,
    mask: &Tensor,
    image: &Tensor,
    weights: &LossWeights,
) -> Result<TensorId> {
    let mut terms: Vec<TensorId> = Vec::new();
    if weights.w_ssim != 0.0 {
        let s = ssim_loss(tape, pred, target, 1.0)?;
        terms.push(tape.scale(s, weights.w_ssim)?);
    }
    if weights.w_l1 != 0.0 {
        let l1 = l1_depth_loss(tape, pred, target, mask)?;
        terms.push(tape.scale(l1, weights.w_l1)?);
    }
    if weights.w_smooth != 0.0 {
        let sm = depth_smoothness_loss(tape, pred, image)?;
        terms.push(tape.scale(sm, weights.w_smooth)?);
    }
    match terms.split_first() {
        None => Ok(tape.constant(Tensor::scalar(0.0))),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            Ok(acc)
        }
    }
}

/// Tensors for one batch of mono samples.
pub fn mono_batch(samples: &[&MonoSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let rgb = crate::data::batch_images(&samples.iter().map(|s| &s.rgb).collect::<Vec<_>>())?;
    let depth = crate::data::batch_planes(&samples.iter().map(|s| &s.depth).collect::<Vec<_>>())?;
    let mask = crate::data::batch_planes(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
    Ok((rgb, depth, mask))
}
