//! Four-stage anytime stereo network.
//!
//! Stage 1 regresses coarse disparity from a full cost volume at 1/16 scale;
//! stages 2 and 3 warp right features by the upsampled estimate and regress
//! residual corrections at 1/8 and 1/4; stage 4 optionally refines with a
//! spatial propagation network. Every stage output is upsampled to full
//! resolution with disparities rescaled accordingly, so truncating the model
//! at any stage yields a usable map.

use crate::blocks::{
    apply_bn_updates, ActKind, ConvLayer, ConvUnit, ForwardCtx, ParamStore, BN_MOMENTUM,
};
use crate::data::{resize_bilinear_plane, Image, Plane, StereoSample};
use crate::error::{Error, Result};
use crate::tensor::{ScanDirection, Tape, Tensor, TensorId};

/// Reference trainable parameter counts for the SPN sweep, from the original
/// implementation's reported model sizes.
pub const ANYNET_REFERENCE_PARAMS: [(Option<usize>, u64); 5] = [
    (None, 34_629),
    (Some(1), 34_827),
    (Some(2), 35_277),
    (Some(4), 36_933),
    (Some(8), 43_269),
];

pub const SPN_CHANNEL_SWEEP: [usize; 4] = [1, 2, 4, 8];

const SCALES: [usize; 3] = [16, 8, 4];

#[derive(Debug, Clone)]
pub struct AnyNetConfig {
    /// Full-resolution disparity search range in pixels; divisible by 16.
    pub max_disparity: usize,
    /// Residual offset range k at stages 2-3, giving 2k+1 candidates.
    pub residual_range: usize,
    /// Spatial propagation hidden width; None disables stage 4 refinement.
    pub spn_channels: Option<usize>,
    pub stage_loss_weights: [f64; 4],
    pub unet_base_channels: usize,
    /// Disparity-network width per stage.
    pub disparity_net_channels: [usize; 3],
}

impl Default for AnyNetConfig {
    fn default() -> Self {
        AnyNetConfig {
            max_disparity: 192,
            residual_range: 2,
            spn_channels: None,
            stage_loss_weights: [0.25, 0.5, 1.0, 1.0],
            unet_base_channels: 4,
            disparity_net_channels: [4, 6, 6],
        }
    }
}

impl AnyNetConfig {
    pub fn with_spn(mut self, channels: Option<usize>) -> Self {
        self.spn_channels = channels;
        self
    }

    pub fn with_max_disparity(mut self, d: usize) -> Self {
        self.max_disparity = d;
        self
    }

    /// Candidate count of the stage-1 cost volume.
    pub fn stage1_candidates(&self) -> usize {
        self.max_disparity / 16 + 1
    }

    fn validate(&self) -> Result<()> {
        if self.max_disparity == 0 || self.max_disparity % 16 != 0 {
            return Err(Error::Config(format!(
                "max_disparity {} must be a positive multiple of 16",
                self.max_disparity
            )));
        }
        if self.residual_range == 0 {
            return Err(Error::Config("residual_range must be positive".to_string()));
        }
        if let Some(c) = self.spn_channels {
            if !SPN_CHANNEL_SWEEP.contains(&c) {
                return Err(Error::Config(format!(
                    "spn_channels {c} not in sweep set {SPN_CHANNEL_SWEEP:?}"
                )));
            }
        }
        if self.unet_base_channels == 0 || self.disparity_net_channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".to_string()));
        }
        Ok(())
    }
}

const UNET_ACT: ActKind = ActKind::LeakyRelu(0.2);

struct UNet {
    stem: [ConvUnit; 2],
    enc: Vec<[ConvUnit; 2]>,
    dec8: [ConvUnit; 2],
    dec4: [ConvUnit; 2],
}

impl UNet {
    fn build(store: &mut ParamStore, base: usize) -> Result<Self> {
        let b = base;
        let unit = |store: &mut ParamStore, name: &str, i: usize, o: usize, stride: usize| {
            ConvUnit::new(store, name, i, o, 3, stride, false, true, Some(UNET_ACT))
        };
        let stem = [
            unit(store, "unet.stem1", 3, b, 1)?,
            unit(store, "unet.stem2", b, b, 2)?,
        ];
        let mut enc = Vec::new();
        let mut ch = b;
        for level in 0..3 {
            let out = ch * 2;
            enc.push([
                unit(store, &format!("unet.enc{}a", level + 1), ch, out, 2)?,
                unit(store, &format!("unet.enc{}b", level + 1), out, out, 1)?,
            ]);
            ch = out;
        }
        // ch = 8b at 1/16; decoder taps concat encoder outputs at 1/8 and 1/4.
        let dec8 = [
            unit(store, "unet.dec8a", 8 * b + 4 * b, 4 * b, 1)?,
            unit(store, "unet.dec8b", 4 * b, 4 * b, 1)?,
        ];
        let dec4 = [
            unit(store, "unet.dec4a", 4 * b + 2 * b, 2 * b, 1)?,
            unit(store, "unet.dec4b", 2 * b, 2 * b, 1)?,
        ];
        Ok(UNet { stem, enc, dec8, dec4 })
    }

    /// Features at 1/16, 1/8 and 1/4 scale.
    fn forward(
        &self,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        x: TensorId,
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let mut y = x;
        for u in &self.stem {
            y = u.forward(store, ctx, y)?;
        }
        let mut taps = Vec::new();
        for pair in &self.enc {
            for u in pair {
                y = u.forward(store, ctx, y)?;
            }
            taps.push(y);
        }
        let (e4, e8, e16) = (taps[0], taps[1], taps[2]);
        let up8 = ctx.tape.upsample_bilinear2x(e16)?;
        let mut f8 = ctx.tape.concat(&[up8, e8], 1)?;
        for u in &self.dec8 {
            f8 = u.forward(store, ctx, f8)?;
        }
        let up4 = ctx.tape.upsample_bilinear2x(f8)?;
        let mut f4 = ctx.tape.concat(&[up4, e4], 1)?;
        for u in &self.dec4 {
            f4 = u.forward(store, ctx, f4)?;
        }
        Ok((e16, f8, f4))
    }
}

/// Disparity network: 1x1 input projection, five 3x3 convolutions, and a
/// bias-free 1x1 projection back to candidate costs.
struct DispNet {
    proj_in: ConvUnit,
    mids: Vec<ConvUnit>,
    proj_out: ConvLayer,
}

impl DispNet {
    fn build(store: &mut ParamStore, name: &str, d_count: usize, width: usize) -> Result<Self> {
        let proj_in = ConvUnit::new(store, &format!("{name}.proj_in"), d_count, width, 1, 1, false, true, Some(UNET_ACT))?;
        let mids = (0..5)
            .map(|i| {
                ConvUnit::new(store, &format!("{name}.mid{}", i + 1), width, width, 3, 1, false, true, Some(UNET_ACT))
            })
            .collect::<Result<Vec<_>>>()?;
        let proj_out = ConvLayer::new(store, &format!("{name}.proj_out"), width, d_count, 1, 1, 0, false)?;
        Ok(DispNet { proj_in, mids, proj_out })
    }

    fn forward(&self, store: &ParamStore, ctx: &mut ForwardCtx, volume: TensorId) -> Result<TensorId> {
        let mut y = self.proj_in.forward(store, ctx, volume)?;
        for u in &self.mids {
            y = u.forward(store, ctx, y)?;
        }
        self.proj_out.forward(store, ctx, y)
    }
}

/// Spatial propagation refinement: a guidance CNN predicts three non-negative
/// neighbour weights per hidden lane, the embedded disparity is scanned in
/// four directions, and the averaged change is projected back onto the map.
/// With all affinities zero the output equals the input disparity.
pub struct SpnRefiner {
    channels: usize,
    guidance: [ConvLayer; 4],
    embed: ConvLayer,
    project: ConvLayer,
}

impl SpnRefiner {
    pub fn build(store: &mut ParamStore, channels: usize) -> Result<Self> {
        let c = channels;
        let conv = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            ConvLayer::new(store, name, i, o, 3, 1, 1, false)
        };
        let guidance = [
            conv(store, "spn.guide1", 3, 2 * c)?,
            conv(store, "spn.guide2", 2 * c, 2 * c)?,
            conv(store, "spn.guide3", 2 * c, 2 * c)?,
            conv(store, "spn.guide4", 2 * c, 3 * c)?,
        ];
        let embed = conv(store, "spn.embed", 1, c)?;
        let project = conv(store, "spn.project", c, 1)?;
        Ok(SpnRefiner { channels, guidance, embed, project })
    }

    pub fn refine(
        &self,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        disparity: TensorId,
        guidance_rgb: TensorId,
    ) -> Result<TensorId> {
        let c = self.channels;
        let mut g = guidance_rgb;
        for (i, conv) in self.guidance.iter().enumerate() {
            g = conv.forward(store, ctx, g)?;
            if i + 1 < self.guidance.len() {
                g = ctx.tape.leaky_relu(g, 0.2)?;
            }
        }
        // Normalize |affinities| so the three weights sum to at most 1.
        let mut weights = Vec::with_capacity(3);
        let mut mags = Vec::with_capacity(3);
        for i in 0..3 {
            let part = ctx.tape.narrow(g, 1, i * c, c)?;
            mags.push(ctx.tape.abs(part)?);
        }
        let s01 = ctx.tape.add(mags[0], mags[1])?;
        let total = ctx.tape.add(s01, mags[2])?;
        let denom = ctx.tape.clamp_min(total, 1.0)?;
        for &m in &mags {
            weights.push(ctx.tape.div(m, denom)?);
        }
        let w = [weights[0], weights[1], weights[2]];

        let embedded = self.embed.forward(store, ctx, disparity)?;
        let mut scans = Vec::with_capacity(4);
        for dir in ScanDirection::ALL {
            scans.push(ctx.tape.spn_scan(embedded, w, dir)?);
        }
        let s01 = ctx.tape.add(scans[0], scans[1])?;
        let s23 = ctx.tape.add(scans[2], scans[3])?;
        let sum = ctx.tape.add(s01, s23)?;
        let avg = ctx.tape.scale(sum, 0.25)?;
        let delta = ctx.tape.sub(avg, embedded)?;
        let correction = self.project.forward(store, ctx, delta)?;
        ctx.tape.add(disparity, correction)
    }
}

/// The anytime stereo model.
pub struct AnyNet {
    pub config: AnyNetConfig,
    store: ParamStore,
    unet: UNet,
    disp_nets: Vec<DispNet>,
    spn: Option<SpnRefiner>,
}

pub fn build_anynet(config: AnyNetConfig) -> Result<AnyNet> {
    config.validate()?;
    let mut store = ParamStore::new();
    let unet = UNet::build(&mut store, config.unet_base_channels)?;
    let residual_candidates = 2 * config.residual_range + 1;
    let d_counts = [config.stage1_candidates(), residual_candidates, residual_candidates];
    let disp_nets = (0..3)
        .map(|i| {
            DispNet::build(
                &mut store,
                &format!("disp{}", i + 1),
                d_counts[i],
                config.disparity_net_channels[i],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let spn = match config.spn_channels {
        Some(c) => Some(SpnRefiner::build(&mut store, c)?),
        None => None,
    };
    Ok(AnyNet { config, store, unet, disp_nets, spn })
}

impl AnyNet {
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn init(&mut self, seed: u64) {
        self.store.init(seed);
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<crate::blocks::BnUpdate>) {
        apply_bn_updates(&mut self.store, updates, BN_MOMENTUM);
    }

    /// Runs stages 1..=up_to_stage and returns one full-resolution disparity
    /// map per computed stage. Without SPN refinement, stage 4 passes the
    /// stage-3 output through unchanged.
    pub fn forward(
        &self,
        ctx: &mut ForwardCtx,
        left: TensorId,
        right: TensorId,
        up_to_stage: usize,
    ) -> Result<Vec<TensorId>> {
        if !(1..=4).contains(&up_to_stage) {
            return Err(Error::arg(format!("up_to_stage {up_to_stage} out of 1..=4")));
        }
        let (n, c, h, w) = ctx.tape.value(left).dims4()?;
        if ctx.tape.shape(left) != ctx.tape.shape(right) {
            return Err(Error::shape("stereo views must share extents".to_string()));
        }
        if c != 3 {
            return Err(Error::shape(format!("expected 3-channel views, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(format!("view extents {h}x{w} must be divisible by 16")));
        }

        // Both views share the feature extractor; run them as one batch.
        let stacked = ctx.tape.concat(&[left, right], 0)?;
        let (f16, f8, f4) = self.unet.forward(&self.store, ctx, stacked)?;
        let split = |ctx: &mut ForwardCtx, t: TensorId| -> Result<(TensorId, TensorId)> {
            let l = ctx.tape.narrow(t, 0, 0, n)?;
            let r = ctx.tape.narrow(t, 0, n, n)?;
            Ok((l, r))
        };
        let (fl16, fr16) = split(ctx, f16)?;
        let (fl8, fr8) = split(ctx, f8)?;
        let (fl4, fr4) = split(ctx, f4)?;

        let mut outputs = Vec::new();

        // Stage 1: full cost volume at 1/16, no warping.
        let d1 = self.config.stage1_candidates();
        let volume = ctx.tape.cost_volume_full(fl16, fr16, d1)?;
        let costs = self.disp_nets[0].forward(&self.store, ctx, volume)?;
        let mut disp = soft_argmin(ctx.tape, costs, 0.0, 1.0)?;
        outputs.push(upsample_disparity(ctx.tape, disp, SCALES[0])?);

        // Stages 2-3: residual refinement at 1/8 and 1/4.
        let finer = [(fl8, fr8), (fl4, fr4)];
        for stage in 2..=3 {
            if up_to_stage < stage {
                return Ok(outputs);
            }
            let (fl, fr) = finer[stage - 2];
            let up = ctx.tape.upsample_bilinear2x(disp)?;
            let base = ctx.tape.scale(up, 2.0)?;
            let warped = ctx.tape.warp_with_disparity(fr, base)?;
            let volume = ctx.tape.cost_volume_residual(fl, warped, self.config.residual_range)?;
            let costs = self.disp_nets[stage - 1].forward(&self.store, ctx, volume)?;
            let residual = soft_argmin(ctx.tape, costs, -(self.config.residual_range as f64), 1.0)?;
            disp = ctx.tape.add(base, residual)?;
            outputs.push(upsample_disparity(ctx.tape, disp, SCALES[stage - 1])?);
        }

        // Stage 4: spatial propagation refinement at 1/4 scale.
        if up_to_stage == 4 {
            match &self.spn {
                Some(spn) => {
                    let guidance = quarter_scale_guidance(ctx.tape, left)?;
                    let refined = spn.refine(&self.store, ctx, disp, guidance)?;
                    outputs.push(upsample_disparity(ctx.tape, refined, 4)?);
                }
                None => {
                    let last = *outputs.last().expect("stage 3 computed");
                    outputs.push(last);
                }
            }
        }
        Ok(outputs)
    }

    /// Eval-mode prediction for one sample; returns one full-resolution map
    /// per computed stage.
    pub fn predict(&self, left: &Image, right: &Image, up_to_stage: usize) -> Result<Vec<Plane>> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, false);
        let l = ctx.tape.constant(left.to_tensor());
        let r = ctx.tape.constant(right.to_tensor());
        let outs = self.forward(&mut ctx, l, r, up_to_stage)?;
        outs.iter()
            .map(|&id| {
                let v = tape.value(id);
                let (_, _, h, w) = v.dims4()?;
                Ok(Plane { height: h, width: w, data: v.data().to_vec() })
            })
            .collect()
    }

    /// Total conv MACs of an eval forward at the given input size.
    pub fn count_macs(&self, h: usize, w: usize, up_to_stage: usize) -> Result<u64> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, false);
        let l = ctx.tape.constant(Tensor::zeros(vec![1, 3, h, w]));
        let r = ctx.tape.constant(Tensor::zeros(vec![1, 3, h, w]));
        self.forward(&mut ctx, l, r, up_to_stage)?;
        Ok(tape.total_macs())
    }
}

/// Soft-argmin regression: sum_d (offset0 + step*d) * softmax_d(-cost).
pub fn soft_argmin(tape: &mut Tape, cost: TensorId, offset0: f64, step: f64) -> Result<TensorId> {
    let (n, d, h, w) = tape.value(cost).dims4()?;
    let neg = tape.neg(cost)?;
    let attn = tape.softmax(neg, 1)?;
    let mut idx = vec![0.0; n * d * h * w];
    for ni in 0..n {
        for di in 0..d {
            let v = offset0 + step * di as f64;
            let base = ((ni * d) + di) * h * w;
            idx[base..base + h * w].fill(v);
        }
    }
    let candidates = tape.constant(Tensor::new(vec![n, d, h, w], idx)?);
    let weighted = tape.mul(attn, candidates)?;
    tape.sum_axis(weighted, 1)
}

/// Doubles resolution `log2(factor)` times, rescaling disparity values by 2
/// at each step so they stay in pixels of the current resolution.
fn upsample_disparity(tape: &mut Tape, disp: TensorId, factor: usize) -> Result<TensorId> {
    debug_assert!(factor.is_power_of_two());
    let mut d = disp;
    let mut f = factor;
    while f > 1 {
        d = tape.upsample_bilinear2x(d)?;
        d = tape.scale(d, 2.0)?;
        f /= 2;
    }
    Ok(d)
}

/// Left view resized to 1/4 scale as constant guidance input.
fn quarter_scale_guidance(tape: &mut Tape, left: TensorId) -> Result<TensorId> {
    let v = tape.value(left).clone();
    let (n, c, h, w) = v.dims4()?;
    let (oh, ow) = (h / 4, w / 4);
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let plane = Plane {
                height: h,
                width: w,
                data: v.data()[((ni * c) + ci) * h * w..((ni * c) + ci + 1) * h * w].to_vec(),
            };
            let small = resize_bilinear_plane(&plane, oh, ow)?;
            out[((ni * c) + ci) * oh * ow..((ni * c) + ci + 1) * oh * ow].copy_from_slice(&small.data);
        }
    }
    Ok(tape.constant(Tensor::new(vec![n, c, oh, ow], out)?))
}

// ── Losses and metrics ──────────────────────────────────────────────────

/// Smooth L1 (Huber): masked mean of d^2/(2b) below the knee |d| = b, and
/// |d| - b/2 above it; continuous and once-differentiable at the knee.
pub fn smooth_l1_loss(
    tape: &mut Tape,
    pred: TensorId,
    target: TensorId,
    mask: &Tensor,
    beta: f64,
) -> Result<TensorId> {
    if beta <= 0.0 {
        return Err(Error::arg(format!("smooth_l1: beta {beta} must be positive")));
    }
    let diff = tape.sub(target, pred)?;
    let a = tape.abs(diff)?;
    // min(a, beta) = beta - relu(beta - a); then huber = (min*a - min^2/2)/beta.
    let nb = tape.affine(a, -1.0, beta)?;
    let r = tape.relu(nb)?;
    let clipped = tape.affine(r, -1.0, beta)?;
    let ca = tape.mul(clipped, a)?;
    let cc = tape.mul(clipped, clipped)?;
    let half_cc = tape.scale(cc, 0.5)?;
    let num = tape.sub(ca, half_cc)?;
    let h = tape.scale(num, 1.0 / beta)?;
    tape.masked_mean(h, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreePixelVariant {
    /// Error when |pred - gt| > 3.
    Absolute,
    /// Error when |pred - gt| > 3 and |pred - gt| > 0.05 * gt.
    Kitti,
}

/// Fraction of valid pixels counted as erroneous; in [0, 1].
pub fn three_pixel_error(
    pred: &Plane,
    target: &Plane,
    mask: &Plane,
    variant: ThreePixelVariant,
) -> Result<f64> {
    if (pred.height, pred.width) != (target.height, target.width)
        || (pred.height, pred.width) != (mask.height, mask.width)
    {
        return Err(Error::shape("three_pixel_error: extents differ".to_string()));
    }
    let mut valid = 0u64;
    let mut bad = 0u64;
    for i in 0..pred.data.len() {
        if mask.data[i] == 0.0 {
            continue;
        }
        valid += 1;
        let err = (pred.data[i] - target.data[i]).abs();
        let is_bad = match variant {
            ThreePixelVariant::Absolute => err > 3.0,
            ThreePixelVariant::Kitti => err > 3.0 && err > 0.05 * target.data[i],
        };
        if is_bad {
            bad += 1;
        }
    }
    if valid == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(bad as f64 / valid as f64)
}

/// Weighted sum of per-stage smooth-L1 losses; one weight per computed stage.
pub fn stereo_total_loss(
    tape: &mut Tape,
    stage_preds: &[TensorId],
    target: TensorId,
    mask: &Tensor,
    weights: &[f64],
    beta: f64,
) -> Result<TensorId> {
    if stage_preds.is_empty() || stage_preds.len() > weights.len() {
        return Err(Error::arg(format!(
            "stereo_total_loss: {} stage outputs but {} weights",
            stage_preds.len(),
            weights.len()
        )));
    }
    let mut acc: Option<TensorId> = None;
    for (&pred, &w) in stage_preds.iter().zip(weights) {
        let l = smooth_l1_loss(tape, pred, target, mask, beta)?;
        let scaled = tape.scale(l, w)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    Ok(acc.expect("non-empty stages"))
}

/// Tensors for one batch of stereo samples: left, right, disparity, mask.
pub fn stereo_batch(samples: &[&StereoSample]) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let left = crate::data::batch_images(&samples.iter().map(|s| &s.left).collect::<Vec<_>>())?;
    let right = crate::data::batch_images(&samples.iter().map(|s| &s.right).collect::<Vec<_>>())?;
    let disp = crate::data::batch_planes(&samples.iter().map(|s| &s.disparity).collect::<Vec<_>>())?;
    let mask = crate::data::batch_planes(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
    Ok((left, right, disp, mask))
}
