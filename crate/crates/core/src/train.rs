//! Optimizers, deterministic training loops, and evaluation.
//!
//! Batch order is a pure function of (seed, step): each epoch's permutation
//! derives from a mixed per-epoch seed, so training can resume from a bare
//! step counter with bitwise-identical results.

use std::time::Instant;

use crate::blocks::ParamStore;
use crate::data::{MonoSample, Plane, StereoSample};
use crate::error::{Error, Result};
use crate::mono::{mono_batch, mono_total_loss, LossWeights, MonoModel};
use crate::report::{MetricSeries, MetricsReport};
use crate::rng::DetRng;
use crate::ssim::ssim_value;
use crate::stereo::{stereo_batch, stereo_total_loss, three_pixel_error, AnyNet, ThreePixelVariant};
use crate::blocks::ForwardCtx;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            max_steps: 500,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be non-negative".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".to_string()));
        }
        Ok(())
    }
}

/// SGD or bias-corrected Adam over a parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    /// Global step count t for bias correction.
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        let (m, v) = match cfg.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => {
                let moments: Vec<Vec<f64>> = store
                    .iter()
                    .map(|p| if p.trainable { vec![0.0; p.value.numel()] } else { Vec::new() })
                    .collect();
                (moments.clone(), moments)
            }
        };
        Optimizer {
            kind: cfg.kind,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            t: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over `(store index, gradient)` pairs.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(usize, Vec<f64>)]) -> Result<()> {
        self.t += 1;
        for (idx, grad) in grads {
            let param = store.get_mut(*idx);
            if param.value.numel() != grad.len() {
                return Err(Error::shape(format!(
                    "gradient length {} does not match parameter {} ({} elements)",
                    grad.len(),
                    param.name,
                    param.value.numel()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in param.value.data_mut().iter_mut().zip(grad) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.m[*idx];
                    let v = &mut self.v[*idx];
                    let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                    for ((w, g), (mi, vi)) in param
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(grad)
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }

    /// Flat little-endian f64 serialization of the moment vectors.
    pub fn moments_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for buf in self.m.iter().chain(self.v.iter()) {
            out.extend_from_slice(buf);
        }
        out
    }

    pub fn restore_moments(&mut self, flat: &[f64], t: u64) -> Result<()> {
        let expected: usize = self.m.iter().chain(self.v.iter()).map(Vec::len).sum();
        if flat.len() != expected {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} values, expected {expected}",
                flat.len()
            )));
        }
        let mut off = 0;
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            let len = buf.len();
            buf.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        self.t = t;
        Ok(())
    }
}

// ── Schedules and history ───────────────────────────────────────────────

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Sample indices of one training step under the stateless schedule. The
/// shuffle decides batch composition; within a batch, indices are sorted so
/// batch assembly (and so floating-point summation order) is canonical.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch_size: usize) -> Vec<usize> {
    let bpe = n.div_ceil(batch_size);
    let epoch = step / bpe;
    let slot = step % bpe;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = DetRng::seed_from_u64(mix64(seed ^ (epoch as u64 + 1)));
    rng.shuffle(&mut order);
    let start = slot * batch_size;
    let end = (start + batch_size).min(n);
    let mut batch = order[start..end].to_vec();
    batch.sort_unstable();
    batch
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Mean SSIM (mono) or final-stage three-pixel error (stereo).
    pub metric: f64,
}

/// Everything a training run records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// Stereo only: unweighted per-stage smooth-L1, one row per step.
    pub stage_losses: Vec<Vec<f64>>,
    pub validation: Vec<ValRecord>,
    /// Seconds per epoch; excluded from deterministic artifacts.
    pub wall_clock_s: Vec<f64>,
}

/// Resumable training position.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub optimizer: Optimizer,
}

impl TrainState {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        TrainState { step: 0, optimizer: Optimizer::new(cfg, store) }
    }
}

fn guard_diverged(err: Error, step: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged { step },
        other => other,
    }
}

// ── Mono training ───────────────────────────────────────────────────────

pub fn train_mono(
    model: &mut MonoModel,
    train: &[MonoSample],
    val: &[MonoSample],
    weights: &LossWeights,
    cfg: &OptimizerConfig,
    state: &mut TrainState,
) -> Result<TrainHistory> {
    cfg.validate()?;
    weights.validate_for_training()?;
    if train.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let mut history = TrainHistory::default();
    let bpe = train.len().div_ceil(cfg.batch_size);
    let mut epoch_timer = Instant::now();
    while state.step < cfg.max_steps {
        let step = state.step;
        let idxs = batch_indices(cfg.seed, step, train.len(), cfg.batch_size);
        let batch: Vec<&MonoSample> = idxs.iter().map(|&i| &train[i]).collect();
        let (rgb, depth, mask) = mono_batch(&batch)?;

        let mut tape = Tape::new();
        let (result, bound, updates) = {
            let mut ctx = ForwardCtx::new(&mut tape, true);
            let image_id = ctx.tape.constant(rgb.clone());
            let result = (|| {
                let pred = model.forward(&mut ctx, image_id)?;
                let target = ctx.tape.constant(depth.clone());
                mono_total_loss(ctx.tape, pred, target, &mask, &rgb, weights)
            })();
            let (bound, updates) = ctx.finish();
            (result, bound, updates)
        };
        let loss = result.map_err(|e| guard_diverged(e, step))?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step });
        }
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &bound, model.store())?;
        model.apply_bn_updates(updates);
        state.optimizer.apply(model.store_mut(), &grads)?;
        history.train_loss.push(loss_value);
        state.step += 1;

        if state.step % bpe == 0 || state.step == cfg.max_steps {
            let epoch = (state.step - 1) / bpe;
            history.wall_clock_s.push(epoch_timer.elapsed().as_secs_f64());
            epoch_timer = Instant::now();
            if !val.is_empty() && state.step % bpe == 0 {
                let (vloss, vssim) = validate_mono(model, val, weights)?;
                history.validation.push(ValRecord { epoch, loss: vloss, metric: vssim });
            }
        }
    }
    Ok(history)
}

fn validate_mono(model: &MonoModel, val: &[MonoSample], weights: &LossWeights) -> Result<(f64, f64)> {
    let mut loss_acc = 0.0;
    let mut ssim_acc = 0.0;
    for sample in val {
        let (rgb, depth, mask) = mono_batch(&[sample])?;
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, false);
        let image_id = ctx.tape.constant(rgb.clone());
        let pred = model.forward(&mut ctx, image_id)?;
        let target = ctx.tape.constant(depth.clone());
        let loss = mono_total_loss(ctx.tape, pred, target, &mask, &rgb, weights)?;
        loss_acc += tape.value(loss).item();
        let pred_t = tape.value(pred).clone();
        ssim_acc += ssim_value(&pred_t, &depth, 1.0)?;
    }
    let n = val.len() as f64;
    Ok((loss_acc / n, ssim_acc / n))
}

// ── Stereo training ─────────────────────────────────────────────────────

pub fn train_stereo(
    model: &mut AnyNet,
    train: &[StereoSample],
    val: &[StereoSample],
    beta: f64,
    cfg: &OptimizerConfig,
    state: &mut TrainState,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let up_to_stage = if model.config.spn_channels.is_some() { 4 } else { 3 };
    let weights = model.config.stage_loss_weights;
    let mut history = TrainHistory::default();
    let bpe = train.len().div_ceil(cfg.batch_size);
    let mut epoch_timer = Instant::now();
    while state.step < cfg.max_steps {
        let step = state.step;
        let idxs = batch_indices(cfg.seed, step, train.len(), cfg.batch_size);
        let batch: Vec<&StereoSample> = idxs.iter().map(|&i| &train[i]).collect();
        let (left, right, disp, mask) = stereo_batch(&batch)?;

        let mut tape = Tape::new();
        let (result, bound, updates) = {
            let mut ctx = ForwardCtx::new(&mut tape, true);
            let result = (|| {
                let l = ctx.tape.constant(left.clone());
                let r = ctx.tape.constant(right.clone());
                let stages = model.forward(&mut ctx, l, r, up_to_stage)?;
                let target = ctx.tape.constant(disp.clone());
                let mut per_stage = Vec::with_capacity(stages.len());
                for &s in &stages {
                    let sl = crate::stereo::smooth_l1_loss(ctx.tape, s, target, &mask, beta)?;
                    per_stage.push(sl);
                }
                let total = stereo_total_loss(ctx.tape, &stages, target, &mask, &weights, beta)?;
                Ok::<_, Error>((total, per_stage))
            })();
            let (bound, updates) = ctx.finish();
            (result, bound, updates)
        };
        let (loss, per_stage) = result.map_err(|e| guard_diverged(e, step))?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step });
        }
        let stage_values: Vec<f64> = per_stage.iter().map(|&id| tape.value(id).item()).collect();
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &bound, model.store())?;
        model.apply_bn_updates(updates);
        state.optimizer.apply(model.store_mut(), &grads)?;
        history.train_loss.push(loss_value);
        history.stage_losses.push(stage_values);
        state.step += 1;

        if state.step % bpe == 0 || state.step == cfg.max_steps {
            let epoch = (state.step - 1) / bpe;
            history.wall_clock_s.push(epoch_timer.elapsed().as_secs_f64());
            epoch_timer = Instant::now();
            if !val.is_empty() && state.step % bpe == 0 {
                let report = evaluate_stereo(model, val, up_to_stage)?;
                let tpe = report
                    .get(&format!("three_pixel_error_stage{up_to_stage}"))
                    .map(|m| m.aggregates.mean)
                    .unwrap_or(f64::NAN);
                let vloss = report
                    .get(&format!("smooth_l1_stage{up_to_stage}"))
                    .map(|m| m.aggregates.mean)
                    .unwrap_or(f64::NAN);
                history.validation.push(ValRecord { epoch, loss: vloss, metric: tpe });
            }
        }
    }
    Ok(history)
}

fn collect_grads(
    tape: &Tape,
    bound: &[(usize, crate::tensor::TensorId)],
    store: &ParamStore,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut grads = Vec::new();
    for &(idx, leaf) in bound {
        if !store.get(idx).trainable {
            continue;
        }
        let g = tape
            .grad(leaf)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(idx).value.numel()]);
        grads.push((idx, g));
    }
    Ok(grads)
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Per-sample SSIM and masked L1 of eval-mode predictions.
pub fn evaluate_mono(model: &MonoModel, samples: &[MonoSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    let mut ssim_vals = Vec::with_capacity(samples.len());
    let mut l1_vals = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = model.predict_depth(&s.rgb)?;
        ssim_vals.push(ssim_value(&pred.to_tensor(), &s.depth.to_tensor(), 1.0)?);
        l1_vals.push(masked_l1(&pred, &s.depth, &s.mask)?);
    }
    let mut report = MetricsReport::default();
    report.push(MetricSeries::new("ssim", ssim_vals));
    report.push(MetricSeries::new("l1", l1_vals));
    Ok(report)
}

fn masked_l1(pred: &Plane, target: &Plane, mask: &Plane) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0u64;
    for i in 0..pred.data.len() {
        if mask.data[i] != 0.0 {
            acc += (pred.data[i] - target.data[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(acc / count as f64)
}

fn masked_smooth_l1(pred: &Plane, target: &Plane, mask: &Plane, beta: f64) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0u64;
    for i in 0..pred.data.len() {
        if mask.data[i] != 0.0 {
            let d = (target.data[i] - pred.data[i]).abs();
            acc += if d < beta { d * d / (2.0 * beta) } else { d - beta / 2.0 };
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(acc / count as f64)
}

/// Per-stage three-pixel error and smooth-L1 of eval-mode predictions.
pub fn evaluate_stereo(model: &AnyNet, samples: &[StereoSample], up_to_stage: usize) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    let mut tpe: Vec<Vec<f64>> = vec![Vec::new(); up_to_stage];
    let mut sl1: Vec<Vec<f64>> = vec![Vec::new(); up_to_stage];
    for s in samples {
        let preds = model.predict(&s.left, &s.right, up_to_stage)?;
        for (stage, pred) in preds.iter().enumerate() {
            tpe[stage].push(three_pixel_error(pred, &s.disparity, &s.mask, ThreePixelVariant::Absolute)?);
            sl1[stage].push(masked_smooth_l1(pred, &s.disparity, &s.mask, 1.0)?);
        }
    }
    let mut report = MetricsReport::default();
    for (stage, vals) in tpe.into_iter().enumerate() {
        report.push(MetricSeries::new(format!("three_pixel_error_stage{}", stage + 1), vals));
    }
    for (stage, vals) in sl1.into_iter().enumerate() {
        report.push(MetricSeries::new(format!("smooth_l1_stage{}", stage + 1), vals));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with_one_param(value: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = value.len();
        s.add("w", Tensor::new(vec![n], value).unwrap(), crate::blocks::ParamKind::Bias, true)
            .unwrap();
        s
    }

    #[test]
    fn sgd_step_example() {
        let mut store = store_with_one_param(vec![1.0]);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &store);
        opt.apply(&mut store, &[(0, vec![0.5])]).unwrap();
        assert!((store.get(0).value.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut store = store_with_one_param(vec![0.3, -0.7]);
            let cfg = OptimizerConfig { kind, ..OptimizerConfig::default() };
            let mut opt = Optimizer::new(&cfg, &store);
            opt.apply(&mut store, &[(0, vec![0.0, 0.0])]).unwrap();
            assert_eq!(store.get(0).value.data(), &[0.3, -0.7]);
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut store = store_with_one_param(vec![1.0, 2.0, 3.0]);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &store);
        opt.apply(&mut store, &[(0, vec![0.7, 0.7, 0.7])]).unwrap();
        for (i, orig) in [1.0, 2.0, 3.0].iter().enumerate() {
            let delta = (store.get(0).value.data()[i] - orig).abs();
            assert!((delta - 1e-3).abs() < 1e-6, "first-step delta {delta}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = store_with_one_param(vec![1.0, 2.0]);
        let cfg = OptimizerConfig::default();
        let mut opt = Optimizer::new(&cfg, &store);
        assert!(opt.apply(&mut store, &[(0, vec![0.1])]).is_err());
    }

    #[test]
    fn schedule_is_a_permutation_per_epoch() {
        let n: usize = 10;
        let batch = 3;
        let bpe = n.div_ceil(batch);
        let mut seen: Vec<usize> = Vec::new();
        for slot in 0..bpe {
            seen.extend(batch_indices(42, slot, n, batch));
        }
        let mut sorted = seen.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        // Same (seed, step) always gives the same batch.
        assert_eq!(batch_indices(42, 7, n, batch), batch_indices(42, 7, n, batch));
        // Different epochs reshuffle.
        let e0: Vec<usize> = (0..bpe).flat_map(|s| batch_indices(42, s, n, batch)).collect();
        let e1: Vec<usize> = (bpe..2 * bpe).flat_map(|s| batch_indices(42, s, n, batch)).collect();
        assert_ne!(e0, e1);
    }

    #[test]
    fn moments_roundtrip() {
        let store = store_with_one_param(vec![1.0, 2.0]);
        let cfg = OptimizerConfig::default();
        let mut opt = Optimizer::new(&cfg, &store);
        let mut store2 = store_with_one_param(vec![1.0, 2.0]);
        opt.apply(&mut store2, &[(0, vec![0.1, -0.2])]).unwrap();
        let flat = opt.moments_flat();
        let mut restored = Optimizer::new(&cfg, &store);
        restored.restore_moments(&flat, opt.step_count()).unwrap();
        assert_eq!(restored.moments_flat(), flat);
        assert_eq!(restored.step_count(), 1);
        assert!(restored.restore_moments(&flat[1..], 1).is_err());
    }
}
