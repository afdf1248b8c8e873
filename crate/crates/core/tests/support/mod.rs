//! Shared helpers for the integration suites: naive loop oracles written
//! independently of the library kernels, randomized-trial runners, and the
//! gradient-check suites. Each test target uses a subset of these.
#![allow(dead_code, clippy::too_many_arguments)]
//!
//! Every oracle below recomputes the operation from its definition with
//! plain nested loops; none of them call back into the tape.

use depthbench_core::rng::DetRng;
use depthbench_core::tensor::{Tape, Tensor};
use depthbench_core::{Result, TensorId};

pub fn random_tensor(rng: &mut DetRng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(lo, hi)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn at4(t: &Tensor, c: usize, h: usize, w: usize, ni: usize, ci: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
        return 0.0;
    }
    t.data()[((ni * c + ci) * h + y as usize) * w + x as usize]
}

/// Six-nested-loop convolution oracle (cross-correlation, zero padding).
pub fn conv2d_oracle(input: &Tensor, weight: &Tensor, bias: &[f64], stride: usize, padding: usize) -> Tensor {
    let (n, ci, h, w) = dims4(input);
    let (co, _, kh, kw) = dims4(weight);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for ni in 0..n {
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                let wv = weight.data()[((oc * ci + ic) * kh + ky) * kw + kx];
                                acc += wv * at4(input, ci, h, w, ni, ic, iy, ix);
                            }
                        }
                    }
                    out[((ni * co + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

pub fn maxpool_oracle(input: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(input);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = at4(input, c, h, w, ni, ci, (2 * oy + dy) as isize, (2 * ox + dx) as isize);
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    out[((ni * c + ci) * oh + oy) * ow + ox] = m;
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

fn clamp_idx(v: isize, extent: usize) -> usize {
    v.clamp(0, extent as isize - 1) as usize
}

/// Direct per-pixel bilinear 2x upsampling oracle, align-corners-false.
pub fn upsample_bilinear_oracle(input: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(input);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    let get = |ni: usize, ci: usize, y: usize, x: usize| input.data()[((ni * c + ci) * h + y) * w + x];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                    let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                    let y0 = clamp_idx(sy.floor() as isize, h);
                    let y1 = clamp_idx(sy.floor() as isize + 1, h);
                    let x0 = clamp_idx(sx.floor() as isize, w);
                    let x1 = clamp_idx(sx.floor() as isize + 1, w);
                    let fy = sy - sy.floor();
                    let fx = sx - sx.floor();
                    let v = get(ni, ci, y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + get(ni, ci, y0, x1) * (1.0 - fy) * fx
                        + get(ni, ci, y1, x0) * fy * (1.0 - fx)
                        + get(ni, ci, y1, x1) * fy * fx;
                    out[((ni * c + ci) * oh + oy) * ow + ox] = v;
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

pub fn upsample_nearest_oracle(input: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(input);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[((ni * c + ci) * oh + oy) * ow + ox] =
                        input.data()[((ni * c + ci) * h + oy / 2) * w + ox / 2];
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

/// Direct-formula batchnorm oracle given statistics.
pub fn batchnorm_oracle(input: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Tensor {
    let (n, c, h, w) = dims4(input);
    let mut out = vec![0.0; input.numel()];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = ((ni * c + ci) * h + y) * w + x;
                    out[i] = (input.data()[i] - mean[ci]) / (var[ci] + eps).sqrt() * gamma[ci] + beta[ci];
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out).unwrap()
}

/// Naive per-channel statistics over N, H, W.
pub fn batch_stats_oracle(input: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims4(input);
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut acc = 0.0;
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    acc += input.data()[((ni * c + ci) * h + y) * w + x];
                }
            }
        }
        mean[ci] = acc / count;
        let mut vacc = 0.0;
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let d = input.data()[((ni * c + ci) * h + y) * w + x] - mean[ci];
                    vacc += d * d;
                }
            }
        }
        var[ci] = vacc / count;
    }
    (mean, var)
}

/// Triple-loop full cost volume oracle with max-fill for out-of-range d.
pub fn cost_volume_full_oracle(left: &Tensor, right: &Tensor, d_count: usize) -> Tensor {
    let (n, c, h, w) = dims4(left);
    let mut out = vec![0.0; n * d_count * h * w];
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut max_cost = f64::NEG_INFINITY;
                for d in 0..d_count {
                    if d > x {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let l = left.data()[((ni * c + ci) * h + y) * w + x];
                        let r = right.data()[((ni * c + ci) * h + y) * w + x - d];
                        acc += (l - r).abs();
                    }
                    let cost = acc / c as f64;
                    out[((ni * d_count + d) * h + y) * w + x] = cost;
                    max_cost = max_cost.max(cost);
                }
                for d in 0..d_count {
                    if d > x {
                        out[((ni * d_count + d) * h + y) * w + x] = max_cost;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, d_count, h, w], out).unwrap()
}

pub fn cost_volume_residual_oracle(left: &Tensor, right_warped: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = dims4(left);
    let d_count = 2 * k + 1;
    let mut out = vec![0.0; n * d_count * h * w];
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut max_cost = f64::NEG_INFINITY;
                for d in 0..d_count {
                    let xr = x as isize - (d as isize - k as isize);
                    if xr < 0 || xr as usize >= w {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let l = left.data()[((ni * c + ci) * h + y) * w + x];
                        let r = right_warped.data()[((ni * c + ci) * h + y) * w + xr as usize];
                        acc += (l - r).abs();
                    }
                    let cost = acc / c as f64;
                    out[((ni * d_count + d) * h + y) * w + x] = cost;
                    max_cost = max_cost.max(cost);
                }
                for d in 0..d_count {
                    let xr = x as isize - (d as isize - k as isize);
                    if xr < 0 || xr as usize >= w {
                        out[((ni * d_count + d) * h + y) * w + x] = max_cost;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, d_count, h, w], out).unwrap()
}

/// Per-pixel horizontal-interpolation warp oracle with edge clamping.
pub fn warp_oracle(features: &Tensor, disparity: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(features);
    let mut out = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let d = disparity.data()[(ni * h + y) * w + x];
                let src = x as f64 - d;
                let x0 = clamp_idx(src.floor() as isize, w);
                let x1 = clamp_idx(src.floor() as isize + 1, w);
                let f = src - src.floor();
                for ci in 0..c {
                    let base = (ni * c + ci) * h + y;
                    out[base * w + x] =
                        features.data()[base * w + x0] * (1.0 - f) + features.data()[base * w + x1] * f;
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).unwrap()
}

/// Direct weighted-sum soft-argmin oracle.
pub fn soft_argmin_oracle(cost: &Tensor, offset0: f64, step: f64) -> Tensor {
    let (n, d, h, w) = dims4(cost);
    let mut out = vec![0.0; n * h * w];
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let costs: Vec<f64> = (0..d).map(|di| cost.data()[((ni * d + di) * h + y) * w + x]).collect();
                let m = costs.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(-b));
                let exps: Vec<f64> = costs.iter().map(|&cv| (-cv - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut acc = 0.0;
                for (di, e) in exps.iter().enumerate() {
                    acc += (offset0 + step * di as f64) * e / z;
                }
                out[(ni * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(vec![n, 1, h, w], out).unwrap()
}

/// Per-pixel edge-aware smoothness oracle.
pub fn smoothness_oracle(depth: &Tensor, image: &Tensor) -> f64 {
    let (n, _, h, w) = dims4(depth);
    let (_, ic, _, _) = dims4(image);
    let dat = |ni: usize, y: usize, x: usize| depth.data()[(ni * h + y) * w + x];
    let iat = |ni: usize, c: usize, y: usize, x: usize| image.data()[((ni * ic + c) * h + y) * w + x];
    let mut sx = 0.0;
    let mut sy = 0.0;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w - 1 {
                let gd = (dat(ni, y, x + 1) - dat(ni, y, x)).abs();
                let gi: f64 =
                    (0..ic).map(|c| (iat(ni, c, y, x + 1) - iat(ni, c, y, x)).abs()).sum::<f64>() / ic as f64;
                sx += gd * (-gi).exp();
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                let gd = (dat(ni, y + 1, x) - dat(ni, y, x)).abs();
                let gi: f64 =
                    (0..ic).map(|c| (iat(ni, c, y + 1, x) - iat(ni, c, y, x)).abs()).sum::<f64>() / ic as f64;
                sy += gd * (-gi).exp();
            }
        }
    }
    sx / ((n * h * (w - 1)) as f64) + sy / ((n * (h - 1) * w) as f64)
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    match t.shape() {
        &[n, c, h, w] => (n, c, h, w),
        other => panic!("expected 4-D, got {other:?}"),
    }
}

// ── Randomized oracle suites ────────────────────────────────────────────
//
// Each suite runs `trials` randomized small instances and returns the max
// absolute deviation between the tape op and the oracle.

pub fn suite_conv2d(trials: usize, rng: &mut DetRng) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let stride = 1 + t % 2;
        let padding = t % 3;
        let kh = [1, 3, 3, 5][t % 4];
        let n = 1 + t % 2;
        let ci = 1 + t % 3;
        let co = 1 + (t / 2) % 3;
        let h = kh + 2 + t % 5;
        let w = kh + 3 + (t / 3) % 5;
        let input = random_tensor(rng, vec![n, ci, h, w], -2.0, 2.0);
        let weight = random_tensor(rng, vec![co, ci, kh, kh], -1.0, 1.0);
        let bias = random_tensor(rng, vec![co], -0.5, 0.5);
        let mut tape = Tape::new();
        let i = tape.constant(input.clone());
        let wt = tape.constant(weight.clone());
        let b = tape.constant(bias.clone());
        let out = tape.conv2d(i, wt, b, stride, padding).unwrap();
        let oracle = conv2d_oracle(&input, &weight, bias.data(), stride, padding);
        worst = worst.max(max_abs_diff(tape.value(out).data(), oracle.data()));
    }
    worst
}

pub fn suite_maxpool(trials: usize, rng: &mut DetRng) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let shape = vec![1 + t % 2, 1 + t % 3, 2 * (2 + t % 4), 2 * (2 + (t / 2) % 4)];
        let input = random_tensor(rng, shape, -3.0, 3.0);
        let mut tape = Tape::new();
        let i = tape.constant(input.clone());
        let out = tape.maxpool2x2(i).unwrap();
        worst = worst.max(max_abs_diff(tape.value(out).data(), maxpool_oracle(&input).data()));
    }
    worst
}

pub fn suite_upsample(trials: usize, rng: &mut DetRng) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let shape = vec![1 + t % 2, 1 + t % 2, 2 + t % 6, 3 + (t / 2) % 6];
        let input = random_tensor(rng, shape, -1.0, 1.0);
        let mut tape = Tape::new();
        let i = tape.constant(input.clone());
        let b = tape.upsample_bilinear2x(i).unwrap();
        worst = worst.max(max_abs_diff(tape.value(b).data(), upsample_bilinear_oracle(&input).data()));
        let nn = tape.upsample_nearest2x(i).unwrap();
        worst = worst.max(max_abs_diff(tape.value(nn).data(), upsample_nearest_oracle(&input).data()));
    }
    worst
}

pub fn suite_batchnorm(trials: usize, rng: &mut DetRng) -> f64 {
    let mut worst = 0.0f64;
    let eps = 1e-5;
    for t in 0..trials {
        let c = 1 + t % 4;
        let shape = vec![1 + t % 3, c, 2 + t % 4, 2 + (t / 2) % 4];
        let input = random_tensor(rng, shape, -2.0, 2.0);
        let gamma = random_tensor(rng, vec![c], 0.5, 1.5);
        let beta = random_tensor(rng, vec![c], -0.5, 0.5);
        let rm = random_tensor(rng, vec![c], -0.5, 0.5);
        let rv = random_tensor(rng, vec![c], 0.5, 1.5);

        // Eval mode against the direct formula with stored stats.
        let mut tape = Tape::new();
        let i = tape.constant(input.clone());
        let g = tape.constant(gamma.clone());
        let b = tape.constant(beta.clone());
        let (out, _) = tape
            .batchnorm2d(i, g, b, rm.data(), rv.data(), false, eps)
            .unwrap();
        let oracle = batchnorm_oracle(&input, gamma.data(), beta.data(), rm.data(), rv.data(), eps);
        worst = worst.max(max_abs_diff(tape.value(out).data(), oracle.data()));

        // Training mode against naive batch statistics plus the formula.
        let (tr, stats) = tape
            .batchnorm2d(i, g, b, rm.data(), rv.data(), true, eps)
            .unwrap();
        let (om, ov) = batch_stats_oracle(&input);
        let (sm, sv) = stats.unwrap();
        worst = worst.max(max_abs_diff(&sm, &om));
        worst = worst.max(max_abs_diff(&sv, &ov));
        let oracle_tr = batchnorm_oracle(&input, gamma.data(), beta.data(), &om, &ov, eps);
        worst = worst.max(max_abs_diff(tape.value(tr).data(), oracle_tr.data()));
    }
    worst
}

pub fn suite_cost_volumes(trials: usize, rng: &mut DetRng) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (n, c, h, w) = (1 + t % 2, 1 + t % 4, 2 + t % 4, 6 + t % 6);
        let left = random_tensor(rng, vec![n, c, h, w], -1.0, 1.0);
        let right = random_tensor(rng, vec![n, c, h, w], -1.0, 1.0);
        let d_count = 2 + t % (w / 2);
        let mut tape = Tape::new();
        let l = tape.constant(left.clone());
        let r = tape.constant(right.clone());
        let full = tape.cost_volume_full(l, r, d_count).unwrap();
        worst = worst.max(max_abs_diff(
            tape.value(full).data(),
            cost_volume_full_oracle(&left, &right, d_count).data(),
        ));
        let k = 1 + t % 3;
        let res = tape.cost_volume_residual(l, r, k).unwrap();
        worst = worst.max(max_abs_diff(
            tape.value(res).data(),
            cost_volume_residual_oracle(&left, &right, k).data(),
        ));
    }
    worst
}

pub fn suite_warp(trials: usize, rng: &mut DetRng) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (n, c, h, w) = (1 + t % 2, 1 + t % 3, 2 + t % 4, 5 + t % 6);
        let feats = random_tensor(rng, vec![n, c, h, w], -1.0, 1.0);
        let disp = random_tensor(rng, vec![n, 1, h, w], -1.5, (w as f64) * 0.6);
        let mut tape = Tape::new();
        let f = tape.constant(feats.clone());
        let d = tape.constant(disp.clone());
        let out = tape.warp_with_disparity(f, d).unwrap();
        worst = worst.max(max_abs_diff(tape.value(out).data(), warp_oracle(&feats, &disp).data()));
    }
    worst
}

pub fn suite_soft_argmin(trials: usize, rng: &mut DetRng) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (n, d, h, w) = (1 + t % 2, 2 + t % 6, 2 + t % 3, 2 + t % 4);
        let cost = random_tensor(rng, vec![n, d, h, w], 0.0, 5.0);
        let offset0 = -((t % 3) as f64);
        let mut tape = Tape::new();
        let c = tape.constant(cost.clone());
        let out = depthbench_core::stereo::soft_argmin(&mut tape, c, offset0, 1.0).unwrap();
        worst = worst.max(max_abs_diff(
            tape.value(out).data(),
            soft_argmin_oracle(&cost, offset0, 1.0).data(),
        ));
    }
    worst
}

pub fn suite_smoothness(trials: usize, rng: &mut DetRng) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (n, h, w) = (1 + t % 2, 3 + t % 5, 3 + (t / 2) % 5);
        let depth = random_tensor(rng, vec![n, 1, h, w], 0.0, 1.0);
        let image = random_tensor(rng, vec![n, 3, h, w], 0.0, 1.0);
        let mut tape = Tape::new();
        let d = tape.constant(depth.clone());
        let loss = depthbench_core::mono::depth_smoothness_loss(&mut tape, d, &image).unwrap();
        worst = worst.max((tape.value(loss).item() - smoothness_oracle(&depth, &image)).abs());
    }
    worst
}

pub fn all_oracle_suites(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = DetRng::seed_from_u64(seed);
    vec![
        ("conv2d", suite_conv2d(trials, &mut rng)),
        ("maxpool2x2", suite_maxpool(trials, &mut rng)),
        ("upsample", suite_upsample(trials, &mut rng)),
        ("batchnorm", suite_batchnorm(trials, &mut rng)),
        ("cost_volumes", suite_cost_volumes(trials, &mut rng)),
        ("warp", suite_warp(trials, &mut rng)),
        ("soft_argmin", suite_soft_argmin(trials, &mut rng)),
        ("depth_smoothness", suite_smoothness(trials, &mut rng)),
    ]
}

// ── Gradient-check suites ───────────────────────────────────────────────

use depthbench_core::blocks::ForwardCtx;
use depthbench_core::data::{gen_synthetic_mono, gen_synthetic_stereo, MonoGenConfig, StereoGenConfig};
use depthbench_core::mono::{
    build_mono_model, depth_smoothness_loss, l1_depth_loss, mono_batch, mono_total_loss,
    LossWeights, MonoConfig, MonoModel, MonoStructure,
};
use depthbench_core::ssim::ssim_loss;
use depthbench_core::stereo::{
    build_anynet, smooth_l1_loss, soft_argmin, stereo_batch, stereo_total_loss, AnyNet, AnyNetConfig,
};
use depthbench_core::tensor::{grad_check, nudge_away_from_kinks, ScanDirection};

pub const GC_EPS: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;

/// Loss for op checks: a fixed-pattern weighted sum of the output. Keeps
/// every output element's contribution O(1) and bounded away from zero.
fn probe_sum(t: &mut Tape, y: TensorId) -> Result<TensorId> {
    let shape = t.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| 0.5 + (i * 37 % 17) as f64 / 17.0).collect();
    let r = t.constant(Tensor::new(shape, data)?);
    let p = t.mul(y, r)?;
    t.sum(p)
}

pub struct GradCheckEntry {
    pub name: &'static str,
    pub error: f64,
    pub tol: f64,
}

fn entry<F>(name: &'static str, tol: f64, build: F, inputs: &[Tensor]) -> GradCheckEntry
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let error = grad_check(build, inputs, GC_EPS).unwrap();
    GradCheckEntry { name, error, tol }
}

/// Every differentiable tape operation plus the loss compositions, checked
/// against central finite differences.
pub fn gradient_suite() -> Vec<GradCheckEntry> {
    let mut rng = DetRng::seed_from_u64(201);
    let mut out = Vec::new();

    // Algebra.
    let a = random_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, vec![2, 3], 0.5, 1.5);
    out.push(entry("add", OP_TOL, |t, ids| { let s = t.add(ids[0], ids[1])?; t.sum(s) }, &[a.clone(), b.clone()]));
    out.push(entry("sub_mean", OP_TOL, |t, ids| { let s = t.sub(ids[0], ids[1])?; t.mean(s) }, &[a.clone(), b.clone()]));
    out.push(entry("mul", OP_TOL, |t, ids| { let s = t.mul(ids[0], ids[1])?; t.sum(s) }, &[a.clone(), b.clone()]));
    out.push(entry("div", OP_TOL, |t, ids| { let s = t.div(ids[0], ids[1])?; t.sum(s) }, &[a.clone(), b.clone()]));
    out.push(entry("affine", OP_TOL, |t, ids| { let s = t.affine(ids[0], -1.7, 0.3)?; t.sum(s) }, std::slice::from_ref(&a)));
    out.push(entry("exp", OP_TOL, |t, ids| { let s = t.exp(ids[0])?; t.sum(s) }, std::slice::from_ref(&a)));

    let mut away = random_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
    nudge_away_from_kinks(&mut away, 10.0 * GC_EPS, &[0.0]);
    out.push(entry("abs", OP_TOL, |t, ids| { let s = t.abs(ids[0])?; t.sum(s) }, std::slice::from_ref(&away)));
    out.push(entry("clamp_min", OP_TOL, |t, ids| { let s = t.clamp_min(ids[0], 0.0)?; t.sum(s) }, std::slice::from_ref(&away)));
    out.push(entry("softmax", OP_TOL, |t, ids| { let s = t.softmax(ids[0], 1)?; probe_sum(t, s) }, &[random_tensor(&mut rng, vec![2, 5], -2.0, 2.0)]));
    out.push(entry("sum_axis", OP_TOL, |t, ids| { let s = t.sum_axis(ids[0], 1)?; probe_sum(t, s) }, &[random_tensor(&mut rng, vec![2, 3, 2, 2], -1.0, 1.0)]));
    out.push(entry("concat_narrow", OP_TOL, |t, ids| {
        let cat = t.concat(&[ids[0], ids[1]], 1)?;
        let part = t.narrow(cat, 1, 1, 3)?;
        probe_sum(t, part)
    }, &[random_tensor(&mut rng, vec![1, 2, 2, 2], -1.0, 1.0), random_tensor(&mut rng, vec![1, 2, 2, 2], -1.0, 1.0)]));
    {
        let mask = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        out.push(entry("masked_mean", OP_TOL, move |t, ids| t.masked_mean(ids[0], &mask), std::slice::from_ref(&a)));
    }

    // Activations, inputs nudged off the kink at zero.
    let mut x = random_tensor(&mut rng, vec![3, 5], -2.0, 2.0);
    nudge_away_from_kinks(&mut x, 10.0 * GC_EPS, &[0.0]);
    out.push(entry("relu", OP_TOL, |t, ids| { let y = t.relu(ids[0])?; t.sum(y) }, std::slice::from_ref(&x)));
    out.push(entry("leaky_relu", OP_TOL, |t, ids| { let y = t.leaky_relu(ids[0], 0.2)?; t.sum(y) }, std::slice::from_ref(&x)));
    out.push(entry("sigmoid", OP_TOL, |t, ids| { let y = t.sigmoid(ids[0])?; t.sum(y) }, std::slice::from_ref(&x)));
    out.push(entry("swish", OP_TOL, |t, ids| { let y = t.swish(ids[0])?; t.sum(y) }, std::slice::from_ref(&x)));

    // Structured ops.
    let input = random_tensor(&mut rng, vec![2, 2, 5, 6], -1.0, 1.0);
    let weight = random_tensor(&mut rng, vec![3, 2, 3, 3], -0.7, 0.7);
    let bias = random_tensor(&mut rng, vec![3], -0.3, 0.3);
    out.push(entry("conv2d_s1p1", OP_TOL, |t, ids| { let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1)?; probe_sum(t, y) }, &[input.clone(), weight.clone(), bias.clone()]));
    out.push(entry("conv2d_s2p0", OP_TOL, |t, ids| { let y = t.conv2d(ids[0], ids[1], ids[2], 2, 0)?; t.sum(y) }, &[input.clone(), weight.clone(), bias.clone()]));
    out.push(entry("maxpool2x2", OP_TOL, |t, ids| { let y = t.maxpool2x2(ids[0])?; probe_sum(t, y) }, &[random_tensor(&mut rng, vec![1, 2, 4, 6], -1.0, 1.0)]));
    let up_in = random_tensor(&mut rng, vec![1, 2, 3, 4], -1.0, 1.0);
    out.push(entry("upsample_bilinear2x", OP_TOL, |t, ids| { let y = t.upsample_bilinear2x(ids[0])?; probe_sum(t, y) }, std::slice::from_ref(&up_in)));
    out.push(entry("upsample_nearest2x", OP_TOL, |t, ids| { let y = t.upsample_nearest2x(ids[0])?; probe_sum(t, y) }, &[up_in]));

    // Batch normalization, both modes.
    let bn_in = random_tensor(&mut rng, vec![2, 3, 3, 4], -1.5, 1.5);
    let gamma = random_tensor(&mut rng, vec![3], 0.5, 1.5);
    let beta = random_tensor(&mut rng, vec![3], -0.5, 0.5);
    for (name, training) in [("batchnorm_train", true), ("batchnorm_eval", false)] {
        out.push(entry(name, OP_TOL, move |t, ids| {
            let (y, _) = t.batchnorm2d(ids[0], ids[1], ids[2], &[0.1, -0.2, 0.3], &[1.1, 0.7, 1.4], training, 1e-5)?;
            probe_sum(t, y)
        }, &[bn_in.clone(), gamma.clone(), beta.clone()]));
    }

    // Stereo-specific ops.
    let left = random_tensor(&mut rng, vec![1, 2, 3, 8], -1.0, 1.0);
    let right = random_tensor(&mut rng, vec![1, 2, 3, 8], -1.0, 1.0);
    out.push(entry("cost_volume_full", OP_TOL, |t, ids| { let v = t.cost_volume_full(ids[0], ids[1], 4)?; probe_sum(t, v) }, &[left.clone(), right.clone()]));
    out.push(entry("cost_volume_residual", OP_TOL, |t, ids| { let v = t.cost_volume_residual(ids[0], ids[1], 2)?; probe_sum(t, v) }, &[left.clone(), right.clone()]));
    {
        // Fractional parts well inside (0, 1): no interpolation-cell crossing.
        let mut disp = vec![0.0; 3 * 8];
        for (i, v) in disp.iter_mut().enumerate() {
            *v = 0.3 + 0.4 * ((i * 37 % 10) as f64 / 10.0) + (i % 3) as f64;
        }
        let disp = Tensor::new(vec![1, 1, 3, 8], disp).unwrap();
        out.push(entry("warp_with_disparity", OP_TOL, |t, ids| { let y = t.warp_with_disparity(ids[0], ids[1])?; probe_sum(t, y) }, &[left.clone(), disp]));
    }
    out.push(entry("soft_argmin", OP_TOL, |t, ids| { let d = soft_argmin(t, ids[0], -2.0, 1.0)?; probe_sum(t, d) }, &[random_tensor(&mut rng, vec![1, 5, 2, 3], 0.0, 3.0)]));
    {
        let x = random_tensor(&mut rng, vec![1, 1, 4, 5], -1.0, 1.0);
        let w0 = random_tensor(&mut rng, vec![1, 1, 4, 5], 0.05, 0.30);
        let w1 = random_tensor(&mut rng, vec![1, 1, 4, 5], 0.05, 0.30);
        let w2 = random_tensor(&mut rng, vec![1, 1, 4, 5], 0.05, 0.30);
        for (name, dir) in [
            ("spn_scan_l2r", ScanDirection::LeftToRight),
            ("spn_scan_r2l", ScanDirection::RightToLeft),
            ("spn_scan_t2b", ScanDirection::TopToBottom),
            ("spn_scan_b2t", ScanDirection::BottomToTop),
        ] {
            out.push(entry(name, OP_TOL, move |t, ids| {
                let y = t.spn_scan(ids[0], [ids[1], ids[2], ids[3]], dir)?;
                probe_sum(t, y)
            }, &[x.clone(), w0.clone(), w1.clone(), w2.clone()]));
        }
    }

    // Losses. SSIM is a deep composition whose Gaussian-window corners carry
    // gradients near the finite-difference resolution, so it and the total
    // that embeds it are checked at the end-to-end tolerance.
    let pred = random_tensor(&mut rng, vec![1, 1, 12, 12], 0.1, 0.9);
    let target = random_tensor(&mut rng, vec![1, 1, 12, 12], 0.1, 0.9);
    out.push(entry("ssim_loss", MODEL_TOL, |t, ids| ssim_loss(t, ids[0], ids[1], 1.0), &[pred.clone(), target.clone()]));
    let mask = Tensor::full(vec![1, 1, 12, 12], 1.0);
    {
        let mask = mask.clone();
        out.push(entry("l1_depth_loss", OP_TOL, move |t, ids| l1_depth_loss(t, ids[0], ids[1], &mask), &[pred.clone(), target.clone()]));
    }
    let image = random_tensor(&mut rng, vec![1, 3, 12, 12], 0.0, 1.0);
    {
        let image = image.clone();
        out.push(entry("depth_smoothness", OP_TOL, move |t, ids| depth_smoothness_loss(t, ids[0], &image), std::slice::from_ref(&pred)));
    }
    {
        let p2 = random_tensor(&mut rng, vec![1, 1, 4, 4], 0.0, 0.4);
        let t2 = random_tensor(&mut rng, vec![1, 1, 4, 4], 1.0, 3.0);
        let mask2 = Tensor::full(vec![1, 1, 4, 4], 1.0);
        out.push(entry("smooth_l1", OP_TOL, move |t, ids| smooth_l1_loss(t, ids[0], ids[1], &mask2, 1.0), &[p2, t2]));
    }
    {
        let weights = LossWeights::default();
        let mask = mask.clone();
        let image = image.clone();
        out.push(entry("mono_total_loss", MODEL_TOL, move |t, ids| mono_total_loss(t, ids[0], ids[1], &mask, &image, &weights), &[pred, target]));
    }
    out
}

// ── Full-model sampled gradient checks ──────────────────────────────────

/// Central-difference check of a model loss over a random sample of
/// trainable parameter elements, perturbing the store directly.
fn model_grad_check<M>(
    model: &mut M,
    store_of: fn(&mut M) -> &mut depthbench_core::blocks::ParamStore,
    loss_with_grads: impl Fn(&mut M) -> (f64, Vec<(usize, Vec<f64>)>),
    loss_only: impl Fn(&mut M) -> f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let (_, grads) = loss_with_grads(model);
    let grad_map: std::collections::HashMap<usize, Vec<f64>> = grads.into_iter().collect();
    let trainable: Vec<usize> = {
        let store = store_of(model);
        (0..store.len()).filter(|&i| store.get(i).trainable).collect()
    };
    let mut rng = DetRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let pidx = trainable[rng.below(trainable.len())];
        let numel = store_of(model).get(pidx).value.numel();
        let eidx = rng.below(numel);
        let orig = store_of(model).get(pidx).value.data()[eidx];
        store_of(model).get_mut(pidx).value.data_mut()[eidx] = orig + GC_EPS;
        let plus = loss_only(model);
        store_of(model).get_mut(pidx).value.data_mut()[eidx] = orig - GC_EPS;
        let minus = loss_only(model);
        store_of(model).get_mut(pidx).value.data_mut()[eidx] = orig;
        let numeric = (plus - minus) / (2.0 * GC_EPS);
        let analytic = grad_map.get(&pidx).map(|g| g[eidx]).unwrap_or(0.0);
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    worst
}

fn mono_loss(model: &MonoModel, rgb: &Tensor, depth: &Tensor, mask: &Tensor, want_grads: bool) -> (f64, Vec<(usize, Vec<f64>)>) {
    let weights = LossWeights::default();
    let mut tape = Tape::new();
    let (loss, bound) = {
        let mut ctx = ForwardCtx::new(&mut tape, true);
        let image = ctx.tape.constant(rgb.clone());
        let pred = model.forward(&mut ctx, image).unwrap();
        let target = ctx.tape.constant(depth.clone());
        let loss = mono_total_loss(ctx.tape, pred, target, mask, rgb, &weights).unwrap();
        let (bound, _) = ctx.finish();
        (loss, bound)
    };
    let value = tape.value(loss).item();
    if !want_grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let grads = bound
        .iter()
        .filter(|(idx, _)| model.store().get(*idx).trainable)
        .map(|&(idx, leaf)| {
            let g = tape
                .grad(leaf)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; model.store().get(idx).value.numel()]);
            (idx, g)
        })
        .collect();
    (value, grads)
}

/// Sampled gradient error of the full mono training loss.
pub fn mono_model_gradient_error() -> f64 {
    let mut model = build_mono_model(MonoConfig::new(MonoStructure::ThreeOneThree).with_input_size(32)).unwrap();
    model.init(77);
    let samples = gen_synthetic_mono(301, &MonoGenConfig { count: 2, height: 32, width: 32 }).unwrap();
    let refs: Vec<&_> = samples.iter().collect();
    let (rgb, depth, mask) = mono_batch(&refs).unwrap();
    model_grad_check(
        &mut model,
        |m| m.store_mut(),
        |m| mono_loss(m, &rgb, &depth, &mask, true),
        |m| mono_loss(m, &rgb, &depth, &mask, false).0,
        20,
        78,
    )
}

fn stereo_loss(model: &AnyNet, left: &Tensor, right: &Tensor, disp: &Tensor, mask: &Tensor, up_to_stage: usize, want_grads: bool) -> (f64, Vec<(usize, Vec<f64>)>) {
    let mut tape = Tape::new();
    let (loss, bound) = {
        let mut ctx = ForwardCtx::new(&mut tape, true);
        let l = ctx.tape.constant(left.clone());
        let r = ctx.tape.constant(right.clone());
        let stages = model.forward(&mut ctx, l, r, up_to_stage).unwrap();
        let target = ctx.tape.constant(disp.clone());
        let weights = model.config.stage_loss_weights;
        let loss = stereo_total_loss(ctx.tape, &stages, target, mask, &weights, 1.0).unwrap();
        let (bound, _) = ctx.finish();
        (loss, bound)
    };
    let value = tape.value(loss).item();
    if !want_grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let grads = bound
        .iter()
        .filter(|(idx, _)| model.store().get(*idx).trainable)
        .map(|&(idx, leaf)| {
            let g = tape
                .grad(leaf)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; model.store().get(idx).value.numel()]);
            (idx, g)
        })
        .collect();
    (value, grads)
}

/// Sampled gradient errors of the stereo loss: (stage-1 only, full four-stage).
pub fn stereo_model_gradient_errors() -> (f64, f64) {
    let config = AnyNetConfig::default().with_max_disparity(16).with_spn(Some(1));
    let mut model = build_anynet(config).unwrap();
    model.init(88);
    let samples = gen_synthetic_stereo(302, &StereoGenConfig { count: 2, height: 32, width: 48, max_disparity: 10 }).unwrap();
    let refs: Vec<&_> = samples.iter().collect();
    let (left, right, disp, mask) = stereo_batch(&refs).unwrap();
    let err1 = model_grad_check(
        &mut model,
        |m| m.store_mut(),
        |m| stereo_loss(m, &left, &right, &disp, &mask, 1, true),
        |m| stereo_loss(m, &left, &right, &disp, &mask, 1, false).0,
        20,
        89,
    );
    let err4 = model_grad_check(
        &mut model,
        |m| m.store_mut(),
        |m| stereo_loss(m, &left, &right, &disp, &mask, 4, true),
        |m| stereo_loss(m, &left, &right, &disp, &mask, 4, false).0,
        20,
        90,
    );
    (err1, err4)
}
