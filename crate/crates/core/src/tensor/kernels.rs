//! Raw forward/backward loops behind the tape operations.
//!
//! All kernels are single-threaded with fixed iteration order so results are
//! bitwise deterministic. Inner loops run over the width axis on contiguous
//! slices.

use super::idx4;

/// Output spatial extent for a convolution: floor((in + 2p - k) / s) + 1.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Valid output-column range [lo, hi) such that ox*stride + kx - padding
/// lands inside [0, w).
#[inline]
fn valid_ox_range(w: usize, ow: usize, stride: usize, padding: usize, kx: usize) -> (usize, usize) {
    // ix = ox*stride + kx - padding must satisfy 0 <= ix < w.
    let lo = padding.saturating_sub(kx).div_ceil(stride).min(ow);
    let hi = if w + padding > kx { ((w + padding - kx - 1) / stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

/// Cross-correlation (no kernel flip) with zero padding and per-output-channel bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * co * oh * ow];
    for ni in 0..n {
        for oc in 0..co {
            let b = bias[oc];
            let base = idx4(co, oh, ow, oc, 0, 0, ni);
            out[base..base + oh * ow].fill(b);
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weight[((oc * ci + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_ox_range(w, ow, stride, padding, kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let in_row = idx4(ci, h, w, ic, iy as usize, 0, ni);
                            let out_row = idx4(co, oh, ow, oc, oy, 0, ni);
                            let ix0 = (ox_lo * stride + kx) as isize - padding as isize;
                            debug_assert!(ix0 >= 0);
                            let ix0 = ix0 as usize;
                            if stride == 1 {
                                let len = ox_hi - ox_lo;
                                let dst = &mut out[out_row + ox_lo..out_row + ox_lo + len];
                                let src = &input[in_row + ix0..in_row + ix0 + len];
                                for (o, i) in dst.iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            } else {
                                for (step, ox) in (ox_lo..ox_hi).enumerate() {
                                    out[out_row + ox] += wv * input[in_row + ix0 + step * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates conv gradients into the provided buffers (any may be empty to skip).
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub(crate) fn conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    weight: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    grad_input: &mut [f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) {
    let want_input = !grad_input.is_empty();
    let want_weight = !grad_weight.is_empty();
    let want_bias = !grad_bias.is_empty();
    for ni in 0..n {
        for oc in 0..co {
            if want_bias {
                let out_base = idx4(co, oh, ow, oc, 0, 0, ni);
                let mut acc = 0.0;
                for g in &grad_out[out_base..out_base + oh * ow] {
                    acc += *g;
                }
                grad_bias[oc] += acc;
            }
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((oc * ci + ic) * kh + ky) * kw + kx;
                        let wv = weight[widx];
                        let (ox_lo, ox_hi) = valid_ox_range(w, ow, stride, padding, kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut wacc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let in_row = idx4(ci, h, w, ic, iy as usize, 0, ni);
                            let out_row = idx4(co, oh, ow, oc, oy, 0, ni);
                            let ix0 = ox_lo * stride + kx - padding;
                            if stride == 1 {
                                let len = ox_hi - ox_lo;
                                let g_row = &grad_out[out_row + ox_lo..out_row + ox_lo + len];
                                if want_weight {
                                    let src = &input[in_row + ix0..in_row + ix0 + len];
                                    for (g, i) in g_row.iter().zip(src) {
                                        wacc += g * i;
                                    }
                                }
                                if want_input {
                                    let dst = &mut grad_input[in_row + ix0..in_row + ix0 + len];
                                    for (d, g) in dst.iter_mut().zip(g_row) {
                                        *d += g * wv;
                                    }
                                }
                            } else {
                                for (step, ox) in (ox_lo..ox_hi).enumerate() {
                                    let g = grad_out[out_row + ox];
                                    let ix = ix0 + step * stride;
                                    if want_weight {
                                        wacc += g * input[in_row + ix];
                                    }
                                    if want_input {
                                        grad_input[in_row + ix] += g * wv;
                                    }
                                }
                            }
                        }
                        if want_weight {
                            grad_weight[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in scan order
/// (top-left, top-right, bottom-left, bottom-right).
pub(crate) fn maxpool2x2_forward(input: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let r0 = idx4(c, h, w, ci, 2 * oy, 0, ni);
                let r1 = idx4(c, h, w, ci, 2 * oy + 1, 0, ni);
                let orow = idx4(c, oh, ow, ci, oy, 0, ni);
                for ox in 0..ow {
                    let x = 2 * ox;
                    let mut m = input[r0 + x];
                    if input[r0 + x + 1] > m {
                        m = input[r0 + x + 1];
                    }
                    if input[r1 + x] > m {
                        m = input[r1 + x];
                    }
                    if input[r1 + x + 1] > m {
                        m = input[r1 + x + 1];
                    }
                    out[orow + ox] = m;
                }
            }
        }
    }
    out
}

pub(crate) fn maxpool2x2_backward(
    grad_out: &[f64],
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    grad_input: &mut [f64],
) {
    let (oh, ow) = (h / 2, w / 2);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let r0 = idx4(c, h, w, ci, 2 * oy, 0, ni);
                let r1 = idx4(c, h, w, ci, 2 * oy + 1, 0, ni);
                let orow = idx4(c, oh, ow, ci, oy, 0, ni);
                for ox in 0..ow {
                    let x = 2 * ox;
                    // Same scan order as the forward pass so ties route identically.
                    let cand = [r0 + x, r0 + x + 1, r1 + x, r1 + x + 1];
                    let mut best = cand[0];
                    for &i in &cand[1..] {
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                    grad_input[best] += grad_out[orow + ox];
                }
            }
        }
    }
}

/// Source coordinate for 2x upsampling, align-corners-false convention:
/// centers at (i + 0.5) / 2 - 0.5.
#[inline]
fn up2_src(i: usize) -> f64 {
    (i as f64 + 0.5) / 2.0 - 0.5
}

/// Splits a source coordinate into (low index, high index, high weight),
/// clamping both taps to [0, extent-1].
#[inline]
fn lerp_taps(src: f64, extent: usize) -> (usize, usize, f64) {
    let floor = src.floor();
    let frac = src - floor;
    let lo = floor as isize;
    let hi = lo + 1;
    let clamp = |v: isize| v.clamp(0, extent as isize - 1) as usize;
    (clamp(lo), clamp(hi), frac)
}

pub(crate) fn upsample_bilinear2x_forward(input: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = lerp_taps(up2_src(oy), h);
                let r0 = idx4(c, h, w, ci, y0, 0, ni);
                let r1 = idx4(c, h, w, ci, y1, 0, ni);
                let orow = idx4(c, oh, ow, ci, oy, 0, ni);
                for ox in 0..ow {
                    let (x0, x1, fx) = lerp_taps(up2_src(ox), w);
                    let top = input[r0 + x0] * (1.0 - fx) + input[r0 + x1] * fx;
                    let bot = input[r1 + x0] * (1.0 - fx) + input[r1 + x1] * fx;
                    out[orow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear2x_backward(
    grad_out: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    grad_input: &mut [f64],
) {
    let (oh, ow) = (2 * h, 2 * w);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = lerp_taps(up2_src(oy), h);
                let r0 = idx4(c, h, w, ci, y0, 0, ni);
                let r1 = idx4(c, h, w, ci, y1, 0, ni);
                let orow = idx4(c, oh, ow, ci, oy, 0, ni);
                for ox in 0..ow {
                    let (x0, x1, fx) = lerp_taps(up2_src(ox), w);
                    let g = grad_out[orow + ox];
                    grad_input[r0 + x0] += g * (1.0 - fy) * (1.0 - fx);
                    grad_input[r0 + x1] += g * (1.0 - fy) * fx;
                    grad_input[r1 + x0] += g * fy * (1.0 - fx);
                    grad_input[r1 + x1] += g * fy * fx;
                }
            }
        }
    }
}

pub(crate) fn upsample_nearest2x_forward(input: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let irow = idx4(c, h, w, ci, oy / 2, 0, ni);
                let orow = idx4(c, oh, ow, ci, oy, 0, ni);
                for ox in 0..ow {
                    out[orow + ox] = input[irow + ox / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest2x_backward(
    grad_out: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    grad_input: &mut [f64],
) {
    let (oh, ow) = (2 * h, 2 * w);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let irow = idx4(c, h, w, ci, oy / 2, 0, ni);
                let orow = idx4(c, oh, ow, ci, oy, 0, ni);
                for ox in 0..ow {
                    grad_input[irow + ox / 2] += grad_out[orow + ox];
                }
            }
        }
    }
}

/// Per-channel batch statistics over the N, H, W axes (biased variance).
pub(crate) fn batch_stats(input: &[f64], n: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut acc = 0.0;
        for ni in 0..n {
            let base = idx4(c, h, w, ci, 0, 0, ni);
            for v in &input[base..base + h * w] {
                acc += *v;
            }
        }
        mean[ci] = acc / count;
        let m = mean[ci];
        let mut vacc = 0.0;
        for ni in 0..n {
            let base = idx4(c, h, w, ci, 0, 0, ni);
            for v in &input[base..base + h * w] {
                let d = *v - m;
                vacc += d * d;
            }
        }
        var[ci] = vacc / count;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_forward(
    input: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for ci in 0..c {
        let inv_std = 1.0 / (var[ci] + eps).sqrt();
        let (g, b, m) = (gamma[ci], beta[ci], mean[ci]);
        for ni in 0..n {
            let base = idx4(c, h, w, ci, 0, 0, ni);
            for i in base..base + h * w {
                out[i] = (input[i] - m) * inv_std * g + b;
            }
        }
    }
    out
}

/// Training-mode batchnorm backward (statistics were computed from this batch).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward_training(
    grad_out: &[f64],
    input: &[f64],
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    grad_input: &mut [f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) {
    let count = (n * h * w) as f64;
    for ci in 0..c {
        let inv_std = 1.0 / (var[ci] + eps).sqrt();
        let m = mean[ci];
        let mut sum_g = 0.0;
        let mut sum_g_xhat = 0.0;
        for ni in 0..n {
            let base = idx4(c, h, w, ci, 0, 0, ni);
            for i in base..base + h * w {
                let xhat = (input[i] - m) * inv_std;
                sum_g += grad_out[i];
                sum_g_xhat += grad_out[i] * xhat;
            }
        }
        if !grad_gamma.is_empty() {
            grad_gamma[ci] += sum_g_xhat;
        }
        if !grad_beta.is_empty() {
            grad_beta[ci] += sum_g;
        }
        if !grad_input.is_empty() {
            let scale = gamma[ci] * inv_std;
            for ni in 0..n {
                let base = idx4(c, h, w, ci, 0, 0, ni);
                for i in base..base + h * w {
                    let xhat = (input[i] - m) * inv_std;
                    grad_input[i] += scale * (grad_out[i] - sum_g / count - xhat * sum_g_xhat / count);
                }
            }
        }
    }
}

/// Eval-mode batchnorm backward (statistics are constants).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward_eval(
    grad_out: &[f64],
    input: &[f64],
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    grad_input: &mut [f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) {
    for ci in 0..c {
        let inv_std = 1.0 / (var[ci] + eps).sqrt();
        let m = mean[ci];
        let scale = gamma[ci] * inv_std;
        for ni in 0..n {
            let base = idx4(c, h, w, ci, 0, 0, ni);
            for i in base..base + h * w {
                if !grad_input.is_empty() {
                    grad_input[i] += grad_out[i] * scale;
                }
                if !grad_gamma.is_empty() {
                    grad_gamma[ci] += grad_out[i] * (input[i] - m) * inv_std;
                }
                if !grad_beta.is_empty() {
                    grad_beta[ci] += grad_out[i];
                }
            }
        }
    }
}

/// Full cost volume: cost[d, y, x] = mean over channels of |L[y, x] - R[y, x-d]|.
/// Out-of-range candidates (x - d < 0) take the maximum in-bounds cost at that
/// (y, x) so a softmax over negated costs never favours them.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cost_volume_full_forward(
    left: &[f64],
    right: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    d_count: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * d_count * h * w];
    let inv_c = 1.0 / c as f64;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut max_cost = f64::NEG_INFINITY;
                for d in 0..d_count.min(x + 1) {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let l = left[idx4(c, h, w, ci, y, x, ni)];
                        let r = right[idx4(c, h, w, ci, y, x - d, ni)];
                        acc += (l - r).abs();
                    }
                    let cost = acc * inv_c;
                    out[idx4(d_count, h, w, d, y, x, ni)] = cost;
                    if cost > max_cost {
                        max_cost = cost;
                    }
                }
                for d in (x + 1)..d_count {
                    out[idx4(d_count, h, w, d, y, x, ni)] = max_cost;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn cost_volume_full_backward(
    grad_out: &[f64],
    left: &[f64],
    right: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    d_count: usize,
    grad_left: &mut [f64],
    grad_right: &mut [f64],
) {
    let inv_c = 1.0 / c as f64;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let valid = d_count.min(x + 1);
                // Recompute in-bounds costs to find the fill source (first max).
                let mut costs = [0.0f64; 0].to_vec();
                costs.reserve(valid);
                for d in 0..valid {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let l = left[idx4(c, h, w, ci, y, x, ni)];
                        let r = right[idx4(c, h, w, ci, y, x - d, ni)];
                        acc += (l - r).abs();
                    }
                    costs.push(acc * inv_c);
                }
                let mut arg_max = 0;
                for d in 1..valid {
                    if costs[d] > costs[arg_max] {
                        arg_max = d;
                    }
                }
                for d in 0..valid {
                    let mut g = grad_out[idx4(d_count, h, w, d, y, x, ni)];
                    if d == arg_max {
                        // Filled out-of-range candidates alias the max in-bounds cost.
                        for dd in valid..d_count {
                            g += grad_out[idx4(d_count, h, w, dd, y, x, ni)];
                        }
                    }
                    if g == 0.0 {
                        continue;
                    }
                    let gc = g * inv_c;
                    for ci in 0..c {
                        let li = idx4(c, h, w, ci, y, x, ni);
                        let ri = idx4(c, h, w, ci, y, x - d, ni);
                        let s = (left[li] - right[ri]).signum_or_zero();
                        grad_left[li] += gc * s;
                        grad_right[ri] -= gc * s;
                    }
                }
            }
        }
    }
}

/// Residual cost volume over offsets -k..=k against pre-warped right features.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cost_volume_residual_forward(
    left: &[f64],
    right_warped: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<f64> {
    let d_count = 2 * k + 1;
    let mut out = vec![0.0; n * d_count * h * w];
    let inv_c = 1.0 / c as f64;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut max_cost = f64::NEG_INFINITY;
                let mut any = false;
                for d in 0..d_count {
                    let offset = d as isize - k as isize;
                    let xr = x as isize - offset;
                    if xr < 0 || xr as usize >= w {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let l = left[idx4(c, h, w, ci, y, x, ni)];
                        let r = right_warped[idx4(c, h, w, ci, y, xr as usize, ni)];
                        acc += (l - r).abs();
                    }
                    let cost = acc * inv_c;
                    out[idx4(d_count, h, w, d, y, x, ni)] = cost;
                    if cost > max_cost {
                        max_cost = cost;
                    }
                    any = true;
                }
                debug_assert!(any, "offset 0 is always in bounds");
                for d in 0..d_count {
                    let offset = d as isize - k as isize;
                    let xr = x as isize - offset;
                    if xr < 0 || xr as usize >= w {
                        out[idx4(d_count, h, w, d, y, x, ni)] = max_cost;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn cost_volume_residual_backward(
    grad_out: &[f64],
    left: &[f64],
    right_warped: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    grad_left: &mut [f64],
    grad_right: &mut [f64],
) {
    let d_count = 2 * k + 1;
    let inv_c = 1.0 / c as f64;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut costs = vec![f64::NAN; d_count];
                let mut arg_max = usize::MAX;
                for d in 0..d_count {
                    let offset = d as isize - k as isize;
                    let xr = x as isize - offset;
                    if xr < 0 || xr as usize >= w {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let l = left[idx4(c, h, w, ci, y, x, ni)];
                        let r = right_warped[idx4(c, h, w, ci, y, xr as usize, ni)];
                        acc += (l - r).abs();
                    }
                    costs[d] = acc * inv_c;
                    if arg_max == usize::MAX || costs[d] > costs[arg_max] {
                        arg_max = d;
                    }
                }
                for d in 0..d_count {
                    let offset = d as isize - k as isize;
                    let xr = x as isize - offset;
                    if xr < 0 || xr as usize >= w {
                        continue;
                    }
                    let mut g = grad_out[idx4(d_count, h, w, d, y, x, ni)];
                    if d == arg_max {
                        for dd in 0..d_count {
                            let off2 = dd as isize - k as isize;
                            let xr2 = x as isize - off2;
                            if xr2 < 0 || xr2 as usize >= w {
                                g += grad_out[idx4(d_count, h, w, dd, y, x, ni)];
                            }
                        }
                    }
                    if g == 0.0 {
                        continue;
                    }
                    let gc = g * inv_c;
                    for ci in 0..c {
                        let li = idx4(c, h, w, ci, y, x, ni);
                        let ri = idx4(c, h, w, ci, y, xr as usize, ni);
                        let s = (left[li] - right_warped[ri]).signum_or_zero();
                        grad_left[li] += gc * s;
                        grad_right[ri] -= gc * s;
                    }
                }
            }
        }
    }
}

/// Horizontal warp: out[c, y, x] = features sampled at (y, x - disparity(y, x))
/// with linear interpolation; sample taps clamp to the row edges.
pub(crate) fn warp_forward(
    features: &[f64],
    disparity: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let d = disparity[idx4(1, h, w, 0, y, x, ni)];
                let (x0, x1, f) = lerp_taps(x as f64 - d, w);
                for ci in 0..c {
                    let base = idx4(c, h, w, ci, y, 0, ni);
                    out[base + x] = features[base + x0] * (1.0 - f) + features[base + x1] * f;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_backward(
    grad_out: &[f64],
    features: &[f64],
    disparity: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    grad_features: &mut [f64],
    grad_disparity: &mut [f64],
) {
    let want_features = !grad_features.is_empty();
    let want_disparity = !grad_disparity.is_empty();
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let di = idx4(1, h, w, 0, y, x, ni);
                let (x0, x1, f) = lerp_taps(x as f64 - disparity[di], w);
                let mut d_acc = 0.0;
                for ci in 0..c {
                    let base = idx4(c, h, w, ci, y, 0, ni);
                    let g = grad_out[base + x];
                    if want_features {
                        grad_features[base + x0] += g * (1.0 - f);
                        grad_features[base + x1] += g * f;
                    }
                    // d out / d src = f1 - f0; d src / d disparity = -1.
                    d_acc += g * (features[base + x1] - features[base + x0]);
                }
                if want_disparity {
                    grad_disparity[di] -= d_acc;
                }
            }
        }
    }
}

/// One directional spatial-propagation scan.
///
/// out(p) = (1 - sum_i w_i(p)) * in(p) + sum_i w_i(p) * prev_i, where prev_i is
/// the already-propagated value at the i-th upstream neighbour, or in(p) when
/// that neighbour falls outside the map. With non-negative weights summing to
/// at most 1 every output is a convex combination of input values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ScanDir {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
}

impl ScanDir {
    /// (dy, dx) offsets of the three upstream neighbours.
    fn neighbours(self) -> [(isize, isize); 3] {
        match self {
            ScanDir::LeftToRight => [(-1, -1), (0, -1), (1, -1)],
            ScanDir::RightToLeft => [(-1, 1), (0, 1), (1, 1)],
            ScanDir::TopToBottom => [(-1, -1), (-1, 0), (-1, 1)],
            ScanDir::BottomToTop => [(1, -1), (1, 0), (1, 1)],
        }
    }

    /// Cell visit order as (primary axis is x?, forward?).
    fn order(self) -> (bool, bool) {
        match self {
            ScanDir::LeftToRight => (true, true),
            ScanDir::RightToLeft => (true, false),
            ScanDir::TopToBottom => (false, true),
            ScanDir::BottomToTop => (false, false),
        }
    }
}

fn scan_positions(dir: ScanDir, h: usize, w: usize) -> Vec<(usize, usize)> {
    let (x_primary, forward) = dir.order();
    let mut order = Vec::with_capacity(h * w);
    if x_primary {
        let xs: Vec<usize> = if forward { (0..w).collect() } else { (0..w).rev().collect() };
        for &x in &xs {
            for y in 0..h {
                order.push((y, x));
            }
        }
    } else {
        let ys: Vec<usize> = if forward { (0..h).collect() } else { (0..h).rev().collect() };
        for &y in &ys {
            for x in 0..w {
                order.push((y, x));
            }
        }
    }
    order
}

pub(crate) fn spn_scan_forward(
    input: &[f64],
    weights: [&[f64]; 3],
    dir: ScanDir,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * c * h * w];
    let nbr = dir.neighbours();
    let order = scan_positions(dir, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for &(y, x) in &order {
                let i = idx4(c, h, w, ci, y, x, ni);
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (wi, &(dy, dx)) in nbr.iter().enumerate() {
                    let wv = weights[wi][i];
                    wsum += wv;
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    let prev = if ny >= 0 && (ny as usize) < h && nx >= 0 && (nx as usize) < w {
                        out[idx4(c, h, w, ci, ny as usize, nx as usize, ni)]
                    } else {
                        input[i]
                    };
                    acc += wv * prev;
                }
                out[i] = (1.0 - wsum) * input[i] + acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn spn_scan_backward(
    grad_out: &[f64],
    input: &[f64],
    weights: [&[f64]; 3],
    output: &[f64],
    dir: ScanDir,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    grad_input: &mut [f64],
    grad_weights: [&mut Vec<f64>; 3],
) {
    let nbr = dir.neighbours();
    let order = scan_positions(dir, h, w);
    let mut acc_grad = vec![0.0; grad_out.len()];
    for ni in 0..n {
        for ci in 0..c {
            // Reverse scan order: each cell's gradient is its upstream gradient
            // plus contributions from cells that consumed it.
            for &(y, x) in order.iter().rev() {
                let i = idx4(c, h, w, ci, y, x, ni);
                let g = grad_out[i] + acc_grad[i];
                if g == 0.0 {
                    continue;
                }
                let mut wsum = 0.0;
                for (wi, &(dy, dx)) in nbr.iter().enumerate() {
                    let wv = weights[wi][i];
                    wsum += wv;
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    let (prev, in_bounds) =
                        if ny >= 0 && (ny as usize) < h && nx >= 0 && (nx as usize) < w {
                            (output[idx4(c, h, w, ci, ny as usize, nx as usize, ni)], true)
                        } else {
                            (input[i], false)
                        };
                    // d out / d w_i = prev_i - in(p).
                    grad_weights[wi][i] += g * (prev - input[i]);
                    if in_bounds {
                        acc_grad[idx4(c, h, w, ci, ny as usize, nx as usize, ni)] += g * weights[wi][i];
                    } else {
                        grad_input[i] += g * weights[wi][i];
                    }
                }
                grad_input[i] += g * (1.0 - wsum);
            }
        }
    }
}

/// Sign with the abs-at-zero subgradient convention: sign(0) = 0.
pub(crate) trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    #[inline]
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
