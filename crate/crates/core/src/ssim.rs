//! Structural similarity (SSIM) with an 11x11 Gaussian window (sigma 1.5),
//! computed on the tape so it can serve as a differentiable loss term.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 2-D Gaussian window as a 1x1xKxK conv kernel.
fn gaussian_window() -> Tensor {
    let mut g1 = [0.0f64; SSIM_WINDOW];
    let center = (SSIM_WINDOW / 2) as f64;
    let denom = 2.0 * SSIM_SIGMA * SSIM_SIGMA;
    let mut sum = 0.0;
    for (i, v) in g1.iter_mut().enumerate() {
        *v = (-(i as f64 - center).powi(2) / denom).exp();
        sum += *v;
    }
    for v in &mut g1 {
        *v /= sum;
    }
    let mut kernel = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            kernel[y * SSIM_WINDOW + x] = g1[y] * g1[x];
        }
    }
    Tensor::new(vec![1, 1, SSIM_WINDOW, SSIM_WINDOW], kernel).expect("window buffer consistent")
}

/// Mean local SSIM between two NCHW tensors; scalar in [-1, 1].
///
/// Windows are valid-only (no padding); multi-channel inputs average the
/// per-channel means. Differentiable with respect to both images.
pub fn ssim(tape: &mut Tape, x: TensorId, y: TensorId, max_val: f64) -> Result<TensorId> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::shape(format!(
            "ssim: {:?} vs {:?}",
            tape.shape(x),
            tape.shape(y)
        )));
    }
    if max_val <= 0.0 {
        return Err(Error::arg("ssim: max_val must be positive"));
    }
    let (_, c, h, w) = tape.value(x).dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim: window {SSIM_WINDOW} exceeds image extents {h}x{w}"
        )));
    }
    let c1 = (SSIM_K1 * max_val).powi(2);
    let c2 = (SSIM_K2 * max_val).powi(2);
    let window = gaussian_window();
    let zero_bias = Tensor::zeros(vec![1]);

    let mut channel_means = Vec::with_capacity(c);
    for ch in 0..c {
        let xc = if c == 1 { x } else { tape.narrow(x, 1, ch, 1)? };
        let yc = if c == 1 { y } else { tape.narrow(y, 1, ch, 1)? };
        let win = tape.constant(window.clone());
        let bias = tape.constant(zero_bias.clone());
        let blur = |tape: &mut Tape, t: TensorId| tape.conv2d(t, win, bias, 1, 0);

        let mu_x = blur(tape, xc)?;
        let mu_y = blur(tape, yc)?;
        let xx = tape.mul(xc, xc)?;
        let yy = tape.mul(yc, yc)?;
        let xy = tape.mul(xc, yc)?;
        let mu_xx = tape.mul(mu_x, mu_x)?;
        let mu_yy = tape.mul(mu_y, mu_y)?;
        let mu_xy = tape.mul(mu_x, mu_y)?;
        let exx = blur(tape, xx)?;
        let eyy = blur(tape, yy)?;
        let exy = blur(tape, xy)?;
        let var_x = tape.sub(exx, mu_xx)?;
        let var_y = tape.sub(eyy, mu_yy)?;
        let cov = tape.sub(exy, mu_xy)?;

        // ((2 mu_x mu_y + C1)(2 cov + C2)) / ((mu_x^2 + mu_y^2 + C1)(var_x + var_y + C2))
        let l_num = tape.affine(mu_xy, 2.0, c1)?;
        let cs_num = tape.affine(cov, 2.0, c2)?;
        let mu_sum = tape.add(mu_xx, mu_yy)?;
        let l_den = tape.affine(mu_sum, 1.0, c1)?;
        let var_sum = tape.add(var_x, var_y)?;
        let cs_den = tape.affine(var_sum, 1.0, c2)?;
        let num = tape.mul(l_num, cs_num)?;
        let den = tape.mul(l_den, cs_den)?;
        let map = tape.div(num, den)?;
        channel_means.push(tape.mean(map)?);
    }
    let mut acc = channel_means[0];
    for &m in &channel_means[1..] {
        acc = tape.add(acc, m)?;
    }
    tape.scale(acc, 1.0 / c as f64)
}

/// (1 - SSIM) / 2, the loss form.
pub fn ssim_loss(tape: &mut Tape, x: TensorId, y: TensorId, max_val: f64) -> Result<TensorId> {
    let s = ssim(tape, x, y, max_val)?;
    tape.affine(s, -0.5, 0.5)
}

/// Convenience: SSIM of two plain tensors, no gradients.
pub fn ssim_value(x: &Tensor, y: &Tensor, max_val: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let b = tape.constant(y.clone());
    let s = ssim(&mut tape, a, b, max_val)?;
    Ok(tape.value(s).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = DetRng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| rng.uniform()).collect();
        Tensor::new(vec![1, 1, h, w], data).unwrap()
    }

    #[test]
    fn identity_is_one() {
        let x = random_image(1, 16, 16);
        let s = ssim_value(&x, &x, 1.0).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim(x,x) = {s}");
    }

    #[test]
    fn symmetric_in_its_arguments() {
        let x = random_image(2, 14, 18);
        let y = random_image(3, 14, 18);
        let a = ssim_value(&x, &y, 1.0).unwrap();
        let b = ssim_value(&y, &x, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn constant_zero_vs_one_closed_form() {
        let x = Tensor::zeros(vec![1, 1, 12, 12]);
        let y = Tensor::full(vec![1, 1, 12, 12], 1.0);
        let s = ssim_value(&x, &y, 1.0).unwrap();
        let c1 = 1e-4;
        let expected = c1 / (1.0 + c1);
        assert!((s - expected).abs() < 1e-7, "{s} vs {expected}");
        assert!((s - 9.999e-5).abs() < 1e-7);
    }

    #[test]
    fn bounded_by_one_in_magnitude() {
        for seed in 0..20 {
            let x = random_image(100 + seed, 13, 15);
            let y = random_image(200 + seed, 13, 15);
            let s = ssim_value(&x, &y, 1.0).unwrap();
            assert!(s.abs() <= 1.0 + 1e-12, "ssim {s} out of range");
        }
    }

    #[test]
    fn window_larger_than_image_is_error() {
        let x = Tensor::zeros(vec![1, 1, 8, 8]);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x);
        assert!(ssim(&mut tape, a, b, 1.0).is_err());
    }

    #[test]
    fn differentiable_towards_the_target() {
        // Moving the prediction toward the target should reduce (1-ssim)/2.
        let target = random_image(7, 16, 16);
        let mut rng = DetRng::seed_from_u64(8);
        let pred: Vec<f64> = target.data().iter().map(|v| v + 0.2 * rng.uniform()).collect();
        let pred = Tensor::new(vec![1, 1, 16, 16], pred).unwrap();

        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone(), true);
        let t = tape.constant(target.clone());
        let loss = ssim_loss(&mut tape, p, t, 1.0).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(p).unwrap().to_vec();
        let step: Vec<f64> = pred
            .data()
            .iter()
            .zip(&grad)
            .map(|(v, g)| v - 0.5 * g)
            .collect();
        let stepped = Tensor::new(vec![1, 1, 16, 16], step).unwrap();
        let before = ssim_value(&pred, &target, 1.0).unwrap();
        let after = ssim_value(&stepped, &target, 1.0).unwrap();
        assert!(after > before, "gradient step should raise ssim: {before} -> {after}");
    }
}
