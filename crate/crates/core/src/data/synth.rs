//! Synthetic scene generators with exact ground truth.
//!
//! Stereo scenes are layered: a textured background plus textured rectangles
//! at integer disparities, rendered back-to-front into both views with
//! nearest sampling, so the photometric consistency `left(y, x) ==
//! right(y, x - d)` holds exactly on every valid pixel. Occlusions and
//! out-of-view correspondences are masked out.

use super::{Image, MonoSample, Plane, StereoSample};
use crate::error::{Error, Result};
use crate::rng::DetRng;

#[derive(Debug, Clone)]
pub struct StereoGenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub max_disparity: usize,
}

impl Default for StereoGenConfig {
    fn default() -> Self {
        StereoGenConfig { count: 16, height: 48, width: 96, max_disparity: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct MonoGenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for MonoGenConfig {
    fn default() -> Self {
        MonoGenConfig { count: 24, height: 64, width: 64 }
    }
}

/// A textured layer covering a left-view rectangle at one integer disparity.
struct Layer {
    disparity: usize,
    /// Left-view extent; the background covers the full view.
    x0: isize,
    x1: isize,
    y0: isize,
    y1: isize,
    /// Texture indexed by (y - y0, x - x0), wide enough for both views.
    tex: Vec<f64>,
    tex_w: usize,
}

fn gen_texture(rng: &mut DetRng, h: usize, w: usize) -> Vec<f64> {
    let c0 = [rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9)];
    let c1 = [rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9)];
    let fx = rng.uniform_in(0.15, 0.9);
    let fy = rng.uniform_in(0.15, 0.9);
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let mut tex = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 + 0.5 * (fx * x as f64 + fy * y as f64 + phase).sin();
            let n = rng.uniform_in(-0.04, 0.04);
            for c in 0..3 {
                let v = c0[c] + (c1[c] - c0[c]) * t + n;
                tex[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    tex
}

pub fn gen_synthetic_stereo(seed: u64, config: &StereoGenConfig) -> Result<Vec<StereoSample>> {
    let (h, w, max_disp) = (config.height, config.width, config.max_disparity);
    if h == 0 || w == 0 {
        return Err(Error::arg("stereo generator needs positive extents"));
    }
    if max_disp * 4 >= w {
        return Err(Error::arg(format!(
            "max_disparity {max_disp} must be below width/4 = {}",
            w / 4
        )));
    }
    let mut rng = DetRng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(config.count);
    for _ in 0..config.count {
        samples.push(gen_stereo_scene(&mut rng, h, w, max_disp));
    }
    Ok(samples)
}

fn gen_stereo_scene(rng: &mut DetRng, h: usize, w: usize, max_disp: usize) -> StereoSample {
    let bg_disp = rng.int_in(0, max_disp.min(3));
    let tex_w = w + max_disp;
    let mut layers = vec![Layer {
        disparity: bg_disp,
        x0: 0,
        x1: tex_w as isize,
        y0: 0,
        y1: h as isize,
        tex: gen_texture(rng, h, tex_w),
        tex_w,
    }];
    let rect_count = rng.int_in(3, 8);
    for _ in 0..rect_count {
        let rw = rng.int_in(w / 8, w / 2);
        let rh = rng.int_in(h / 8, h / 2);
        let x0 = rng.int_in(0, w - 1) as isize;
        let y0 = rng.int_in(0, h - 1) as isize;
        // Rectangles sit in front of (or at) the background plane.
        let disparity = rng.int_in(bg_disp, max_disp);
        layers.push(Layer {
            disparity,
            x0,
            x1: x0 + rw as isize,
            y0,
            y1: y0 + rh as isize,
            tex: gen_texture(rng, rh, rw),
            tex_w: rw,
        });
    }
    // Back-to-front: nearer layers (larger disparity) paint last in both
    // views; ties resolve by creation order.
    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.sort_by_key(|&i| (layers[i].disparity, i));

    let mut left = Image::new(3, h, w);
    let mut right = Image::new(3, h, w);
    let mut disparity = Plane::new(h, w);
    let mut left_id = vec![usize::MAX; h * w];
    let mut right_id = vec![usize::MAX; h * w];

    for &li in &order {
        let layer = &layers[li];
        let d = layer.disparity as isize;
        for y in layer.y0.max(0)..layer.y1.min(h as isize) {
            let ty = (y - layer.y0) as usize;
            // Left view occupies [x0, x1).
            for x in layer.x0.max(0)..layer.x1.min(w as isize) {
                let tx = (x - layer.x0) as usize;
                for c in 0..3 {
                    let v = layer.tex[(c * ((layer.y1 - layer.y0) as usize) + ty) * layer.tex_w + tx];
                    left.set(c, y as usize, x as usize, v);
                }
                disparity.set(y as usize, x as usize, layer.disparity as f64);
                left_id[y as usize * w + x as usize] = li;
            }
            // Right view occupies [x0 - d, x1 - d); texture column shifts by +d.
            for x in (layer.x0 - d).max(0)..(layer.x1 - d).min(w as isize) {
                let tx = (x - layer.x0 + d) as usize;
                for c in 0..3 {
                    let v = layer.tex[(c * ((layer.y1 - layer.y0) as usize) + ty) * layer.tex_w + tx];
                    right.set(c, y as usize, x as usize, v);
                }
                right_id[y as usize * w + x as usize] = li;
            }
        }
    }

    // Valid where the correspondence is in view and not occluded.
    let mut mask = Plane::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let d = disparity.at(y, x) as usize;
            if x >= d && right_id[y * w + (x - d)] == left_id[y * w + x] {
                mask.set(y, x, 1.0);
            }
        }
    }
    StereoSample { left, right, disparity, mask }
}

pub fn gen_synthetic_mono(seed: u64, config: &MonoGenConfig) -> Result<Vec<MonoSample>> {
    let (h, w) = (config.height, config.width);
    if h == 0 || w == 0 {
        return Err(Error::arg("mono generator needs positive extents"));
    }
    let mut rng = DetRng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(config.count);
    for _ in 0..config.count {
        samples.push(gen_mono_scene(&mut rng, h, w));
    }
    Ok(samples)
}

fn gen_mono_scene(rng: &mut DetRng, h: usize, w: usize) -> MonoSample {
    let mut depth = Plane::filled(h, w, 1.0);
    struct Rect {
        x0: usize,
        x1: usize,
        y0: usize,
        y1: usize,
        depth: f64,
    }
    let mut rects = Vec::new();
    for _ in 0..rng.int_in(3, 8) {
        let rw = rng.int_in(w / 8, w / 2);
        let rh = rng.int_in(h / 8, h / 2);
        let x0 = rng.int_in(0, w - 1);
        let y0 = rng.int_in(0, h - 1);
        rects.push(Rect {
            x0,
            x1: (x0 + rw).min(w),
            y0,
            y1: (y0 + rh).min(h),
            depth: rng.uniform_in(0.15, 0.85),
        });
    }
    // Paint farthest first so nearer rectangles occlude.
    rects.sort_by(|a, b| b.depth.partial_cmp(&a.depth).expect("finite depths"));
    for r in &rects {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                depth.set(y, x, r.depth);
            }
        }
    }
    // Brightness tracks inverse depth, with mild texture per pixel.
    let mut rgb = Image::new(3, h, w);
    let tint = [rng.uniform_in(0.85, 1.0), rng.uniform_in(0.85, 1.0), rng.uniform_in(0.85, 1.0)];
    let fx = rng.uniform_in(0.2, 0.8);
    let fy = rng.uniform_in(0.2, 0.8);
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let lum = 0.12 + 0.72 * (1.0 - depth.at(y, x));
            let pattern = 0.06 * (fx * x as f64 + fy * y as f64 + phase).sin();
            for (c, t) in tint.iter().enumerate() {
                rgb.set(c, y, x, ((lum + pattern) * t).clamp(0.0, 1.0));
            }
        }
    }
    MonoSample { rgb, depth, mask: Plane::filled(h, w, 1.0) }
}
