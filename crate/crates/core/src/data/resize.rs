//! Bilinear resizing with the align-corners-false convention (sample centers
//! at (i + 0.5) / scale - 0.5), matching the tape's 2x upsampling.

use super::{Image, Plane};
use crate::error::{Error, Result};

fn taps(dst: usize, src_extent: usize, out_extent: usize, i: usize) -> (usize, usize, f64) {
    let _ = dst;
    let scale = src_extent as f64 / out_extent as f64;
    let src = (i as f64 + 0.5) * scale - 0.5;
    let floor = src.floor();
    let frac = src - floor;
    let lo = (floor as isize).clamp(0, src_extent as isize - 1) as usize;
    let hi = ((floor as isize) + 1).clamp(0, src_extent as isize - 1) as usize;
    (lo, hi, frac)
}

fn resize_channel(
    src: &[f64],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    dst: &mut [f64],
) {
    for oy in 0..out_h {
        let (y0, y1, fy) = taps(oy, in_h, out_h, oy);
        for ox in 0..out_w {
            let (x0, x1, fx) = taps(ox, in_w, out_w, ox);
            let top = src[y0 * in_w + x0] * (1.0 - fx) + src[y0 * in_w + x1] * fx;
            let bot = src[y1 * in_w + x0] * (1.0 - fx) + src[y1 * in_w + x1] * fx;
            dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
}

pub fn resize_bilinear_plane(plane: &Plane, out_h: usize, out_w: usize) -> Result<Plane> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("resize target extents must be positive"));
    }
    if (out_h, out_w) == (plane.height, plane.width) {
        return Ok(plane.clone());
    }
    let mut out = Plane::new(out_h, out_w);
    resize_channel(&plane.data, plane.height, plane.width, out_h, out_w, &mut out.data);
    Ok(out)
}

pub fn resize_bilinear_image(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("resize target extents must be positive"));
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let mut out = Image::new(img.channels, out_h, out_w);
    for c in 0..img.channels {
        let src = &img.data[c * img.height * img.width..(c + 1) * img.height * img.width];
        let dst = &mut out.data[c * out_h * out_w..(c + 1) * out_h * out_w];
        resize_channel(src, img.height, img.width, out_h, out_w, dst);
    }
    Ok(out)
}

/// Resizes a disparity map; values additionally scale by out_w / in_w because
/// disparities are measured in pixels of the new width.
pub fn resize_disparity(disp: &Plane, out_h: usize, out_w: usize) -> Result<Plane> {
    let factor = out_w as f64 / disp.width as f64;
    let mut out = resize_bilinear_plane(disp, out_h, out_w)?;
    for v in &mut out.data {
        *v *= factor;
    }
    Ok(out)
}
