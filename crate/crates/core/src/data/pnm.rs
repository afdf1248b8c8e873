//! Binary PPM (P6) and PGM (P5) with 8-bit samples, maxval 255.
//!
//! Values map to [0, 1] by dividing by 255 on read; writing rounds to the
//! nearest 8-bit level, so a write/read roundtrip stays within 1/510 per
//! element.

use super::Image;
use crate::error::{Error, Result};

fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            return;
        }
    }
}

fn read_header_int(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    skip_ws_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format(format!("missing {what} in PNM header")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad {what} in PNM header")))
}

fn read_pnm(bytes: &[u8], magic: &[u8], channels: usize) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Format(format!(
            "expected binary {} header, got {:?} (ascii variants unsupported)",
            String::from_utf8_lossy(magic),
            got
        )));
    }
    let mut pos = 2;
    let width = read_header_int(bytes, &mut pos, "width")?;
    let height = read_header_int(bytes, &mut pos, "height")?;
    let maxval = read_header_int(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("only maxval 255 supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero PNM dimensions".to_string()));
    }
    // Single whitespace byte after maxval, then raw samples.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("truncated PNM header".to_string()));
    }
    pos += 1;
    let count = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() != count {
        return Err(Error::Format(format!(
            "PNM payload has {} bytes, expected {count}",
            payload.len()
        )));
    }
    // File order is row-major interleaved; store channel-planar.
    let mut img = Image::new(channels, height, width);
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let v = payload[(y * width + x) * channels + c] as f64 / 255.0;
                img.set(c, y, x, v);
            }
        }
    }
    Ok(img)
}

fn write_pnm(img: &Image, magic: &str, channels: usize) -> Result<Vec<u8>> {
    if img.channels != channels {
        return Err(Error::Format(format!(
            "{magic} expects {channels} channels, image has {}",
            img.channels
        )));
    }
    let mut out = Vec::with_capacity(32 + img.data.len());
    out.extend_from_slice(magic.as_bytes());
    out.extend_from_slice(format!("\n{} {}\n255\n", img.width, img.height).as_bytes());
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..channels {
                let q = (img.at(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
                out.push(q);
            }
        }
    }
    Ok(out)
}

pub fn read_ppm(bytes: &[u8]) -> Result<Image> {
    read_pnm(bytes, b"P6", 3)
}

pub fn read_pgm(bytes: &[u8]) -> Result<Image> {
    read_pnm(bytes, b"P5", 1)
}

pub fn write_ppm(img: &Image) -> Result<Vec<u8>> {
    write_pnm(img, "P6", 3)
}

pub fn write_pgm(img: &Image) -> Result<Vec<u8>> {
    write_pnm(img, "P5", 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_roundtrip_exact() {
        let img = Image::new(3, 4, 5);
        let back = read_ppm(&write_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn full_scale_maps_to_one() {
        let mut img = Image::new(1, 1, 1);
        img.set(0, 0, 0, 1.0);
        let bytes = write_pgm(&img).unwrap();
        assert_eq!(*bytes.last().unwrap(), 255);
        let back = read_pgm(&bytes).unwrap();
        assert_eq!(back.at(0, 0, 0), 1.0);
    }

    #[test]
    fn roundtrip_within_quantization_bound() {
        let mut rng = crate::rng::DetRng::seed_from_u64(3);
        let mut img = Image::new(3, 6, 7);
        for v in &mut img.data {
            *v = rng.uniform();
        }
        let back = read_ppm(&write_ppm(&img).unwrap()).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ascii_variant_rejected() {
        let bytes = b"P3\n1 1\n255\n0 0 0\n".to_vec();
        assert!(read_ppm(&bytes).is_err());
    }

    #[test]
    fn wrong_maxval_rejected() {
        let bytes = b"P5\n1 1\n65535\n\x00\x00".to_vec();
        assert!(read_pgm(&bytes).is_err());
    }
}
