//! PFM (portable float map) reader and writer.
//!
//! Header: magic `Pf` (1 channel) or `PF` (3 channels), a dimensions line
//! `width height`, and a scale line whose sign selects endianness (negative =
//! little endian). The payload stores rows bottom-to-top as 32-bit floats.

use super::Plane;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Magnitude of the scale header field.
    pub scale: f64,
    /// Little-endian payload when the scale line was negative.
    pub little_endian: bool,
    /// Row-major, top-to-bottom, channel-interleaved samples.
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn from_plane(p: &Plane) -> Self {
        PfmImage {
            width: p.width,
            height: p.height,
            channels: 1,
            scale: 1.0,
            little_endian: true,
            data: p.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn into_plane(self) -> Result<Plane> {
        if self.channels != 1 {
            return Err(Error::Format("expected single-channel PFM".to_string()));
        }
        Ok(Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f64).collect(),
        })
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize, what: &str) -> Result<&'a [u8]> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format(format!("truncated PFM header: missing {what}")));
    }
    Ok(&bytes[start..*pos])
}

pub fn read_pfm(bytes: &[u8]) -> Result<PfmImage> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos, "magic")?;
    let channels = match magic {
        b"Pf" => 1,
        b"PF" => 3,
        other => {
            return Err(Error::Format(format!(
                "bad PFM magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let parse_usize = |tok: &[u8], what: &str| -> Result<usize> {
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Format(format!("bad PFM {what}")))
    };
    let width = parse_usize(next_token(bytes, &mut pos, "width")?, "width")?;
    let height = parse_usize(next_token(bytes, &mut pos, "height")?, "height")?;
    let scale_tok = next_token(bytes, &mut pos, "scale")?;
    let scale: f64 = std::str::from_utf8(scale_tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad PFM scale".to_string()))?;
    if scale == 0.0 {
        return Err(Error::Format("PFM scale must be non-zero".to_string()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("truncated PFM header".to_string()));
    }
    pos += 1;
    let little_endian = scale < 0.0;
    let count = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "PFM payload has {} bytes, expected {}",
            payload.len(),
            count * 4
        )));
    }
    // Rows are stored bottom-to-top; flip while reading.
    let row_len = width * channels;
    let mut data = vec![0.0f32; count];
    for file_row in 0..height {
        let out_row = height - 1 - file_row;
        for i in 0..row_len {
            let off = (file_row * row_len + i) * 4;
            let raw: [u8; 4] = payload[off..off + 4].try_into().expect("bounded");
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[out_row * row_len + i] = v;
        }
    }
    Ok(PfmImage { width, height, channels, scale: scale.abs(), little_endian, data })
}

pub fn write_pfm(img: &PfmImage) -> Result<Vec<u8>> {
    if img.scale == 0.0 {
        return Err(Error::Format("PFM scale must be non-zero".to_string()));
    }
    if img.data.len() != img.width * img.height * img.channels {
        return Err(Error::Format("PFM data length mismatch".to_string()));
    }
    let magic = match img.channels {
        1 => "Pf",
        3 => "PF",
        other => return Err(Error::Format(format!("PFM supports 1 or 3 channels, got {other}"))),
    };
    let signed_scale = if img.little_endian { -img.scale } else { img.scale };
    let mut out = Vec::with_capacity(32 + img.data.len() * 4);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("{} {}\n", img.width, img.height).as_bytes());
    out.extend_from_slice(format_scale(signed_scale).as_bytes());
    out.push(b'\n');
    let row_len = img.width * img.channels;
    for file_row in 0..img.height {
        let src_row = img.height - 1 - file_row;
        for i in 0..row_len {
            let v = img.data[src_row * row_len + i];
            let raw = if img.little_endian { v.to_le_bytes() } else { v.to_be_bytes() };
            out.extend_from_slice(&raw);
        }
    }
    Ok(out)
}

/// Canonical scale formatting: integral scales print one decimal ("-1.0").
fn format_scale(scale: f64) -> String {
    if scale == scale.trunc() {
        format!("{scale:.1}")
    } else {
        format!("{scale}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_two_by_one_little_endian() {
        let mut bytes = b"Pf\n2 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&2.5f32.to_le_bytes());
        let img = read_pfm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.scale, 1.0);
        assert!(img.little_endian);
        assert_eq!(img.data, vec![1.5, 2.5]);
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"Qf\n1 1\n-1.0\n\x00\x00\x00\x00".to_vec();
        assert!(matches!(read_pfm(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn zero_scale_rejected() {
        let mut bytes = b"Pf\n1 1\n0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(read_pfm(&bytes).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(read_pfm(&bytes).is_err());
    }

    #[test]
    fn write_read_write_is_bitwise_stable() {
        let mut plane = Plane::new(4, 5);
        let mut rng = crate::rng::DetRng::seed_from_u64(2);
        for v in &mut plane.data {
            *v = rng.uniform_in(-10.0, 10.0);
        }
        let img = PfmImage::from_plane(&plane);
        let bytes = write_pfm(&img).unwrap();
        let back = read_pfm(&bytes).unwrap();
        let bytes2 = write_pfm(&back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn big_endian_roundtrip() {
        let img = PfmImage {
            width: 3,
            height: 2,
            channels: 1,
            scale: 2.5,
            little_endian: false,
            data: vec![0.0, 1.0, -2.0, 3.5, 4.25, -0.125],
        };
        let bytes = write_pfm(&img).unwrap();
        let back = read_pfm(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn bottom_to_top_row_order() {
        // 1x2 map: value 7 on the top row, 9 on the bottom row. The file
        // stores the bottom row first.
        let plane = Plane { height: 2, width: 1, data: vec![7.0, 9.0] };
        let bytes = write_pfm(&PfmImage::from_plane(&plane)).unwrap();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(payload[0..4].try_into().unwrap()), 9.0);
        assert_eq!(f32::from_le_bytes(payload[4..8].try_into().unwrap()), 7.0);
    }
}
