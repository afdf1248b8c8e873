//! Datasets, file formats, synthetic scene generation, and geometry export.

mod pfm;
mod pnm;
mod resize;
mod synth;

pub use pfm::{read_pfm, write_pfm, PfmImage};
pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use resize::{resize_bilinear_image, resize_bilinear_plane, resize_disparity};
pub use synth::{gen_synthetic_mono, gen_synthetic_stereo, MonoGenConfig, StereoGenConfig};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Interleaved-channel-free CHW image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Image { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.channels, self.height, self.width], self.data.clone())
            .expect("image buffer consistent")
    }
}

/// Single-channel float map (depth, disparity, or validity mask).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize) -> Self {
        Plane { height, width, data: vec![0.0; height * width] }
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Plane { height, width, data: vec![v; height * width] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone())
            .expect("plane buffer consistent")
    }
}

/// RGB image with normalized depth in [0, 1] and a validity mask.
#[derive(Debug, Clone)]
pub struct MonoSample {
    pub rgb: Image,
    pub depth: Plane,
    pub mask: Plane,
}

/// Rectified pair with ground-truth left disparity in pixels.
#[derive(Debug, Clone)]
pub struct StereoSample {
    pub left: Image,
    pub right: Image,
    pub disparity: Plane,
    pub mask: Plane,
}

/// Stacks images into an NCHW batch tensor.
pub fn batch_images(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::arg("empty batch"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::shape("batch images must share extents".to_string()));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Stacks planes into an Nx1xHxW batch tensor.
pub fn batch_planes(planes: &[&Plane]) -> Result<Tensor> {
    let first = planes.first().ok_or_else(|| Error::arg("empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        if (p.height, p.width) != (h, w) {
            return Err(Error::shape("batch planes must share extents".to_string()));
        }
        data.extend_from_slice(&p.data);
    }
    Tensor::new(vec![planes.len(), 1, h, w], data)
}

// ── Depth normalization ─────────────────────────────────────────────────

/// Clips to [d_min, d_max] and affinely maps to [0, 1].
pub fn normalize_depth(depth: &Plane, d_min: f64, d_max: f64) -> Result<Plane> {
    if d_max <= d_min {
        return Err(Error::arg(format!("normalize_depth: d_max {d_max} must exceed d_min {d_min}")));
    }
    let scale = 1.0 / (d_max - d_min);
    let data = depth
        .data
        .iter()
        .map(|&v| ((v.clamp(d_min, d_max)) - d_min) * scale)
        .collect();
    Ok(Plane { height: depth.height, width: depth.width, data })
}

// ── Point clouds ────────────────────────────────────────────────────────

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::arg("focal lengths must be positive"));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }
}

/// Back-projects valid pixels: X = (x-cx)Z/fx, Y = (y-cy)Z/fy, Z = depth.
pub fn depth_to_pointcloud(depth: &Plane, intrinsics: &CameraIntrinsics, mask: &Plane) -> Vec<[f64; 3]> {
    let mut points = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            if mask.at(y, x) == 0.0 {
                continue;
            }
            let z = depth.at(y, x);
            points.push([
                (x as f64 - intrinsics.cx) * z / intrinsics.fx,
                (y as f64 - intrinsics.cy) * z / intrinsics.fy,
                z,
            ]);
        }
    }
    points
}

// ── Dataset index and manifests ─────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mono,
    Stereo,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mono => "mono",
            DatasetKind::Stereo => "stereo",
        }
    }
}

/// One sample's file paths, relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleDescriptor {
    pub files: Vec<String>,
}

/// Ordered list of sample descriptors plus normalization metadata.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub kind: DatasetKind,
    pub depth_min: f64,
    pub depth_max: f64,
    pub samples: Vec<SampleDescriptor>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Line-oriented text manifest: `@key value` metadata, `#` comments, one
    /// whitespace-separated file list per sample.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        out.push_str("# depthbench dataset manifest\n");
        let _ = writeln!(out, "@kind {}", self.kind.as_str());
        let _ = writeln!(out, "@depth_min {}", self.depth_min);
        let _ = writeln!(out, "@depth_max {}", self.depth_max);
        for s in &self.samples {
            let _ = writeln!(out, "{}", s.files.join(" "));
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut depth_min = 0.0;
        let mut depth_max = 1.0;
        let mut samples = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('@') {
                let mut parts = rest.splitn(2, char::is_whitespace);
                let key = parts.next().unwrap_or_default();
                let value = parts.next().unwrap_or_default().trim();
                match key {
                    "kind" => {
                        kind = Some(match value {
                            "mono" => DatasetKind::Mono,
                            "stereo" => DatasetKind::Stereo,
                            other => {
                                return Err(Error::Format(format!(
                                    "manifest line {}: unknown kind {other}",
                                    lineno + 1
                                )))
                            }
                        });
                    }
                    "depth_min" => {
                        depth_min = value.parse().map_err(|_| {
                            Error::Format(format!("manifest line {}: bad depth_min", lineno + 1))
                        })?;
                    }
                    "depth_max" => {
                        depth_max = value.parse().map_err(|_| {
                            Error::Format(format!("manifest line {}: bad depth_max", lineno + 1))
                        })?;
                    }
                    other => {
                        return Err(Error::Format(format!(
                            "manifest line {}: unknown key @{other}",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let files: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            samples.push(SampleDescriptor { files });
        }
        let kind = kind.ok_or_else(|| Error::Format("manifest missing @kind".to_string()))?;
        let index = DatasetIndex { kind, depth_min, depth_max, samples };
        let mut seen = std::collections::HashSet::new();
        for s in &index.samples {
            if !seen.insert(s.files.join(" ")) {
                return Err(Error::Format("duplicate sample descriptor in manifest".to_string()));
            }
        }
        Ok(index)
    }
}

/// Deterministic seeded shuffle then split: |train| = round(ratio * N);
/// the two halves are disjoint and cover the input.
pub fn split_dataset(index: &DatasetIndex, ratio: f64, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::arg(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let n = index.samples.len();
    if n < 2 {
        return Err(Error::arg("split requires at least 2 samples"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = DetRng::seed_from_u64(seed);
    rng.shuffle(&mut order);
    let train_len = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let pick = |ids: &[usize]| DatasetIndex {
        kind: index.kind,
        depth_min: index.depth_min,
        depth_max: index.depth_max,
        samples: ids.iter().map(|&i| index.samples[i].clone()).collect(),
    };
    Ok((pick(&order[..train_len]), pick(&order[train_len..])))
}

// ── Sample IO ───────────────────────────────────────────────────────────

/// Atomic file write: temp file in the target directory, then rename.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp.{}",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("file")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn manifest_relative(dir: &Path, file: &str) -> PathBuf {
    dir.join(file)
}

/// Writes a mono dataset (PPM rgb, PFM depth, PGM mask) plus manifest.
pub fn save_mono_dataset(dir: &Path, samples: &[MonoSample]) -> Result<DatasetIndex> {
    let mut index = DatasetIndex {
        kind: DatasetKind::Mono,
        depth_min: 0.0,
        depth_max: 1.0,
        samples: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        let rgb = format!("rgb_{i:04}.ppm");
        let depth = format!("depth_{i:04}.pfm");
        let mask = format!("valid_{i:04}.pgm");
        write_file_atomic(&manifest_relative(dir, &rgb), &write_ppm(&s.rgb)?)?;
        write_file_atomic(&manifest_relative(dir, &depth), &write_pfm(&PfmImage::from_plane(&s.depth))?)?;
        write_file_atomic(&manifest_relative(dir, &mask), &write_pgm(&plane_as_image(&s.mask))?)?;
        index.samples.push(SampleDescriptor { files: vec![rgb, depth, mask] });
    }
    write_file_atomic(&dir.join("manifest.txt"), index.to_manifest().as_bytes())?;
    Ok(index)
}

/// Writes a stereo dataset (PPM pair, PFM disparity, PGM mask) plus manifest.
pub fn save_stereo_dataset(dir: &Path, samples: &[StereoSample]) -> Result<DatasetIndex> {
    let mut index = DatasetIndex {
        kind: DatasetKind::Stereo,
        depth_min: 0.0,
        depth_max: 1.0,
        samples: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        let left = format!("left_{i:04}.ppm");
        let right = format!("right_{i:04}.ppm");
        let disp = format!("disp_{i:04}.pfm");
        let mask = format!("valid_{i:04}.pgm");
        write_file_atomic(&manifest_relative(dir, &left), &write_ppm(&s.left)?)?;
        write_file_atomic(&manifest_relative(dir, &right), &write_ppm(&s.right)?)?;
        write_file_atomic(&manifest_relative(dir, &disp), &write_pfm(&PfmImage::from_plane(&s.disparity))?)?;
        write_file_atomic(&manifest_relative(dir, &mask), &write_pgm(&plane_as_image(&s.mask))?)?;
        index.samples.push(SampleDescriptor { files: vec![left, right, disp, mask] });
    }
    write_file_atomic(&dir.join("manifest.txt"), index.to_manifest().as_bytes())?;
    Ok(index)
}

/// Loads a mono dataset from its manifest. Depth maps are stored already
/// normalized to [0, 1]; when converting external data, crop first, then
/// apply [`normalize_depth`] (clip to [d_min, d_max], then scale) before
/// writing the PFM.
pub fn load_mono_dataset(manifest_path: &Path) -> Result<Vec<MonoSample>> {
    let text = std::fs::read_to_string(manifest_path)?;
    let index = DatasetIndex::from_manifest(&text)?;
    if index.kind != DatasetKind::Mono {
        return Err(Error::Format("manifest kind is not mono".to_string()));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    index
        .samples
        .iter()
        .map(|s| {
            if s.files.len() != 3 {
                return Err(Error::Format("mono sample needs rgb, depth, mask".to_string()));
            }
            let rgb = read_ppm(&std::fs::read(dir.join(&s.files[0]))?)?;
            let depth = read_pfm(&std::fs::read(dir.join(&s.files[1]))?)?.into_plane()?;
            let mask = image_as_plane(&read_pgm(&std::fs::read(dir.join(&s.files[2]))?)?);
            Ok(MonoSample { rgb, depth, mask })
        })
        .collect()
}

pub fn load_stereo_dataset(manifest_path: &Path) -> Result<Vec<StereoSample>> {
    let text = std::fs::read_to_string(manifest_path)?;
    let index = DatasetIndex::from_manifest(&text)?;
    if index.kind != DatasetKind::Stereo {
        return Err(Error::Format("manifest kind is not stereo".to_string()));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    index
        .samples
        .iter()
        .map(|s| {
            if s.files.len() != 4 {
                return Err(Error::Format("stereo sample needs left, right, disparity, mask".to_string()));
            }
            let left = read_ppm(&std::fs::read(dir.join(&s.files[0]))?)?;
            let right = read_ppm(&std::fs::read(dir.join(&s.files[1]))?)?;
            let disparity = read_pfm(&std::fs::read(dir.join(&s.files[2]))?)?.into_plane()?;
            let mask = image_as_plane(&read_pgm(&std::fs::read(dir.join(&s.files[3]))?)?);
            Ok(StereoSample { left, right, disparity, mask })
        })
        .collect()
}

fn plane_as_image(p: &Plane) -> Image {
    Image { channels: 1, height: p.height, width: p.width, data: p.data.clone() }
}

fn image_as_plane(img: &Image) -> Plane {
    debug_assert_eq!(img.channels, 1);
    Plane { height: img.height, width: img.width, data: img.data.clone() }
}
