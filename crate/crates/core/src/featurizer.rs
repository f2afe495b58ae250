//! HU windowing, resampling, and the deterministic baseline descriptor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::corpus::HuSlice;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"BHDF";

pub const LUNG_WINDOW_CENTER: f64 = -600.0;
pub const LUNG_WINDOW_WIDTH: f64 = 1500.0;
pub const FEATURE_IMAGE_SIZE: usize = 256;
/// Edge length used when rendering corpus images for display or for a remote model.
pub const DISPLAY_IMAGE_SIZE: usize = 369;

const GRID: usize = 8;
const HIST_BINS: usize = 32;
const ORIENTATIONS: usize = 8;
const GRAD_GRID: usize = 4;
const PADDING: usize = 44;

/// Length of [`baseline_features`] output.
pub const BASELINE_DIM: usize =
    GRID * GRID * 2 + HIST_BINS + ORIENTATIONS * GRAD_GRID * GRAD_GRID + PADDING;

/// Row-major image with every pixel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl NormalizedImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::InvalidConfig(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidConfig(format!("pixel {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// 8-bit grayscale PNG bytes, for display or for sending to a vision model.
    pub fn to_png8(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            let data: Vec<u8> = self.pixels.iter().map(|p| (p * 255.0).round() as u8).collect();
            writer
                .write_image_data(&data)
                .map_err(|e| Error::Png(e.to_string()))?;
            writer.finish().map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(out)
    }
}

/// Maps `[center - width/2, center + width/2]` HU linearly onto `[0, 1]`, clamping outside.
pub fn lung_window(hu: &HuSlice, center: f64, width: f64) -> Result<NormalizedImage> {
    if !(width > 0.0) {
        return Err(Error::InvalidWindow(width));
    }
    let low = center - width / 2.0;
    let pixels = hu
        .pixels
        .iter()
        .map(|&v| ((v as f64 - low) / width).clamp(0.0, 1.0))
        .collect();
    NormalizedImage::new(hu.height, hu.width, pixels)
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resize to `target x target` with corner-aligned sampling.
pub fn resize_bilinear(image: &NormalizedImage, target: usize) -> Result<NormalizedImage> {
    if target == 0 {
        return Err(Error::InvalidTarget(target));
    }
    let ys = sample_positions(image.height, target);
    let xs = sample_positions(image.width, target);
    let mut pixels = Vec::with_capacity(target * target);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = lerp(image.get(y0, x0), image.get(y0, x1), tx);
            let bottom = lerp(image.get(y1, x0), image.get(y1, x1), tx);
            pixels.push(lerp(top, bottom, ty).clamp(0.0, 1.0));
        }
    }
    NormalizedImage::new(target, target, pixels)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Baseline,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub source: FeatureSource,
}

impl FeatureVector {
    pub fn new(values: Vec<f32>, source: FeatureSource) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("feature vector has non-finite entries".into()));
        }
        Ok(Self { values, source })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Orientation bin of a gradient, with bin 0 centred on +x and bins
/// advancing counter-clockwise in 45 degree steps.
pub fn orientation_bin(gx: f64, gy: f64) -> usize {
    let step = std::f64::consts::TAU / ORIENTATIONS as f64;
    let angle = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
    ((angle / step).round() as usize) % ORIENTATIONS
}

/// Fixed 332-dim descriptor of a 256x256 image:
/// patch means (8x8), patch stds (8x8), 32-bin intensity histogram,
/// 8-orientation gradient-magnitude histograms over a 4x4 grid, 44 zeros.
pub fn baseline_features(image: &NormalizedImage) -> Result<FeatureVector> {
    let n = FEATURE_IMAGE_SIZE;
    if image.height != n || image.width != n {
        return Err(Error::DimMismatch {
            want_h: n,
            want_w: n,
            got_h: image.height,
            got_w: image.width,
        });
    }
    let mut out: Vec<f64> = Vec::with_capacity(BASELINE_DIM);

    let patch = n / GRID;
    let mut means = Vec::with_capacity(GRID * GRID);
    let mut stds = Vec::with_capacity(GRID * GRID);
    for gy in 0..GRID {
        for gx in 0..GRID {
            let mut sum = 0.0;
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    sum += image.get(y, x);
                }
            }
            let count = (patch * patch) as f64;
            let mean = sum / count;
            let mut sq = 0.0;
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    let d = image.get(y, x) - mean;
                    sq += d * d;
                }
            }
            means.push(mean);
            stds.push((sq / count).sqrt());
        }
    }
    out.extend(means);
    out.extend(stds);

    let mut hist = [0.0f64; HIST_BINS];
    for &p in &image.pixels {
        hist[((p * HIST_BINS as f64) as usize).min(HIST_BINS - 1)] += 1.0;
    }
    let total = image.pixels.len() as f64;
    out.extend(hist.iter().map(|h| h / total));

    let cell = n / GRAD_GRID;
    let mut grad = vec![0.0f64; GRAD_GRID * GRAD_GRID * ORIENTATIONS];
    for y in 0..n {
        for x in 0..n {
            let gx = (image.get(y, (x + 1).min(n - 1)) - image.get(y, x.saturating_sub(1))) / 2.0;
            let gy = (image.get((y + 1).min(n - 1), x) - image.get(y.saturating_sub(1), x)) / 2.0;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let c = (y / cell) * GRAD_GRID + x / cell;
            grad[c * ORIENTATIONS + orientation_bin(gx, gy)] += mag;
        }
    }
    let per_cell = (cell * cell) as f64;
    out.extend(grad.iter().map(|g| g / per_cell));

    out.resize(BASELINE_DIM, 0.0);
    FeatureVector::new(out.into_iter().map(|v| v as f32).collect(), FeatureSource::Baseline)
}

/// Window, resize to 256x256, and describe a raw HU section.
pub fn featurize_hu(hu: &HuSlice, center: f64, width: f64) -> Result<FeatureVector> {
    let windowed = lung_window(hu, center, width)?;
    let resized = resize_bilinear(&windowed, FEATURE_IMAGE_SIZE)?;
    baseline_features(&resized)
}

/// Feature vectors keyed by slice id, all of one length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    dim: Option<usize>,
    vectors: BTreeMap<String, FeatureVector>,
}

impl FeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FeatureVector> {
        self.vectors.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &FeatureVector)> {
        self.vectors.iter()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: FeatureVector) -> Result<()> {
        let id = id.into();
        match self.dim {
            Some(d) if d != vector.len() => {
                return Err(Error::FeatureDimMismatch {
                    expected: d,
                    found: vector.len(),
                })
            }
            _ => self.dim = Some(vector.len()),
        }
        if self.vectors.contains_key(&id) {
            return Err(Error::DuplicateFeature(id));
        }
        self.vectors.insert(id, vector);
        Ok(())
    }
}

/// Writes a BHDF file, records in ascending id order.
pub fn save_features(path: &Path, features: &FeatureSet) -> Result<()> {
    let records: Vec<(&str, &[f32])> = features
        .iter()
        .map(|(id, v)| (id.as_str(), v.values.as_slice()))
        .collect();
    binfmt::write_records(path, FEATURE_MAGIC, features.dim.unwrap_or(0), &records)
}

/// Reads a BHDF file; vectors are tagged as externally sourced.
pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let (_, records) = binfmt::read_records(path, FEATURE_MAGIC)?;
    let mut set = FeatureSet::new();
    for (id, values) in records {
        set.insert(id, FeatureVector::new(values, FeatureSource::External)?)?;
    }
    Ok(set)
}
