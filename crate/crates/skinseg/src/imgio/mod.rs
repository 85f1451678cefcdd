//! Images, masks, dataset plumbing.
//!
//! Pixel intensities live in `[0, 1]` as `f32`; quantization to bytes happens
//! only at the codec boundary ([`codec`]). Color images carry 3 channels,
//! grayscale 1, and stacked ensemble inputs any number.

pub mod codec;
pub mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("trailing data: {0} unexpected bytes after payload")]
    TrailingData(usize),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("expected a {expected}-channel image, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("empty sample list")]
    EmptyDataset,
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major pixel grid with intensities in `[0, 1]`.
///
/// `channels` is 1 for grayscale, 3 for color; stacked ensemble inputs may
/// carry any channel count. The PPM/PGM codecs accept 1 or 3 only.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImgError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(ImgError::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(ImgError::InvalidImage(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(ImgError::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Intensity at (row, column, channel). Pixels are interleaved:
    /// `data[(y*W + x)*C + c]`.
    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

/// Per-pixel boolean mask; `true` marks skin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, ImgError> {
        if height == 0 || width == 0 {
            return Err(ImgError::InvalidImage("mask dimensions must be positive".into()));
        }
        if bits.len() != height * width {
            return Err(ImgError::InvalidImage(format!(
                "mask length {} does not match {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, bits: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// An image paired with its ground-truth mask.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub image: Image,
    pub truth: BinaryMask,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image: Image, truth: BinaryMask) -> Result<Self, ImgError> {
        if image.height() != truth.height() || image.width() != truth.width() {
            return Err(ImgError::DimensionMismatch(format!(
                "image {}x{} vs truth {}x{}",
                image.height(),
                image.width(),
                truth.height(),
                truth.width()
            )));
        }
        Ok(Self { id: id.into(), image, truth })
    }
}

/// Train/validation/test partition, stored as sample ids plus the seed that
/// produced the shuffle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn load(path: &Path) -> Result<Self, ImgError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ImgError::Manifest(format!("split file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), ImgError> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| ImgError::Manifest(format!("split file: {e}")))?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// One record of the dataset manifest: where a sample's image and mask live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
}

/// Converts a 3-channel image to grayscale with BT.601 luma weights.
pub fn to_grayscale(img: &Image) -> Result<Image, ImgError> {
    if img.channels() != 3 {
        return Err(ImgError::ChannelMismatch { expected: 3, got: img.channels() });
    }
    let mut data = Vec::with_capacity(img.pixel_count());
    for px in img.data().chunks_exact(3) {
        let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        data.push(y.clamp(0.0, 1.0));
    }
    Image::new(img.height(), img.width(), 1, data)
}

fn resample_dims(height: usize, width: usize, max_side: usize) -> (usize, usize) {
    let long = height.max(width) as f64;
    let s = max_side as f64 / long;
    if height >= width {
        (max_side, ((width as f64 * s).round() as usize).max(1))
    } else {
        (((height as f64 * s).round() as usize).max(1), max_side)
    }
}

/// Shrinks an image so its longer side equals `max_side`, preserving aspect
/// ratio, with bilinear interpolation. Images already within the bound are
/// returned unchanged; this never upscales.
pub fn downsample_max_side(img: &Image, max_side: usize) -> Image {
    assert!(max_side >= 1, "max_side must be >= 1");
    if img.height().max(img.width()) <= max_side {
        return img.clone();
    }
    let (oh, ow) = resample_dims(img.height(), img.width(), max_side);
    let c = img.channels();
    let sy = img.height() as f64 / oh as f64;
    let sx = img.width() as f64 / ow as f64;
    let mut data = vec![0.0f32; oh * ow * c];
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height() - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height() - 1);
        let wy = (fy - y0 as f64) as f32;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width() - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width() - 1);
            let wx = (fx - x0 as f64) as f32;
            for ch in 0..c {
                let v00 = img.get(y0, x0, ch);
                let v01 = img.get(y0, x1, ch);
                let v10 = img.get(y1, x0, ch);
                let v11 = img.get(y1, x1, ch);
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                let v = top + (bot - top) * wy;
                data[(y * ow + x) * c + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(oh, ow, c, data).expect("bilinear output stays in range")
}

/// Mask counterpart of [`downsample_max_side`]: nearest-neighbor sampling, so
/// the output stays strictly binary.
pub fn downsample_mask_max_side(mask: &BinaryMask, max_side: usize) -> BinaryMask {
    assert!(max_side >= 1, "max_side must be >= 1");
    if mask.height().max(mask.width()) <= max_side {
        return mask.clone();
    }
    let (oh, ow) = resample_dims(mask.height(), mask.width(), max_side);
    let sy = mask.height() as f64 / oh as f64;
    let sx = mask.width() as f64 / ow as f64;
    let mut bits = vec![false; oh * ow];
    for y in 0..oh {
        let iy = (((y as f64 + 0.5) * sy - 0.5).round() as isize).clamp(0, mask.height() as isize - 1) as usize;
        for x in 0..ow {
            let ix = (((x as f64 + 0.5) * sx - 0.5).round() as isize).clamp(0, mask.width() as isize - 1) as usize;
            bits[y * ow + x] = mask.get(iy, ix);
        }
    }
    BinaryMask::new(oh, ow, bits).expect("dims positive")
}

/// Deterministically partitions samples into train/validation/test.
///
/// Validation and test sizes are the rounded fractions; train takes the
/// remainder.
pub fn split_dataset(
    ids: &[String],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, ImgError> {
    if ids.is_empty() {
        return Err(ImgError::EmptyDataset);
    }
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 {
        return Err(ImgError::InvalidFractions(format!("({ft}, {fv}, {fe}) must all be positive")));
    }
    if ((ft + fv + fe) - 1.0).abs() > 1e-9 {
        return Err(ImgError::InvalidFractions(format!("({ft}, {fv}, {fe}) must sum to 1")));
    }
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, "split", 0);
    order.shuffle(&mut rng);

    let n_val = (fv * n as f64).round() as usize;
    let n_test = (fe * n as f64).round() as usize;
    if n_val + n_test > n {
        return Err(ImgError::InvalidFractions(format!(
            "rounded validation+test ({n_val}+{n_test}) exceeds dataset size {n}"
        )));
    }
    let n_train = n - n_val - n_test;

    let take = |r: std::ops::Range<usize>| -> Vec<String> {
        order[r].iter().map(|&i| ids[i].clone()).collect()
    };
    Ok(DatasetSplit {
        seed,
        train: take(0..n_train),
        validation: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    })
}

/// Writes samples to `dir` as PPM/PGM files plus a `manifest.json`.
pub fn save_dataset(samples: &[SamplePair], dir: &Path) -> Result<PathBuf, ImgError> {
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&mask_dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image_rel = format!("images/{}.ppm", s.id);
        let mask_rel = format!("masks/{}.pgm", s.id);
        fs::write(dir.join(&image_rel), codec::encode_image(&s.image)?)?;
        fs::write(dir.join(&mask_rel), codec::encode_mask(&s.truth))?;
        entries.push(ManifestEntry { id: s.id.clone(), image_path: image_rel, mask_path: mask_rel });
    }
    let manifest_path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&entries)
        .map_err(|e| ImgError::Manifest(e.to_string()))?;
    text.push('\n');
    fs::write(&manifest_path, text)?;
    Ok(manifest_path)
}

/// Reads a manifest and loads every sample it references. Paths are resolved
/// relative to the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SamplePair>, ImgError> {
    let text = fs::read_to_string(manifest_path)?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| ImgError::Manifest(e.to_string()))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut ids = HashSet::new();
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        if !ids.insert(e.id.clone()) {
            return Err(ImgError::Manifest(format!("duplicate sample id {}", e.id)));
        }
        let image = codec::decode_image(&fs::read(base.join(&e.image_path))?)?;
        let truth = codec::decode_mask(&fs::read(base.join(&e.mask_path))?)?;
        samples.push(SamplePair::new(e.id.clone(), image, truth)?);
    }
    Ok(samples)
}

/// Selects the samples named by `ids`, in the order given.
pub fn select_samples<'a>(
    samples: &'a [SamplePair],
    ids: &[String],
) -> Result<Vec<&'a SamplePair>, ImgError> {
    ids.iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| ImgError::Manifest(format!("unknown sample id {id}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, v: f32) -> Image {
        Image::new(h, w, 1, vec![v; h * w]).unwrap()
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(Image::new(0, 1, 1, vec![]).is_err());
        assert!(Image::new(1, 1, 1, vec![0.5, 0.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Image::new(1, 2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grayscale_matches_luma_weights() {
        let img = Image::new(1, 3, 3, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let g = to_grayscale(&img).unwrap();
        assert_eq!(g.get(0, 0, 0), 1.0);
        assert!((g.get(0, 1, 0) - 0.299).abs() < 1e-7);
        assert_eq!(g.get(0, 2, 0), 0.0);
    }

    #[test]
    fn grayscale_rejects_single_channel() {
        assert!(matches!(
            to_grayscale(&gray(2, 2, 0.5)),
            Err(ImgError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn downsample_halves_512x256() {
        let img = gray(512, 256, 0.25);
        let out = downsample_max_side(&img, 256);
        assert_eq!((out.height(), out.width()), (256, 128));
    }

    #[test]
    fn downsample_leaves_small_images_alone() {
        let img = gray(200, 100, 0.5);
        let out = downsample_max_side(&img, 256);
        assert_eq!(out, img);
    }

    #[test]
    fn downsample_square() {
        let img = gray(1024, 1024, 0.5);
        let out = downsample_max_side(&img, 256);
        assert_eq!((out.height(), out.width()), (256, 256));
    }

    #[test]
    fn downsample_is_idempotent() {
        let mut data = Vec::new();
        for i in 0..(300 * 200) {
            data.push((i % 97) as f32 / 96.0);
        }
        let img = Image::new(300, 200, 1, data).unwrap();
        let once = downsample_max_side(&img, 128);
        let twice = downsample_max_side(&once, 128);
        assert_eq!(once, twice);
    }

    #[test]
    fn mask_downsample_stays_binary_and_matches_dims() {
        let mut bits = vec![false; 64 * 32];
        for (i, b) in bits.iter_mut().enumerate() {
            *b = i % 3 == 0;
        }
        let mask = BinaryMask::new(64, 32, bits).unwrap();
        let out = downsample_mask_max_side(&mask, 16);
        assert_eq!((out.height(), out.width()), (16, 8));
    }

    #[test]
    fn split_reproduces_paper_sizes() {
        let ids: Vec<String> = (0..4000).map(|i| format!("s{i}")).collect();
        let split = split_dataset(&ids, (0.4375, 0.0625, 0.5), 7).unwrap();
        assert_eq!(split.train.len(), 1750);
        assert_eq!(split.validation.len(), 250);
        assert_eq!(split.test.len(), 2000);
    }

    #[test]
    fn split_exact_division() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let split = split_dataset(&ids, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((split.train.len(), split.validation.len(), split.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let ids: Vec<String> = (0..37).map(|i| format!("s{i}")).collect();
        let a = split_dataset(&ids, (0.5, 0.25, 0.25), 11).unwrap();
        let b = split_dataset(&ids, (0.5, 0.25, 0.25), 11).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<&String> = a.train.iter().chain(&a.validation).chain(&a.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), ids.len());
    }

    #[test]
    fn split_rejects_empty_and_bad_fractions() {
        assert!(matches!(split_dataset(&[], (0.5, 0.25, 0.25), 0), Err(ImgError::EmptyDataset)));
        let ids = vec!["a".to_string()];
        assert!(split_dataset(&ids, (0.5, 0.25, 0.3), 0).is_err());
        assert!(split_dataset(&ids, (1.1, -0.05, -0.05), 0).is_err());
    }

    #[test]
    fn dataset_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth::generate_synthetic_dataset(3, 32, 5).unwrap();
        let manifest = save_dataset(&samples, dir.path()).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.truth, b.truth);
            // images round-trip up to codec quantization
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn grayscale_stays_in_range(r in 0.0f32..=1.0, g in 0.0f32..=1.0, b in 0.0f32..=1.0) {
            let img = Image::new(1, 1, 3, vec![r, g, b]).unwrap();
            let y = to_grayscale(&img).unwrap().get(0, 0, 0);
            prop_assert!((0.0..=1.0).contains(&y));
            if r == g && g == b {
                prop_assert!((y - r).abs() < 1e-6);
            }
        }

        #[test]
        fn downsample_never_grows(h in 1usize..80, w in 1usize..80, side in 1usize..64) {
            let img = gray(h, w, 0.5);
            let out = downsample_max_side(&img, side);
            prop_assert!(out.height() <= h && out.width() <= w);
            prop_assert!(out.height().max(out.width()) <= side.max(h.max(w).min(side)));
        }
    }
}
