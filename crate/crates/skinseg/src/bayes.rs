//! Histogram-based Bayesian skin color classifier.
//!
//! Skin and non-skin pixel colors are counted into two quantized RGB
//! histograms; the per-pixel skin posterior is the ratio of the
//! class-conditional likelihoods weighted by the priors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::imgio::{BinaryMask, ImgError, Image, SamplePair};

#[derive(Debug, Error)]
pub enum BayesError {
    #[error("bins per channel must be at least 2, got {0}")]
    TooFewBins(usize),
    #[error("{0} class has no pixels; posterior is undefined")]
    EmptyClass(&'static str),
    #[error("priors must be positive and sum to 1, got ({0}, {1})")]
    InvalidPriors(f64, f64),
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("training samples must be 3-channel color images")]
    NotColor,
    #[error("histogram file: {0}")]
    Format(String),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-pixel skin-presence probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self, String> {
        if height == 0 || width == 0 {
            return Err("dimensions must be positive".into());
        }
        if values.len() != height * width {
            return Err(format!("value count {} does not match {height}x{width}", values.len()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(format!("value {v} outside [0, 1]"));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Quantized 3-D color count tables for the skin and non-skin classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorHistogramPair {
    bins_per_channel: usize,
    skin_counts: Vec<u64>,
    nonskin_counts: Vec<u64>,
    n_skin: u64,
    n_nonskin: u64,
    /// Add-alpha smoothing applied at inference; 0 disables it.
    pub alpha: f64,
}

pub const DEFAULT_BINS: usize = 32;
pub const DEFAULT_PRIORS: (f64, f64) = (0.5, 0.5);

/// Bin index per channel: `min(floor(v * bins), bins - 1)`.
pub fn quantize_color(rgb: [f32; 3], bins: usize) -> [usize; 3] {
    debug_assert!(bins >= 2);
    let q = |v: f32| ((v as f64 * bins as f64).floor() as usize).min(bins - 1);
    [q(rgb[0]), q(rgb[1]), q(rgb[2])]
}

impl ColorHistogramPair {
    fn empty(bins: usize) -> Result<Self, BayesError> {
        if bins < 2 {
            return Err(BayesError::TooFewBins(bins));
        }
        Ok(Self {
            bins_per_channel: bins,
            skin_counts: vec![0; bins * bins * bins],
            nonskin_counts: vec![0; bins * bins * bins],
            n_skin: 0,
            n_nonskin: 0,
            alpha: 0.0,
        })
    }

    pub fn bins_per_channel(&self) -> usize {
        self.bins_per_channel
    }

    pub fn n_skin(&self) -> u64 {
        self.n_skin
    }

    pub fn n_nonskin(&self) -> u64 {
        self.n_nonskin
    }

    /// Red index varies fastest.
    #[inline]
    fn cell(&self, idx: [usize; 3]) -> usize {
        (idx[2] * self.bins_per_channel + idx[1]) * self.bins_per_channel + idx[0]
    }

    pub fn skin_count(&self, idx: [usize; 3]) -> u64 {
        self.skin_counts[self.cell(idx)]
    }

    pub fn nonskin_count(&self, idx: [usize; 3]) -> u64 {
        self.nonskin_counts[self.cell(idx)]
    }

    /// Test-support constructor with explicit counts.
    pub fn from_counts(
        bins: usize,
        skin_counts: Vec<u64>,
        nonskin_counts: Vec<u64>,
    ) -> Result<Self, BayesError> {
        let mut hist = Self::empty(bins)?;
        if skin_counts.len() != hist.skin_counts.len()
            || nonskin_counts.len() != hist.nonskin_counts.len()
        {
            return Err(BayesError::Format(format!(
                "count tables must have {} cells",
                hist.skin_counts.len()
            )));
        }
        hist.n_skin = skin_counts.iter().sum();
        hist.n_nonskin = nonskin_counts.iter().sum();
        hist.skin_counts = skin_counts;
        hist.nonskin_counts = nonskin_counts;
        Ok(hist)
    }
}

/// Counts every pixel of every sample into the class table chosen by its
/// truth bit. A class left empty only fails later, at posterior evaluation.
pub fn fit_histograms(samples: &[&SamplePair], bins: usize) -> Result<ColorHistogramPair, BayesError> {
    let mut hist = ColorHistogramPair::empty(bins)?;
    for s in samples {
        if s.image.channels() != 3 {
            return Err(BayesError::NotColor);
        }
        for (px, &skin) in s.image.data().chunks_exact(3).zip(s.truth.bits()) {
            let idx = quantize_color([px[0], px[1], px[2]], bins);
            let cell = hist.cell(idx);
            if skin {
                hist.skin_counts[cell] += 1;
                hist.n_skin += 1;
            } else {
                hist.nonskin_counts[cell] += 1;
                hist.n_nonskin += 1;
            }
        }
    }
    Ok(hist)
}

fn check_priors(priors: (f64, f64)) -> Result<(), BayesError> {
    let (ps, pns) = priors;
    if ps <= 0.0 || pns <= 0.0 || (ps + pns - 1.0).abs() > 1e-9 {
        return Err(BayesError::InvalidPriors(ps, pns));
    }
    Ok(())
}

fn check_classes(hist: &ColorHistogramPair) -> Result<(), BayesError> {
    if hist.n_skin == 0 {
        return Err(BayesError::EmptyClass("skin"));
    }
    if hist.n_nonskin == 0 {
        return Err(BayesError::EmptyClass("non-skin"));
    }
    Ok(())
}

#[inline]
fn posterior_from_counts(hist: &ColorHistogramPair, cell: usize, priors: (f64, f64)) -> f64 {
    let cells = hist.skin_counts.len() as f64;
    let like_s = (hist.skin_counts[cell] as f64 + hist.alpha)
        / (hist.n_skin as f64 + hist.alpha * cells);
    let like_ns = (hist.nonskin_counts[cell] as f64 + hist.alpha)
        / (hist.n_nonskin as f64 + hist.alpha * cells);
    let num = like_s * priors.0;
    let den = num + like_ns * priors.1;
    if den == 0.0 {
        // zero evidence for both classes: fall back to the skin prior
        priors.0
    } else {
        num / den
    }
}

/// Skin posterior for one color.
pub fn posterior(
    hist: &ColorHistogramPair,
    rgb: [f32; 3],
    priors: (f64, f64),
) -> Result<f64, BayesError> {
    check_classes(hist)?;
    check_priors(priors)?;
    let idx = quantize_color(rgb, hist.bins_per_channel);
    Ok(posterior_from_counts(hist, hist.cell(idx), priors))
}

/// Applies [`posterior`] to every pixel of a color image.
pub fn bc_prob_map(
    hist: &ColorHistogramPair,
    img: &Image,
    priors: (f64, f64),
) -> Result<ProbMap, BayesError> {
    if img.channels() != 3 {
        return Err(BayesError::NotColor);
    }
    check_classes(hist)?;
    check_priors(priors)?;
    let values = img
        .data()
        .chunks_exact(3)
        .map(|px| {
            let idx = quantize_color([px[0], px[1], px[2]], hist.bins_per_channel);
            posterior_from_counts(hist, hist.cell(idx), priors) as f32
        })
        .collect();
    ProbMap::new(img.height(), img.width(), values).map_err(BayesError::Format)
}

/// Thresholds a probability map into a mask; `value >= threshold` is skin.
pub fn binarize(map: &ProbMap, threshold: f64) -> Result<BinaryMask, BayesError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(BayesError::InvalidThreshold(threshold));
    }
    let bits = map.values().iter().map(|&v| f64::from(v) >= threshold).collect();
    BinaryMask::new(map.height(), map.width(), bits).map_err(BayesError::Img)
}

const HIST_MAGIC: &[u8; 4] = b"BCH1";

/// Writes the histogram file: magic, bins (u32 LE), both count tables as raw
/// little-endian u64 arrays with the red index fastest, then the two totals.
pub fn save_histograms(hist: &ColorHistogramPair, path: &Path) -> Result<(), BayesError> {
    let mut out = Vec::with_capacity(8 + 16 * hist.skin_counts.len() + 16);
    out.extend_from_slice(HIST_MAGIC);
    out.extend_from_slice(&(hist.bins_per_channel as u32).to_le_bytes());
    for &c in &hist.skin_counts {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for &c in &hist.nonskin_counts {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&hist.n_skin.to_le_bytes());
    out.extend_from_slice(&hist.n_nonskin.to_le_bytes());
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_histograms(path: &Path) -> Result<ColorHistogramPair, BayesError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], BayesError> {
        let slice = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| BayesError::Format("file truncated".into()))?;
        *pos += n;
        Ok(slice)
    };
    if take(&mut pos, 4)? != HIST_MAGIC {
        return Err(BayesError::Format("bad magic, expected BCH1".into()));
    }
    let bins = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut hist = ColorHistogramPair::empty(bins)?;
    let cells = bins * bins * bins;
    let read_u64 = |pos: &mut usize| -> Result<u64, BayesError> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    };
    for i in 0..cells {
        hist.skin_counts[i] = read_u64(&mut pos)?;
    }
    for i in 0..cells {
        hist.nonskin_counts[i] = read_u64(&mut pos)?;
    }
    hist.n_skin = read_u64(&mut pos)?;
    hist.n_nonskin = read_u64(&mut pos)?;
    if pos != bytes.len() {
        return Err(BayesError::Format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    if hist.skin_counts.iter().sum::<u64>() != hist.n_skin
        || hist.nonskin_counts.iter().sum::<u64>() != hist.n_nonskin
    {
        return Err(BayesError::Format("totals do not match count tables".into()));
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::synth::generate_synthetic_dataset;
    use proptest::prelude::*;

    fn hist_with(cell_skin: u64, n_skin: u64, cell_nonskin: u64, n_nonskin: u64) -> ColorHistogramPair {
        // put the remainder of each class far away from cell 0
        let bins = 4;
        let mut skin = vec![0u64; bins * bins * bins];
        let mut nonskin = vec![0u64; bins * bins * bins];
        skin[0] = cell_skin;
        nonskin[0] = cell_nonskin;
        *skin.last_mut().unwrap() = n_skin - cell_skin;
        *nonskin.last_mut().unwrap() = n_nonskin - cell_nonskin;
        ColorHistogramPair::from_counts(bins, skin, nonskin).unwrap()
    }

    #[test]
    fn quantize_endpoints_and_interior() {
        assert_eq!(quantize_color([0.0, 0.0, 0.0], 32), [0, 0, 0]);
        assert_eq!(quantize_color([1.0, 1.0, 1.0], 32), [31, 31, 31]);
        assert_eq!(quantize_color([0.5, 0.25, 0.75], 4), [2, 1, 3]);
    }

    #[test]
    fn fit_records_single_pixel() {
        let img = Image::new(1, 1, 3, vec![0.9, 0.6, 0.5]).unwrap();
        let truth = BinaryMask::new(1, 1, vec![true]).unwrap();
        let s = SamplePair::new("a", img, truth).unwrap();
        let hist = fit_histograms(&[&s], 8).unwrap();
        assert_eq!(hist.n_skin(), 1);
        assert_eq!(hist.n_nonskin(), 0);
        // downstream use of the empty class fails
        assert!(matches!(
            posterior(&hist, [0.9, 0.6, 0.5], DEFAULT_PRIORS),
            Err(BayesError::EmptyClass(_))
        ));
    }

    #[test]
    fn fit_same_bin_both_classes() {
        let img = Image::new(1, 2, 3, vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let truth = BinaryMask::new(1, 2, vec![true, false]).unwrap();
        let s = SamplePair::new("a", img, truth).unwrap();
        let hist = fit_histograms(&[&s], 8).unwrap();
        let idx = quantize_color([0.5, 0.5, 0.5], 8);
        assert_eq!(hist.skin_count(idx), 1);
        assert_eq!(hist.nonskin_count(idx), 1);
    }

    #[test]
    fn fit_is_order_independent() {
        let samples = generate_synthetic_dataset(4, 32, 3).unwrap();
        let refs: Vec<&SamplePair> = samples.iter().collect();
        let reversed: Vec<&SamplePair> = samples.iter().rev().collect();
        assert_eq!(fit_histograms(&refs, 16).unwrap(), fit_histograms(&reversed, 16).unwrap());
    }

    #[test]
    fn posterior_hand_case() {
        let hist = hist_with(30, 100, 10, 100);
        let p = posterior(&hist, [0.0, 0.0, 0.0], (0.5, 0.5)).unwrap();
        assert!((p - 0.75).abs() < 1e-12, "got {p}");
    }

    #[test]
    fn posterior_zero_evidence_falls_back_to_prior() {
        let hist = hist_with(0, 100, 0, 100);
        let p = posterior(&hist, [0.0, 0.0, 0.0], (0.5, 0.5)).unwrap();
        assert_eq!(p, 0.5);
        let p = posterior(&hist, [0.0, 0.0, 0.0], (0.3, 0.7)).unwrap();
        assert_eq!(p, 0.3);
    }

    #[test]
    fn posterior_one_sided_evidence_saturates() {
        let hist = hist_with(5, 100, 0, 100);
        let p = posterior(&hist, [0.0, 0.0, 0.0], (0.5, 0.5)).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn posterior_rejects_bad_priors() {
        let hist = hist_with(1, 1, 1, 1);
        assert!(posterior(&hist, [0.0; 3], (0.6, 0.6)).is_err());
        assert!(posterior(&hist, [0.0; 3], (0.0, 1.0)).is_err());
    }

    #[test]
    fn smoothing_avoids_fallback() {
        let mut hist = hist_with(0, 100, 0, 100);
        hist.alpha = 1.0;
        let p = posterior(&hist, [0.0, 0.0, 0.0], (0.5, 0.5)).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prob_map_constant_image_is_constant() {
        let hist = hist_with(30, 100, 10, 100);
        let img = Image::new(2, 3, 3, vec![0.01; 18]).unwrap();
        let map = bc_prob_map(&hist, &img, (0.5, 0.5)).unwrap();
        assert!(map.values().iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn prob_map_matches_per_pixel_posterior() {
        let samples = generate_synthetic_dataset(2, 32, 9).unwrap();
        let refs: Vec<&SamplePair> = samples.iter().collect();
        let hist = fit_histograms(&refs, 16).unwrap();
        let img = &samples[0].image;
        let map = bc_prob_map(&hist, img, DEFAULT_PRIORS).unwrap();
        for y in 0..img.height() {
            for x in 0..img.width() {
                let rgb = [img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2)];
                let p = posterior(&hist, rgb, DEFAULT_PRIORS).unwrap() as f32;
                assert_eq!(map.get(y, x), p);
            }
        }
    }

    #[test]
    fn binarize_boundary_and_extremes() {
        let map = ProbMap::new(1, 3, vec![0.5, 0.4999, 0.0]).unwrap();
        let mask = binarize(&map, 0.5).unwrap();
        assert_eq!(mask.bits(), &[true, false, false]);
        let all = binarize(&map, 0.0).unwrap();
        assert_eq!(all.count_true(), 3);
        assert!(matches!(binarize(&map, 1.0001), Err(BayesError::InvalidThreshold(_))));
    }

    #[test]
    fn histogram_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bch");
        let samples = generate_synthetic_dataset(2, 32, 1).unwrap();
        let refs: Vec<&SamplePair> = samples.iter().collect();
        let hist = fit_histograms(&refs, 8).unwrap();
        save_histograms(&hist, &path).unwrap();
        let back = load_histograms(&path).unwrap();
        assert_eq!(hist, back);
    }

    #[test]
    fn histogram_file_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bch");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_histograms(&path), Err(BayesError::Format(_))));
        let samples = generate_synthetic_dataset(1, 32, 1).unwrap();
        let hist = fit_histograms(&[&samples[0]], 4).unwrap();
        save_histograms(&hist, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_histograms(&path), Err(BayesError::Format(_))));
    }

    proptest! {
        // multiplying all counts by k leaves the posterior unchanged
        #[test]
        fn posterior_is_scale_invariant(
            cs in 0u64..200, co in 0u64..200, k in 1u64..50,
            extra_s in 1u64..500, extra_ns in 1u64..500,
        ) {
            let ns = cs + extra_s;
            let nns = co + extra_ns;
            let a = hist_with(cs, ns, co, nns);
            let b = hist_with(cs * k, ns * k, co * k, nns * k);
            let pa = posterior(&a, [0.0; 3], (0.5, 0.5)).unwrap();
            let pb = posterior(&b, [0.0; 3], (0.5, 0.5)).unwrap();
            let denom = pa.abs().max(pb.abs()).max(1e-300);
            prop_assert!((pa - pb).abs() / denom <= 1e-12);
        }

        // with equal priors the 0.5 crossing happens exactly at equal likelihoods
        #[test]
        fn equal_prior_decision_matches_likelihood_ratio(
            cs in 0u64..100, co in 0u64..100,
            extra_s in 1u64..100, extra_ns in 1u64..100,
        ) {
            let ns = cs + extra_s;
            let nns = co + extra_ns;
            let hist = hist_with(cs, ns, co, nns);
            let p = posterior(&hist, [0.0; 3], (0.5, 0.5)).unwrap();
            let ls = cs as f64 / ns as f64;
            let lns = co as f64 / nns as f64;
            if ls > lns {
                prop_assert!(p > 0.5);
            } else if ls < lns {
                prop_assert!(p <= 0.5);
            }
        }
    }
}
