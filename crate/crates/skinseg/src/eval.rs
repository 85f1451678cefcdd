//! Evaluation harness: confusion metrics, precision-recall curves, the
//! two-tailed Wilcoxon signed-rank test, and error overlays.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::bayes::{binarize, ProbMap};
use crate::imgio::{to_grayscale, BinaryMask, ImgError, Image};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("paired score vectors must have equal length >= 5, got {0} and {1}")]
    BadPairing(usize, usize),
    #[error(transparent)]
    Img(#[from] ImgError),
}

/// Pixel-level 2x2 tally.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<Confusion, EvalError> {
    if !pred.same_dims(truth) {
        return Err(EvalError::DimensionMismatch(format!(
            "pred {}x{} vs truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.bits().iter().zip(truth.bits()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Precision/recall/F with degeneracy flags: an undefined metric is reported
/// as 0 with its `*_defined` flag cleared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

pub fn prf(c: &Confusion) -> PrfScores {
    let precision_defined = c.tp + c.fp > 0;
    let recall_defined = c.tp + c.fn_ > 0;
    let precision = if precision_defined { c.tp as f64 / (c.tp + c.fp) as f64 } else { 0.0 };
    let recall = if recall_defined { c.tp as f64 / (c.tp + c.fn_) as f64 } else { 0.0 };
    let f_score = f_from_pr(precision, recall);
    PrfScores { precision, recall, f_score, precision_defined, recall_defined }
}

/// Harmonic mean, 0 when both components are 0.
pub fn f_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// One point of a micro-averaged precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Micro-averaged PR curve over a uniform threshold grid on [0, 1]; pixels
/// from all images are pooled at every threshold.
pub fn pr_curve(
    preds: &[&ProbMap],
    truths: &[&BinaryMask],
    steps: usize,
) -> Result<Vec<CurvePoint>, EvalError> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(EvalError::EmptyInput("pr_curve needs paired, nonempty inputs"));
    }
    for (p, t) in preds.iter().zip(truths) {
        if p.height() != t.height() || p.width() != t.width() {
            return Err(EvalError::DimensionMismatch("pr_curve pair".into()));
        }
    }
    assert!(steps >= 2, "need at least two thresholds");
    let mut curve = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        let mut pooled = Confusion::default();
        for (map, truth) in preds.iter().zip(truths) {
            for (&v, &g) in map.values().iter().zip(truth.bits()) {
                let p = f64::from(v) >= t;
                match (p, g) {
                    (true, true) => pooled.tp += 1,
                    (true, false) => pooled.fp += 1,
                    (false, true) => pooled.fn_ += 1,
                    (false, false) => pooled.tn += 1,
                }
            }
        }
        let scores = prf(&pooled);
        curve.push(CurvePoint { threshold: t, precision: scores.precision, recall: scores.recall });
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    /// Full enumeration of the 2^n sign assignments.
    Exact,
    /// Normal approximation with tie and continuity corrections.
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs remaining after zero differences are dropped.
    pub n_used: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// The reported statistic, `min(w_plus, w_minus)`.
    pub statistic: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Largest n for which the exact null distribution is enumerated.
pub const WILCOXON_EXACT_LIMIT: usize = 12;

/// Average ranks of |d|, with tied values sharing their mean rank.
fn signed_ranks(diffs: &[f64]) -> Vec<f64> {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Two-tailed Wilcoxon signed-rank test on paired scores. Zero differences
/// are dropped; if every difference is zero the result is "no evidence"
/// (p = 1).
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, EvalError> {
    wilcoxon_signed_rank_with_limit(a, b, WILCOXON_EXACT_LIMIT)
}

/// As [`wilcoxon_signed_rank`] with an explicit exact-enumeration cutoff;
/// `exact_limit = 0` forces the approximate branch (used to cross-check the
/// two branches on identical data).
pub fn wilcoxon_signed_rank_with_limit(
    a: &[f64],
    b: &[f64],
    exact_limit: usize,
) -> Result<WilcoxonResult, EvalError> {
    if a.len() != b.len() || a.len() < 5 {
        return Err(EvalError::BadPairing(a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n_used: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            statistic: 0.0,
            p_value: 1.0,
            method: WilcoxonMethod::Exact,
        });
    }
    let ranks = signed_ranks(&diffs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let (p_value, method) = if n <= exact_limit {
        (exact_two_tailed_p(&ranks, w_plus.min(w_minus), w_plus.max(w_minus)), WilcoxonMethod::Exact)
    } else {
        (approx_two_tailed_p(&ranks, statistic), WilcoxonMethod::NormalApprox)
    };
    Ok(WilcoxonResult { n_used: n, w_plus, w_minus, statistic, p_value: p_value.min(1.0), method })
}

/// Exact two-tailed p: the fraction of the 2^n sign assignments whose
/// `W+` is at least as extreme as the observed pair of tail values.
fn exact_two_tailed_p(ranks: &[f64], w_lo: f64, w_hi: f64) -> f64 {
    let n = ranks.len();
    let total = 1u64 << n;
    let eps = 1e-9;
    let mut count = 0u64;
    for mask in 0..total {
        let mut wp = 0.0;
        for (i, &r) in ranks.iter().enumerate() {
            if mask >> i & 1 == 1 {
                wp += r;
            }
        }
        if wp <= w_lo + eps || wp >= w_hi - eps {
            count += 1;
        }
    }
    count as f64 / total as f64
}

/// Normal approximation with continuity correction plus an Edgeworth
/// kurtosis term. Moments come from the actual (average) ranks, so tied
/// ranks are handled exactly; the kurtosis term keeps the error against the
/// exact distribution around 1e-3 already at the branch boundary.
fn approx_two_tailed_p(ranks: &[f64], statistic: f64) -> f64 {
    // W+ is a sum of rank * Bernoulli(1/2): kappa2 = sum(r^2)/4,
    // kappa4 = -sum(r^4)/8, odd cumulants vanish
    let mean: f64 = ranks.iter().sum::<f64>() / 2.0;
    let k2: f64 = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
    let k4: f64 = -ranks.iter().map(|r| r.powi(4)).sum::<f64>() / 8.0;
    if k2 <= 0.0 {
        return 1.0;
    }
    let sd = k2.sqrt();
    // continuity correction toward the mean; statistic <= mean by choice
    let z = (statistic + 0.5 - mean) / sd;
    let g2 = k4 / (k2 * k2);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let p_one = normal.cdf(z) - g2 / 24.0 * (z * z * z - 3.0 * z) * pdf;
    (2.0 * p_one).clamp(0.0, 1.0)
}

/// Error overlay: the image dimmed to grayscale, false positives painted
/// pure red and false negatives pure blue.
pub fn render_overlay(
    img: &Image,
    pred: &BinaryMask,
    truth: &BinaryMask,
) -> Result<Image, EvalError> {
    if img.height() != pred.height()
        || img.width() != pred.width()
        || !pred.same_dims(truth)
    {
        return Err(EvalError::DimensionMismatch("overlay inputs".into()));
    }
    let gray = if img.channels() == 3 { to_grayscale(img)? } else { img.clone() };
    let mut data = Vec::with_capacity(img.pixel_count() * 3);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (p, t) = (pred.get(y, x), truth.get(y, x));
            let px = match (p, t) {
                (true, false) => [1.0, 0.0, 0.0],
                (false, true) => [0.0, 0.0, 1.0],
                _ => {
                    let d = 0.5 * gray.get(y, x, 0);
                    [d, d, d]
                }
            };
            data.extend_from_slice(&px);
        }
    }
    Image::new(img.height(), img.width(), 3, data).map_err(EvalError::Img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageScore {
    pub id: String,
    pub f: f64,
}

/// Full evaluation result: micro-averaged headline metrics at the decision
/// threshold, per-image F-scores for significance testing, and the PR curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub confusion: Confusion,
    pub per_image: Vec<PerImageScore>,
    /// `[threshold, precision, recall]` triples.
    pub pr_curve: Vec<[f64; 3]>,
}

pub const DEFAULT_CURVE_STEPS: usize = 256;

pub fn evaluate(
    ids: &[String],
    preds: &[&ProbMap],
    truths: &[&BinaryMask],
    threshold: f64,
    curve_steps: usize,
) -> Result<EvalReport, EvalError> {
    if preds.is_empty() || preds.len() != truths.len() || preds.len() != ids.len() {
        return Err(EvalError::EmptyInput("evaluate needs paired, nonempty inputs"));
    }
    let mut pooled = Confusion::default();
    let mut per_image = Vec::with_capacity(preds.len());
    for ((id, &map), &truth) in ids.iter().zip(preds).zip(truths) {
        let mask = binarize(map, threshold)
            .map_err(|e| EvalError::DimensionMismatch(e.to_string()))?;
        let c = confusion(&mask, truth)?;
        pooled.merge(&c);
        per_image.push(PerImageScore { id: id.clone(), f: prf(&c).f_score });
    }
    let scores = prf(&pooled);
    let curve = pr_curve(preds, truths, curve_steps)?;
    Ok(EvalReport {
        precision: scores.precision,
        recall: scores.recall,
        f_score: scores.f_score,
        confusion: pooled,
        per_image,
        pr_curve: curve.iter().map(|p| [p.threshold, p.precision, p.recall]).collect(),
    })
}

/// Table-style CSV row (`Method,F-score,Precision,Recall`, 4 decimals).
pub fn csv_row(method: &str, report: &EvalReport) -> String {
    format!("{method},{:.4},{:.4},{:.4}", report.f_score, report.precision, report.recall)
}

pub const CSV_HEADER: &str = "Method,F-score,Precision,Recall";

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask(bits: &[bool], w: usize) -> BinaryMask {
        BinaryMask::new(bits.len() / w, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn confusion_identity_inversion_and_hand_case() {
        let t = mask(&[true, false, true, false], 4);
        let same = confusion(&t, &t).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        let inv = confusion(&t.complement(), &t).unwrap();
        assert_eq!((inv.tp, inv.tn), (0, 0));
        let pred = mask(&[true, true, false, false], 4);
        let truth = mask(&[true, false, true, false], 4);
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
    }

    #[test]
    fn prf_reproduces_reported_bc_row() {
        // published P/R pair: F must land on 0.7394 within 5e-4
        let f = f_from_pr(0.7504, 0.7288);
        assert!((f - 0.7394).abs() <= 0.0005, "{f}");
    }

    #[test]
    fn prf_perfect_and_hand_case() {
        let perfect = prf(&Confusion { tp: 10, fp: 0, fn_: 0, tn: 5 });
        assert_eq!((perfect.precision, perfect.recall, perfect.f_score), (1.0, 1.0, 1.0));
        let c = prf(&Confusion { tp: 3, fp: 1, fn_: 1, tn: 0 });
        assert_eq!((c.precision, c.recall, c.f_score), (0.75, 0.75, 0.75));
    }

    #[test]
    fn prf_flags_degenerate_cases() {
        let no_pred = prf(&Confusion { tp: 0, fp: 0, fn_: 3, tn: 2 });
        assert!(!no_pred.precision_defined);
        assert_eq!(no_pred.precision, 0.0);
        let no_truth = prf(&Confusion { tp: 0, fp: 2, fn_: 0, tn: 2 });
        assert!(!no_truth.recall_defined);
    }

    #[test]
    fn pr_curve_extremes_and_perfect_map() {
        let truth = mask(&[true, false, false, true], 2);
        let values: Vec<f32> = truth.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let map = ProbMap::new(2, 2, values).unwrap();
        let curve = pr_curve(&[&map], &[&truth], 64).unwrap();
        assert_eq!(curve[0].recall, 1.0);
        for p in curve.iter().filter(|p| p.threshold > 0.0) {
            assert_eq!((p.precision, p.recall), (1.0, 1.0), "at {}", p.threshold);
        }
    }

    #[test]
    fn pr_curve_matches_brute_force_recount() {
        let mut rng = crate::rng::stream(4, "eval-tests", 0);
        let values: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let bits: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.4)).collect();
        let map = ProbMap::new(8, 8, values).unwrap();
        let truth = mask(&bits, 8);
        let steps = 33;
        let curve = pr_curve(&[&map], &[&truth], steps).unwrap();
        for (i, point) in curve.iter().enumerate() {
            let t = i as f64 / (steps - 1) as f64;
            let mut c = Confusion::default();
            for (&v, &g) in map.values().iter().zip(truth.bits()) {
                match (f64::from(v) >= t, g) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            let s = prf(&c);
            assert_eq!(point.precision, s.precision);
            assert_eq!(point.recall, s.recall);
        }
    }

    #[test]
    fn wilcoxon_equal_vectors_give_p_one() {
        let a = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.n_used, 0);
    }

    #[test]
    fn wilcoxon_n6_all_positive_exact_p() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0; 6];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w_minus, 0.0);
        assert_eq!(r.method, WilcoxonMethod::Exact);
        assert!((r.p_value - 0.03125).abs() < 1e-15, "{}", r.p_value);
    }

    #[test]
    fn wilcoxon_handles_ties_with_average_ranks() {
        let ranks = signed_ranks(&[1.0, -1.0, 2.0, 2.0, -3.0]);
        assert_eq!(ranks, vec![1.5, 1.5, 3.5, 3.5, 5.0]);
    }

    #[test]
    fn wilcoxon_rejects_bad_inputs() {
        assert!(wilcoxon_signed_rank(&[1.0; 4], &[0.0; 4]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0; 6], &[0.0; 5]).is_err());
    }

    #[test]
    fn wilcoxon_branches_agree_near_boundary() {
        let mut rng = crate::rng::stream(11, "eval-tests", 1);
        for _ in 0..20 {
            let a: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
            let exact = wilcoxon_signed_rank(&a, &b).unwrap();
            assert_eq!(exact.method, WilcoxonMethod::Exact);
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let approx_p = approx_two_tailed_p(&signed_ranks(&diffs), exact.statistic);
            assert!(
                (exact.p_value - approx_p).abs() < 0.01,
                "exact {} vs approx {approx_p}",
                exact.p_value
            );
        }
    }

    #[test]
    fn overlay_identity_has_no_error_colors() {
        let img = Image::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let t = mask(&[true, false, false, true], 2);
        let out = render_overlay(&img, &t, &t).unwrap();
        for px in out.data().chunks_exact(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn overlay_saturated_false_positives_are_red() {
        let img = Image::new(1, 2, 3, vec![0.2; 6]).unwrap();
        let pred = mask(&[true, true], 2);
        let truth = mask(&[false, false], 2);
        let out = render_overlay(&img, &pred, &truth).unwrap();
        for px in out.data().chunks_exact(3) {
            assert_eq!(px, &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn overlay_matches_pixel_classification() {
        let mut rng = crate::rng::stream(8, "eval-tests", 2);
        let img = Image::new(4, 4, 3, (0..48).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let pred_bits: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.5)).collect();
        let truth_bits: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.5)).collect();
        let pred = mask(&pred_bits, 4);
        let truth = mask(&truth_bits, 4);
        let out = render_overlay(&img, &pred, &truth).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let px = [out.get(y, x, 0), out.get(y, x, 1), out.get(y, x, 2)];
                match (pred.get(y, x), truth.get(y, x)) {
                    (true, false) => assert_eq!(px, [1.0, 0.0, 0.0]),
                    (false, true) => assert_eq!(px, [0.0, 0.0, 1.0]),
                    _ => assert!(px[0] == px[1] && px[1] == px[2]),
                }
            }
        }
    }

    #[test]
    fn evaluate_builds_full_report() {
        let truth = mask(&[true, true, false, false], 2);
        let map = ProbMap::new(2, 2, vec![0.9, 0.8, 0.1, 0.2]).unwrap();
        let report =
            evaluate(&["a".to_string()], &[&map], &[&truth], 0.5, 16).unwrap();
        assert_eq!(report.f_score, 1.0);
        assert_eq!(report.per_image[0].f, 1.0);
        assert_eq!(report.pr_curve.len(), 16);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"fn\":0"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        // pooling confusions over images equals one pass over concatenated pixels
        #[test]
        fn micro_averaging_is_associative(seed in 0u64..500) {
            let mut rng = crate::rng::stream(seed, "eval-prop", 0);
            let mut pooled = Confusion::default();
            let mut cat_pred = Vec::new();
            let mut cat_truth = Vec::new();
            for _ in 0..3 {
                let pred_bits: Vec<bool> = (0..12).map(|_| rng.gen_bool(0.5)).collect();
                let truth_bits: Vec<bool> = (0..12).map(|_| rng.gen_bool(0.5)).collect();
                pooled.merge(&confusion(&mask(&pred_bits, 4), &mask(&truth_bits, 4)).unwrap());
                cat_pred.extend(pred_bits);
                cat_truth.extend(truth_bits);
            }
            let whole = confusion(&mask(&cat_pred, 4), &mask(&cat_truth, 4)).unwrap();
            prop_assert_eq!(prf(&pooled), prf(&whole));
        }

        // recall never increases as the threshold rises
        #[test]
        fn pooled_recall_is_monotone(seed in 0u64..200) {
            let mut rng = crate::rng::stream(seed, "eval-prop", 1);
            let values: Vec<f32> = (0..36).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let bits: Vec<bool> = (0..36).map(|_| rng.gen_bool(0.3)).collect();
            let map = ProbMap::new(6, 6, values).unwrap();
            let truth = mask(&bits, 6);
            let curve = pr_curve(&[&map], &[&truth], 24).unwrap();
            for w in curve.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall + 1e-12);
            }
        }
    }
}
