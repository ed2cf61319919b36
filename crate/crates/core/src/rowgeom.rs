//! Crop-row line fitting and the servo offset signals derived from it.
//!
//! Rows seen by a downward camera are near-vertical, so lines are
//! parameterized as `x = m * y + b` and `theta = atan(m)` is the signed
//! angle from image-vertical.

use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::DetectionSet;
use crate::metrics::RowMetrics;
use crate::rng::rng_from;
use crate::{Error, Result};

/// A fitted or generating crop-row line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowLine {
    /// Signed angle from image-vertical in degrees, in `(-90, 90)`.
    pub theta_deg: f64,
    /// Horizontal coordinate (px) where the line crosses the middle row `y = H/2`.
    pub x_at_mid: f64,
}

impl RowLine {
    pub fn slope(&self) -> f64 {
        Float::tan(self.theta_deg.to_radians())
    }

    /// Horizontal coordinate of the line at row `y` of an image `height` px tall.
    pub fn x_at(&self, y: f64, height: usize) -> f64 {
        self.x_at_mid + self.slope() * (y - height as f64 * 0.5)
    }
}

/// Angular and horizontal servo errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetSignal {
    pub theta_deg: f64,
    /// `x_at_mid - W/2`, px.
    pub l_px: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    /// Max perpendicular distance of an inlier, px.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iterations: 200, inlier_threshold: 5.0, min_inliers: 2, seed: 0 }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("ransac.iterations must be at least 1".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::Config("ransac.inlier_threshold must be positive".into()));
        }
        if self.min_inliers < 2 {
            return Err(Error::Config("ransac.min_inliers must be at least 2".into()));
        }
        Ok(())
    }
}

/// Denormalized box centers, in detection order.
pub fn centers(dets: &DetectionSet) -> Vec<(f64, f64)> {
    let (h, w) = dets.image_dims;
    dets.detections.iter().map(|d| d.bbox.center_px(w, h)).collect()
}

/// Least-squares fit of `x = m*y + b` minimizing horizontal residuals.
pub fn fit_line_lsq(points: &[(f64, f64)], height: usize) -> Result<RowLine> {
    if points.len() < 2 {
        return Err(Error::Degenerate(alloc::format!("need at least 2 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let syy: f64 = points.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let sxy: f64 = points.iter().map(|p| (p.1 - my) * (p.0 - mx)).sum();
    if syy == 0.0 {
        let distinct = points.iter().any(|p| p.0 != points[0].0);
        return Err(if distinct {
            Error::Degenerate("all points lie on one horizontal row".into())
        } else {
            Error::Degenerate("fewer than 2 distinct points".into())
        });
    }
    let m = sxy / syy;
    let theta_deg = Float::atan(m).to_degrees();
    Ok(RowLine { theta_deg, x_at_mid: mx + m * (height as f64 * 0.5 - my) })
}

/// Perpendicular distance (px) from `p` to `line`.
pub fn perpendicular_distance(line: &RowLine, p: (f64, f64), height: usize) -> f64 {
    let m = line.slope();
    Float::abs(p.0 - line.x_at(p.1, height)) / Float::sqrt(1.0 + m * m)
}

/// Result of [`fit_line_ransac_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub line: RowLine,
    /// One flag per input point.
    pub inliers: Vec<bool>,
}

impl RansacFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Distance function of one hypothesis.
enum Hypothesis {
    /// Through `p` with unit normal `n`.
    Pair { p: (f64, f64), n: (f64, f64) },
    Fitted(RowLine),
}

impl Hypothesis {
    fn distance(&self, q: (f64, f64), height: usize) -> f64 {
        match self {
            Hypothesis::Pair { p, n } => Float::abs((q.0 - p.0) * n.0 + (q.1 - p.1) * n.1),
            Hypothesis::Fitted(line) => perpendicular_distance(line, q, height),
        }
    }
}

/// RANSAC over two-point hypotheses, then least-squares refinement on the
/// winning consensus set.
///
/// The least-squares fit of all points is scored as the first hypothesis, so
/// when every point is an inlier to it the result equals [`fit_line_lsq`].
pub fn fit_line_ransac_detailed(points: &[(f64, f64)], params: &RansacParams, height: usize) -> Result<RansacFit> {
    params.validate()?;
    let n = points.len();
    if n < 2 {
        return Err(Error::Degenerate(alloc::format!("need at least 2 points, got {n}")));
    }
    let thr = params.inlier_threshold;
    let score = |h: &Hypothesis| -> Vec<bool> { points.iter().map(|&q| h.distance(q, height) <= thr).collect() };
    let count = |mask: &[bool]| mask.iter().filter(|&&b| b).count();

    let mut best: Option<Vec<bool>> = None;
    let mut best_count = 0;
    if let Ok(all) = fit_line_lsq(points, height) {
        let mask = score(&Hypothesis::Fitted(all));
        best_count = count(&mask);
        best = Some(mask);
    }
    let mut rng = rng_from(params.seed);
    for _ in 0..params.iterations {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (p, q) = (points[i], points[j]);
        let (dx, dy) = (q.0 - p.0, q.1 - p.1);
        let len = Float::sqrt(dx * dx + dy * dy);
        if len == 0.0 {
            continue;
        }
        let mask = score(&Hypothesis::Pair { p, n: (-dy / len, dx / len) });
        let c = count(&mask);
        if c > best_count {
            best_count = c;
            best = Some(mask);
        }
    }
    let Some(inliers) = best.filter(|_| best_count >= params.min_inliers) else {
        return Err(Error::NoConsensus { found: best_count, required: params.min_inliers });
    };
    let consensus: Vec<(f64, f64)> = points.iter().zip(&inliers).filter(|(_, &k)| k).map(|(&p, _)| p).collect();
    let line = fit_line_lsq(&consensus, height)?;
    Ok(RansacFit { line, inliers })
}

pub fn fit_line_ransac(points: &[(f64, f64)], params: &RansacParams, height: usize) -> Result<RowLine> {
    fit_line_ransac_detailed(points, params, height).map(|f| f.line)
}

/// Servo signals for `line` in an image of `(height, width)`.
pub fn offsets(line: &RowLine, image_dims: (usize, usize)) -> OffsetSignal {
    let (_, w) = image_dims;
    OffsetSignal { theta_deg: line.theta_deg, l_px: line.x_at_mid - w as f64 * 0.5 }
}

/// Mean absolute angle and distance errors.
pub fn row_mae(predicted: &[OffsetSignal], truth: &[OffsetSignal]) -> Result<RowMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(Error::Degenerate("row_mae needs at least one pair".into()));
    }
    let n = predicted.len() as f64;
    let (mut a, mut d) = (0.0, 0.0);
    for (p, t) in predicted.iter().zip(truth) {
        a += Float::abs(p.theta_deg - t.theta_deg);
        d += Float::abs(p.l_px - t.l_px);
    }
    Ok(RowMetrics { mae_theta_deg: a / n, mae_dist_px: d / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;
    use crate::detector::Detection;
    use proptest::prelude::*;

    #[test]
    fn centers_denormalize() {
        let dets = DetectionSet {
            detections: std::vec![
                Detection { bbox: BBox::new(0.5, 0.5, 0.1, 0.1).unwrap(), confidence: 0.9 },
                Detection { bbox: BBox::new(0.25, 0.75, 0.1, 0.1).unwrap(), confidence: 0.8 },
            ],
            image_dims: (224, 224),
        };
        assert_eq!(centers(&dets), std::vec![(112.0, 112.0), (56.0, 168.0)]);
        let empty = DetectionSet { detections: Vec::new(), image_dims: (224, 224) };
        assert!(centers(&empty).is_empty());
    }

    #[test]
    fn lsq_vertical_and_diagonal() {
        let l = fit_line_lsq(&[(100.0, 50.0), (100.0, 150.0)], 224).unwrap();
        assert_eq!(l.theta_deg, 0.0);
        assert_eq!(l.x_at_mid, 100.0);
        let d = fit_line_lsq(&[(50.0, 50.0), (150.0, 150.0)], 224).unwrap();
        assert!((d.theta_deg - 45.0).abs() < 1e-12);
        assert!((d.x_at_mid - 112.0).abs() < 1e-12);
    }

    #[test]
    fn lsq_degenerate_inputs() {
        assert!(fit_line_lsq(&[(1.0, 1.0)], 224).is_err());
        assert!(fit_line_lsq(&[(1.0, 1.0), (1.0, 1.0)], 224).is_err());
        let horizontal = fit_line_lsq(&[(0.0, 5.0), (10.0, 5.0), (20.0, 5.0)], 224);
        assert!(matches!(horizontal, Err(Error::Degenerate(m)) if m.contains("horizontal")));
    }

    #[test]
    fn ransac_two_points() {
        let pts = [(90.0, 20.0), (120.0, 200.0)];
        let r = fit_line_ransac(&pts, &RansacParams::default(), 224).unwrap();
        let l = fit_line_lsq(&pts, 224).unwrap();
        assert!((r.theta_deg - l.theta_deg).abs() < 1e-12);
        assert!((r.x_at_mid - l.x_at_mid).abs() < 1e-12);
    }

    #[test]
    fn ransac_excludes_outliers() {
        let truth = RowLine { theta_deg: 7.0, x_at_mid: 120.0 };
        let mut pts: Vec<(f64, f64)> = (0..20).map(|i| {
            let y = 5.0 + 10.0 * i as f64;
            (truth.x_at(y, 224), y)
        }).collect();
        pts.extend([(10.0, 10.0), (200.0, 30.0), (20.0, 200.0), (210.0, 190.0), (5.0, 100.0)]);
        let fit = fit_line_ransac_detailed(&pts, &RansacParams { inlier_threshold: 2.0, ..Default::default() }, 224).unwrap();
        assert!((fit.line.theta_deg - 7.0).abs() < 0.5);
        assert!(fit.inliers[..20].iter().all(|&b| b));
        assert!(fit.inliers[20..].iter().all(|&b| !b));
    }

    #[test]
    fn ransac_no_consensus() {
        let pts = [(0.0, 0.0), (100.0, 5.0), (50.0, 200.0)];
        let p = RansacParams { min_inliers: 3, inlier_threshold: 0.5, ..Default::default() };
        assert!(matches!(fit_line_ransac(&pts, &p, 224), Err(Error::NoConsensus { found: 2, required: 3 })));
    }

    #[test]
    fn offsets_definition() {
        assert_eq!(offsets(&RowLine { theta_deg: 0.0, x_at_mid: 112.0 }, (224, 224)), OffsetSignal { theta_deg: 0.0, l_px: 0.0 });
        assert_eq!(offsets(&RowLine { theta_deg: 0.0, x_at_mid: 122.0 }, (224, 224)).l_px, 10.0);
        let diag = fit_line_lsq(&[(62.0, 62.0), (162.0, 162.0)], 224).unwrap();
        let o = offsets(&diag, (224, 224));
        assert!((o.theta_deg - 45.0).abs() < 1e-12 && o.l_px.abs() < 1e-12);
    }

    #[test]
    fn mae_cases() {
        let a = [OffsetSignal { theta_deg: 1.0, l_px: 2.0 }];
        assert_eq!(row_mae(&a, &a).unwrap(), RowMetrics { mae_theta_deg: 0.0, mae_dist_px: 0.0 });
        let b = [OffsetSignal { theta_deg: 3.0, l_px: -1.0 }];
        assert_eq!(row_mae(&a, &b).unwrap(), RowMetrics { mae_theta_deg: 2.0, mae_dist_px: 3.0 });
        assert!(matches!(row_mae(&a, &[]), Err(Error::LengthMismatch(1, 0))));
    }

    fn arb_line() -> impl Strategy<Value = RowLine> {
        (-60.0..60.0f64, 40.0..180.0f64).prop_map(|(t, x)| RowLine { theta_deg: t, x_at_mid: x })
    }

    proptest! {
        #[test]
        fn lsq_recovers_noiseless_lines(line in arb_line(), n in 2usize..12, y0 in 0.0..50.0f64) {
            let pts: Vec<_> = (0..n).map(|i| { let y = y0 + 15.0 * i as f64; (line.x_at(y, 224), y) }).collect();
            let fit = fit_line_lsq(&pts, 224).unwrap();
            prop_assert!((fit.theta_deg - line.theta_deg).abs() < 1e-6);
            prop_assert!((fit.x_at_mid - line.x_at_mid).abs() < 1e-6);
        }

        #[test]
        fn translation_equivariance(pts in proptest::collection::vec((0.0..224.0f64, 0.0..224.0f64), 3..10), dx in -50.0..50.0f64) {
            prop_assume!(fit_line_lsq(&pts, 224).is_ok());
            let a = fit_line_lsq(&pts, 224).unwrap();
            let shifted: Vec<_> = pts.iter().map(|&(x, y)| (x + dx, y)).collect();
            let b = fit_line_lsq(&shifted, 224).unwrap();
            prop_assert!((a.theta_deg - b.theta_deg).abs() < 1e-9);
            prop_assert!((b.x_at_mid - a.x_at_mid - dx).abs() < 1e-9);
        }

        #[test]
        fn ransac_deterministic(pts in proptest::collection::vec((0.0..224.0f64, 0.0..224.0f64), 2..15), seed in 0u64..100) {
            let p = RansacParams { seed, ..Default::default() };
            prop_assert_eq!(fit_line_ransac(&pts, &p, 224).ok(), fit_line_ransac(&pts, &p, 224).ok());
        }
    }
}
