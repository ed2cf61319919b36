//! Detection and row-fit evaluation.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::detector::DetectionSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    /// Set when the corpus has no ground-truth boxes (AP reported as 0).
    pub zero_gt_warning: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub mae_theta_deg: f64,
    pub mae_dist_px: f64,
}

/// Matching outcome of one image at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatches {
    /// Confidence of each detection, in input order.
    pub confidences: Vec<f64>,
    pub tp: Vec<bool>,
    pub n_gt: usize,
}

impl ImageMatches {
    pub fn fp(&self) -> Vec<bool> {
        self.tp.iter().map(|t| !t).collect()
    }

    pub fn false_negatives(&self) -> usize {
        self.n_gt - self.tp.iter().filter(|t| **t).count()
    }
}

/// Greedy matching in the given (descending-confidence) order. Each detection
/// takes its highest-IoU unmatched GT and is a TP iff that IoU reaches
/// `iou_thresh`; only TPs consume a GT.
pub fn match_detections(dets: &DetectionSet, gts: &[BBox], iou_thresh: f64) -> ImageMatches {
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.detections.len());
    for d in &dets.detections {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] {
                continue;
            }
            let v = iou(&d.bbox, g);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v >= iou_thresh => {
                used[j] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    ImageMatches { confidences: dets.detections.iter().map(|d| d.confidence).collect(), tp, n_gt: gts.len() }
}

/// Recall levels of the 101-point interpolation.
fn recall_levels() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

/// Interpolated AP over a corpus; `None` when the corpus has no GT.
///
/// Detections with equal confidence enter the precision/recall curve
/// together, as a threshold cannot separate them.
pub fn average_precision(matches: &[ImageMatches]) -> Option<f64> {
    let n_gt: usize = matches.iter().map(|m| m.n_gt).sum();
    if n_gt == 0 {
        return None;
    }
    let mut scored: Vec<(f64, bool)> =
        matches.iter().flat_map(|m| m.confidences.iter().copied().zip(m.tp.iter().copied())).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));

    let mut curve: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let conf = scored[i].0;
        while i < scored.len() && scored[i].0 == conf {
            tp += scored[i].1 as usize;
            seen += 1;
            i += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / seen as f64));
    }
    // Precision envelope: best precision at this recall or beyond.
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut total = 0.0;
    let mut k = 0;
    for r in recall_levels() {
        while k < curve.len() && curve[k].0 < r {
            k += 1;
        }
        if k == curve.len() {
            break;
        }
        total += curve[k].1;
    }
    Some(total / 101.0)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Precision/recall at `conf_thresh` and AP metrics over a labeled corpus.
///
/// Conventions: with no detections above the threshold precision is 1 if the
/// corpus has no GT and 0 otherwise; with no GT recall is 1.
pub fn evaluate(dets: &[DetectionSet], gts: &[Vec<BBox>], conf_thresh: f64) -> Result<DetectionMetrics> {
    if dets.len() != gts.len() {
        return Err(Error::LengthMismatch(dets.len(), gts.len()));
    }
    if dets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let aps: Vec<Option<f64>> = coco_thresholds()
        .iter()
        .map(|&t| {
            let m: Vec<ImageMatches> = dets.iter().zip(gts).map(|(d, g)| match_detections(d, g, t)).collect();
            average_precision(&m)
        })
        .collect();
    let zero_gt_warning = aps[0].is_none();
    let map50 = aps[0].unwrap_or(0.0);
    let map50_95 = aps.iter().map(|a| a.unwrap_or(0.0)).sum::<f64>() / aps.len() as f64;

    let (mut tp, mut n_det, mut n_gt) = (0usize, 0usize, 0usize);
    for (d, g) in dets.iter().zip(gts) {
        let kept = DetectionSet {
            detections: d.detections.iter().copied().filter(|x| x.confidence >= conf_thresh).collect(),
            image_dims: d.image_dims,
        };
        let m = match_detections(&kept, g, 0.5);
        tp += m.tp.iter().filter(|t| **t).count();
        n_det += m.tp.len();
        n_gt += g.len();
    }
    let precision = if n_det > 0 {
        tp as f64 / n_det as f64
    } else if n_gt == 0 {
        1.0
    } else {
        0.0
    };
    let recall = if n_gt > 0 { tp as f64 / n_gt as f64 } else { 1.0 };
    Ok(DetectionMetrics { precision, recall, map50, map50_95, zero_gt_warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detection;

    fn set(dets: &[(BBox, f64)]) -> DetectionSet {
        DetectionSet {
            detections: dets.iter().map(|&(bbox, confidence)| Detection { bbox, confidence }).collect(),
            image_dims: (224, 224),
        }
    }

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![b(0.2, 0.2, 0.1, 0.1), b(0.7, 0.7, 0.2, 0.2)];
        let d = set(&[(gts[0], 1.0), (gts[1], 1.0)]);
        let m = match_detections(&d, &gts, 0.5);
        assert_eq!(m.tp, vec![true, true]);
        assert_eq!(m.false_negatives(), 0);
        assert_eq!(average_precision(&[m]), Some(1.0));
        let e = evaluate(&[d], &[gts], 0.25).unwrap();
        assert_eq!((e.precision, e.recall, e.map50, e.map50_95), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let g = vec![b(0.5, 0.5, 0.2, 0.2)];
        let d = set(&[(g[0], 0.9), (b(0.51, 0.5, 0.2, 0.2), 0.8)]);
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m.tp, vec![true, false]);
        assert_eq!(m.fp(), vec![false, true]);
    }

    #[test]
    fn no_detections_gives_zero_ap() {
        let g = vec![b(0.5, 0.5, 0.2, 0.2)];
        let m = match_detections(&set(&[]), &g, 0.5);
        assert_eq!(average_precision(&[m]), Some(0.0));
    }

    #[test]
    fn empty_corpus_convention() {
        let e = evaluate(&[set(&[])], &[vec![]], 0.25).unwrap();
        assert_eq!((e.precision, e.recall, e.map50), (1.0, 1.0, 0.0));
        assert!(e.zero_gt_warning);
        assert!(matches!(evaluate(&[], &[], 0.25), Err(Error::EmptyDataset)));
    }

    #[test]
    fn hand_built_four_detections_three_gts() {
        // Ranked TP, FP, TP, TP over 3 GTs.
        let g = vec![b(0.2, 0.2, 0.1, 0.1), b(0.5, 0.5, 0.1, 0.1), b(0.8, 0.8, 0.1, 0.1)];
        let d = set(&[(g[0], 0.9), (b(0.2, 0.8, 0.1, 0.1), 0.8), (g[1], 0.7), (g[2], 0.6)]);
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m.tp, vec![true, false, true, true]);
        // Envelope: precision 1 up to recall 1/3, then 3/4 up to recall 1.
        let expected = (34.0 * 1.0 + 67.0 * 0.75) / 101.0;
        assert!((average_precision(&[m]).unwrap() - expected).abs() < 1e-12);
    }
}
