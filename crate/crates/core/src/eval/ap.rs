//! Precision-recall curves and all-points average precision for one class.

use std::collections::BTreeMap;

use crate::pseudo_label::BBox;

/// A single-class detection (the class is implied by the caller's grouping).
#[derive(Debug, Clone)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    /// Confidence of the detection that produced this point.
    pub confidence: f64,
}

/// Points in decreasing-confidence order; recall is non-decreasing.
#[derive(Debug, Clone, Default)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

/// Greedy matching in decreasing confidence order (ties keep input order):
/// each detection matches the highest-IoU unmatched ground-truth box of its
/// image with IoU ≥ `iou_threshold`, counting a true positive, otherwise a
/// false positive. Returns `None` when there is no ground truth at all
/// (the class is undefined for this split); no detections with ground truth
/// present yields an empty curve (AP 0).
pub fn pr_curve(
    detections: &[Detection],
    gt: &BTreeMap<String, Vec<BBox>>,
    iou_threshold: f64,
) -> Option<PrCurve> {
    let total_gt: usize = gt.values().map(Vec::len).sum();
    if total_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    // Stable sort: equal confidences keep input order.
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .partial_cmp(&detections[a].confidence)
            .expect("finite confidences")
    });
    let mut matched: BTreeMap<&str, Vec<bool>> = gt
        .iter()
        .map(|(id, boxes)| (id.as_str(), vec![false; boxes.len()]))
        .collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for idx in order {
        let det = &detections[idx];
        let mut best: Option<(usize, f64)> = None;
        if let Some(boxes) = gt.get(&det.image_id) {
            let taken = matched.get_mut(det.image_id.as_str()).expect("same keys");
            for (gi, gbox) in boxes.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let v = det.bbox.iou(gbox);
                if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
        }
        if best.is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(PrPoint {
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / total_gt as f64,
            confidence: det.confidence,
        });
    }
    Some(PrCurve { points })
}

/// All-points (area-under-curve) average precision: precision is replaced by
/// its running maximum from the right, then integrated over recall.
pub fn average_precision(
    detections: &[Detection],
    gt: &BTreeMap<String, Vec<BBox>>,
    iou_threshold: f64,
) -> Option<f64> {
    pr_curve(detections, gt, iou_threshold).map(|curve| ap_from_curve(&curve))
}

pub(crate) fn ap_from_curve(curve: &PrCurve) -> f64 {
    let n = curve.points.len();
    if n == 0 {
        return 0.0;
    }
    // Precision envelope: max over this and all later points.
    let mut envelope = vec![0.0; n];
    let mut running = 0.0f64;
    for i in (0..n).rev() {
        running = running.max(curve.points[i].precision);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}
