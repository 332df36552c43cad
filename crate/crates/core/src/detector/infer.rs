//! Inference: classify proposals against a category subset and filter with
//! class-wise non-maximum suppression.

use super::{
    extract_region_embedding, match_probability_subset, DetectionResult, DetectorParams,
    TextEmbeddingTable,
};
use crate::error::{Error, Result};
use crate::pseudo_label::BBox;
use crate::vlm::VisualFeatures;

/// Filtering knobs for inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    /// Detections with a matching probability below this are dropped.
    pub confidence_threshold: f64,
    /// Class-wise greedy NMS threshold.
    pub nms_iou: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            confidence_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

impl InferOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::invalid("confidence threshold must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid("NMS IoU threshold must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Classify every proposal of one image against `{bg} ∪ subset` with
/// probabilities renormalized over exactly those options, keep non-background
/// argmax assignments above the confidence threshold, and apply class-wise
/// greedy NMS. A detection's confidence is the matching probability of its
/// assigned class.
#[allow(clippy::too_many_arguments)]
pub fn infer(
    image_id: &str,
    features: &VisualFeatures,
    image_size: (usize, usize),
    proposals: &[BBox],
    subset: &[String],
    params: &DetectorParams,
    table: &TextEmbeddingTable,
    options: &InferOptions,
) -> Result<Vec<DetectionResult>> {
    options.validate()?;
    let indices = table.subset_indices(subset)?;
    let mut candidates = Vec::new();
    for bbox in proposals {
        let region = extract_region_embedding(features, image_size, bbox, params, image_id)?;
        let probs = match_probability_subset(&region.embedding, table, &indices)?;
        // Index 0 is background; exact ties keep the earlier option, so
        // background wins a tie and never produces a detection.
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate().skip(1) {
            if p > probs[best] {
                best = i;
            }
        }
        let confidence = probs[best];
        if best == 0 || confidence < options.confidence_threshold {
            continue;
        }
        candidates.push(DetectionResult {
            image_id: image_id.to_string(),
            category: subset[best - 1].clone(),
            bbox: *bbox,
            confidence,
        });
    }
    Ok(class_wise_nms(candidates, options.nms_iou))
}

/// Greedy NMS per category: walk detections by descending confidence and keep
/// each one unless it overlaps an already-kept detection of the same category
/// at IoU ≥ `nms_iou`. Output is ordered by descending confidence, ties broken
/// by category then box coordinates for determinism.
fn class_wise_nms(mut detections: Vec<DetectionResult>, nms_iou: f64) -> Vec<DetectionResult> {
    detections.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("finite confidences")
            .then_with(|| a.category.cmp(&b.category))
            .then_with(|| a.bbox.bits().cmp(&b.bbox.bits()))
    });
    let mut kept: Vec<DetectionResult> = Vec::new();
    for det in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.category == det.category && k.bbox.iou(&det.bbox) >= nms_iou);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array1, Array2};

    /// Identity setup: 2x2 grid over a 16x16 image, feature dim = embed
    /// dim = 2, identity projection, so a region's embedding is its pooled
    /// feature. Cell (0,0) points at class "a", cell (1,1) at class "b".
    fn setup() -> (VisualFeatures, DetectorParams, TextEmbeddingTable) {
        let mut f = Array2::zeros((4, 2));
        f[(0, 0)] = 10.0;
        f[(3, 1)] = 10.0;
        let features = VisualFeatures {
            features: f,
            grid: (2, 2),
        };
        let params = DetectorParams {
            w_proj: arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            b_proj: Array1::zeros(2),
            w_obj: Array1::zeros(2),
            b_obj: 0.0,
        };
        let table = TextEmbeddingTable::new(
            vec!["a".into(), "b".into()],
            arr2(&[[1.0, 0.0], [0.0, 1.0]]),
        )
        .unwrap();
        (features, params, table)
    }

    fn quadrants() -> Vec<BBox> {
        vec![
            BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
            BBox::new(8.0, 0.0, 16.0, 8.0).unwrap(),
            BBox::new(0.0, 8.0, 8.0, 16.0).unwrap(),
            BBox::new(8.0, 8.0, 16.0, 16.0).unwrap(),
        ]
    }

    #[test]
    fn dominant_logit_assigns_matching_class() {
        let (features, params, table) = setup();
        let subset = vec!["a".to_string(), "b".to_string()];
        let dets = infer(
            "img",
            &features,
            (16, 16),
            &quadrants(),
            &subset,
            &params,
            &table,
            &InferOptions::default(),
        )
        .unwrap();
        // Cells (0,1)/(1,0) have all-zero features: uniform probabilities,
        // argmax tie goes to background, so only the two strong cells detect.
        assert_eq!(dets.len(), 2);
        let top_left = dets
            .iter()
            .find(|d| d.bbox.x_min() == 0.0 && d.bbox.y_min() == 0.0);
        assert_eq!(top_left.unwrap().category, "a");
        let bottom_right = dets
            .iter()
            .find(|d| d.bbox.x_min() == 8.0 && d.bbox.y_min() == 8.0);
        assert_eq!(bottom_right.unwrap().category, "b");
        assert!(dets.iter().all(|d| d.confidence > 0.9));
    }

    #[test]
    fn threshold_one_empties_output() {
        let (features, params, table) = setup();
        let subset = vec!["a".to_string(), "b".to_string()];
        let opts = InferOptions {
            confidence_threshold: 1.0,
            ..InferOptions::default()
        };
        let dets = infer(
            "img",
            &features,
            (16, 16),
            &quadrants(),
            &subset,
            &params,
            &table,
            &opts,
        )
        .unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn nms_keeps_one_of_identical_boxes() {
        let (features, params, table) = setup();
        let subset = vec!["a".to_string()];
        let b = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let dets = infer(
            "img",
            &features,
            (16, 16),
            &[b, b, b],
            &subset,
            &params,
            &table,
            &InferOptions::default(),
        )
        .unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].category, "a");
    }

    #[test]
    fn nms_is_class_wise() {
        let a = DetectionResult {
            image_id: "i".into(),
            category: "a".into(),
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
            confidence: 0.9,
        };
        let b = DetectionResult {
            category: "b".into(),
            confidence: 0.8,
            ..a.clone()
        };
        let kept = class_wise_nms(vec![a.clone(), b.clone()], 0.5);
        // Same box, different classes: both survive.
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].category, "a");
        assert_eq!(kept[1].category, "b");
    }

    #[test]
    fn subset_restriction_excludes_other_classes() {
        let (features, params, table) = setup();
        let subset = vec!["a".to_string()];
        let dets = infer(
            "img",
            &features,
            (16, 16),
            &quadrants(),
            &subset,
            &params,
            &table,
            &InferOptions::default(),
        )
        .unwrap();
        assert!(dets.iter().all(|d| d.category == "a"));
        // The "b" cell region scores near zero for "a" and is dropped either
        // by the background argmax or the threshold.
        assert_eq!(dets.len(), 1);
    }

    #[test]
    fn empty_subset_rejected() {
        let (features, params, table) = setup();
        let err = infer(
            "img",
            &features,
            (16, 16),
            &quadrants(),
            &[],
            &params,
            &table,
            &InferOptions::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn invalid_options_rejected() {
        let bad = InferOptions {
            confidence_threshold: 1.5,
            ..InferOptions::default()
        };
        assert!(bad.validate().is_err());
        let bad = InferOptions {
            nms_iou: -0.1,
            ..InferOptions::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_sorted_by_confidence() {
        let (features, params, table) = setup();
        let subset = vec!["a".to_string(), "b".to_string()];
        let dets = infer(
            "img",
            &features,
            (16, 16),
            &quadrants(),
            &subset,
            &params,
            &table,
            &InferOptions::default(),
        )
        .unwrap();
        for pair in dets.windows(2) {
            assert!(pair[0].confidence >= pair[1].confidence);
        }
    }
}
