//! Per-class AP aggregation into reports, and pseudo-label quality.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ap::{average_precision, Detection};
use super::GroundTruthSet;
use crate::detector::DetectionResult;
use crate::error::{Error, Result};
use crate::pseudo_label::{BBox, PseudoBoxLabel};

pub const AP_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAp {
    /// `None` when the class has no ground truth in the split (excluded from
    /// all means).
    pub ap: Option<f64>,
    pub gt_count: usize,
    pub det_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub per_class: BTreeMap<String, ClassAp>,
    /// Classes on the novel side of the split; empty without a split.
    #[serde(default)]
    pub novel_classes: BTreeSet<String>,
    /// Mean AP over novel classes with ground truth; `None` without a split.
    pub novel_map: Option<f64>,
    /// Mean AP over base classes with ground truth; `None` without a split.
    pub base_map: Option<f64>,
    /// Mean AP over all classes with ground truth.
    pub overall_map: Option<f64>,
    pub images: usize,
    pub gt_boxes: usize,
    pub detections: usize,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// CSV with one row per class plus the three summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,split,ap,gt_count,det_count\n");
        let has_split = !self.novel_classes.is_empty() || self.base_map.is_some();
        for (name, cls) in &self.per_class {
            let split = if has_split {
                if self.novel_classes.contains(name) {
                    "novel"
                } else {
                    "base"
                }
            } else {
                "all"
            };
            let ap = cls.ap.map_or(String::from(""), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{name},{split},{ap},{},{}\n",
                cls.gt_count, cls.det_count
            ));
        }
        let fmt = |v: Option<f64>| v.map_or(String::from(""), |v| format!("{v:.6}"));
        out.push_str(&format!("mAP_novel,,{},,\n", fmt(self.novel_map)));
        out.push_str(&format!("mAP_base,,{},,\n", fmt(self.base_map)));
        out.push_str(&format!("mAP_overall,,{},,\n", fmt(self.overall_map)));
        out
    }

    /// Three-column text summary (novel / base / overall mAP).
    pub fn summary_line(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::from("   n/a"), |v| format!("{v:6.4}"));
        format!(
            "mAP@{:.1}  novel {}  base {}  overall {}",
            AP_IOU_THRESHOLD,
            fmt(self.novel_map),
            fmt(self.base_map),
            fmt(self.overall_map)
        )
    }
}

/// Internal: compute per-class AP over an explicit class list.
fn eval_classes(
    detections: &[DetectionResult],
    gt: &GroundTruthSet,
    classes: &BTreeSet<String>,
) -> Result<BTreeMap<String, ClassAp>> {
    for det in detections {
        if !classes.contains(&det.category) {
            return Err(Error::invalid(format!(
                "detection category {:?} not in the evaluation vocabulary",
                det.category
            )));
        }
    }
    for items in gt.per_image.values() {
        for item in items {
            if !classes.contains(&item.category) {
                return Err(Error::invalid(format!(
                    "ground-truth category {:?} not in the evaluation vocabulary",
                    item.category
                )));
            }
        }
    }
    let mut per_class = BTreeMap::new();
    for class in classes {
        let class_dets: Vec<Detection> = detections
            .iter()
            .filter(|d| &d.category == class)
            .map(|d| Detection {
                image_id: d.image_id.clone(),
                bbox: d.bbox,
                confidence: d.confidence,
            })
            .collect();
        let class_gt: BTreeMap<String, Vec<BBox>> = gt
            .per_image
            .iter()
            .filter_map(|(id, items)| {
                let boxes: Vec<BBox> = items
                    .iter()
                    .filter(|i| &i.category == class)
                    .map(|i| i.bbox)
                    .collect();
                (!boxes.is_empty()).then(|| (id.clone(), boxes))
            })
            .collect();
        let gt_count = class_gt.values().map(Vec::len).sum();
        per_class.insert(
            class.clone(),
            ClassAp {
                ap: average_precision(&class_dets, &class_gt, AP_IOU_THRESHOLD),
                gt_count,
                det_count: class_dets.len(),
            },
        );
    }
    Ok(per_class)
}

fn mean_ap<'a>(
    per_class: &BTreeMap<String, ClassAp>,
    subset: impl Iterator<Item = &'a String>,
) -> Option<f64> {
    let aps: Vec<f64> = subset
        .filter_map(|c| per_class.get(c).and_then(|e| e.ap))
        .collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

/// Generalized open-vocabulary evaluation: detections were produced over
/// base ∪ novel, and AP is reported per class and averaged within each split.
/// Classes without ground truth in this split are excluded from the means.
pub fn generalized_eval(detections: &[DetectionResult], gt: &GroundTruthSet) -> Result<EvalReport> {
    if !gt.has_split() {
        return Err(Error::invalid(
            "generalized evaluation needs a base/novel split",
        ));
    }
    let classes: BTreeSet<String> = gt.base.union(&gt.novel).cloned().collect();
    let per_class = eval_classes(detections, gt, &classes)?;
    let novel_map = mean_ap(&per_class, gt.novel.iter());
    let base_map = mean_ap(&per_class, gt.base.iter());
    let overall_map = mean_ap(&per_class, classes.iter());
    Ok(EvalReport {
        schema: "capdet-eval-report-v1".into(),
        per_class,
        novel_classes: gt.novel.clone(),
        novel_map,
        base_map,
        overall_map,
        images: gt.per_image.len(),
        gt_boxes: gt.gt_count(),
        detections: detections.len(),
    })
}

/// Transfer evaluation: one flat vocabulary, no base/novel distinction.
/// Detection or annotation categories outside the vocabulary are errors.
pub fn transfer_eval(
    detections: &[DetectionResult],
    gt: &GroundTruthSet,
    vocabulary: &[String],
) -> Result<EvalReport> {
    if vocabulary.is_empty() {
        return Err(Error::invalid("empty transfer vocabulary"));
    }
    let classes: BTreeSet<String> = vocabulary.iter().cloned().collect();
    let per_class = eval_classes(detections, gt, &classes)?;
    let overall_map = mean_ap(&per_class, classes.iter());
    Ok(EvalReport {
        schema: "capdet-eval-report-v1".into(),
        per_class,
        novel_classes: BTreeSet::new(),
        novel_map: None,
        base_map: None,
        overall_map,
        images: gt.per_image.len(),
        gt_boxes: gt.gt_count(),
        detections: detections.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryQuality {
    /// Fraction of emitted labels that hit a same-category gt box at
    /// IoU ≥ 0.5; `None` when nothing was emitted.
    pub precision: Option<f64>,
    /// Fraction of gt boxes hit by some same-category label; `None` when the
    /// category has no gt.
    pub recall: Option<f64>,
    pub emitted: usize,
    pub correct: usize,
    pub gt_count: usize,
    pub gt_matched: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityReport {
    pub schema: String,
    pub per_category: BTreeMap<String, CategoryQuality>,
    /// Micro-averaged over all labels; `None` when no labels were emitted.
    pub precision: Option<f64>,
    /// Micro-averaged over all gt boxes; `None` when there is no gt.
    pub recall: Option<f64>,
    pub labels: usize,
    pub gt_boxes: usize,
}

impl QualityReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Pseudo-label quality against ground truth: a label is correct when some
/// same-image, same-category gt box overlaps it at IoU ≥ 0.5; a gt box is
/// recalled when some label hits it likewise. (Several labels may hit the
/// same gt box; this measures label correctness, not detection AP.)
pub fn pseudo_label_quality(labels: &[PseudoBoxLabel], gt: &GroundTruthSet) -> QualityReport {
    let mut cats: BTreeSet<String> = labels.iter().map(|l| l.category.clone()).collect();
    for items in gt.per_image.values() {
        for item in items {
            cats.insert(item.category.clone());
        }
    }
    let mut per_category = BTreeMap::new();
    let mut total = CategoryQuality {
        precision: None,
        recall: None,
        emitted: 0,
        correct: 0,
        gt_count: 0,
        gt_matched: 0,
    };
    for cat in &cats {
        let mut q = CategoryQuality {
            precision: None,
            recall: None,
            emitted: 0,
            correct: 0,
            gt_count: 0,
            gt_matched: 0,
        };
        for (image_id, items) in &gt.per_image {
            let gt_boxes: Vec<BBox> = items
                .iter()
                .filter(|i| &i.category == cat)
                .map(|i| i.bbox)
                .collect();
            let cat_labels: Vec<&PseudoBoxLabel> = labels
                .iter()
                .filter(|l| &l.pair_id == image_id && &l.category == cat)
                .collect();
            q.gt_count += gt_boxes.len();
            q.emitted += cat_labels.len();
            for label in &cat_labels {
                if gt_boxes
                    .iter()
                    .any(|g| label.bbox.iou(g) >= AP_IOU_THRESHOLD)
                {
                    q.correct += 1;
                }
            }
            for g in &gt_boxes {
                if cat_labels.iter().any(|l| l.bbox.iou(g) >= AP_IOU_THRESHOLD) {
                    q.gt_matched += 1;
                }
            }
        }
        // Labels for images absent from the gt map count as emitted, never correct.
        q.emitted += labels
            .iter()
            .filter(|l| &l.category == cat && !gt.per_image.contains_key(&l.pair_id))
            .count();
        q.precision = (q.emitted > 0).then(|| q.correct as f64 / q.emitted as f64);
        q.recall = (q.gt_count > 0).then(|| q.gt_matched as f64 / q.gt_count as f64);
        total.emitted += q.emitted;
        total.correct += q.correct;
        total.gt_count += q.gt_count;
        total.gt_matched += q.gt_matched;
        per_category.insert(cat.clone(), q);
    }
    QualityReport {
        schema: "capdet-quality-report-v1".into(),
        per_category,
        precision: (total.emitted > 0).then(|| total.correct as f64 / total.emitted as f64),
        recall: (total.gt_count > 0).then(|| total.gt_matched as f64 / total.gt_count as f64),
        labels: total.emitted,
        gt_boxes: total.gt_count,
    }
}

/// JSON-lines detections: `{"image_id", "category", "box", "confidence"}`.
pub fn save_detections(path: &Path, detections: &[DetectionResult]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(
        out,
        "{}",
        serde_json::json!({ "schema": "capdet-detections-v1" })
    )?;
    for det in detections {
        writeln!(out, "{}", serde_json::to_string(det)?)?;
    }
    Ok(())
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionResult>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
                if v.get("schema").is_some() && v.get("image_id").is_none() {
                    continue;
                }
            }
        }
        let det: DetectionResult = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(path, i + 1, e.to_string()))?;
        out.push(det);
    }
    Ok(out)
}

/// Ground truth restricted to the categories of one split side, as
/// `(per-image boxes)` for hand checks in tests.
#[allow(dead_code)]
pub(crate) fn boxes_of(gt: &GroundTruthSet, category: &str) -> BTreeMap<String, Vec<BBox>> {
    gt.per_image
        .iter()
        .filter_map(|(id, items)| {
            let boxes: Vec<BBox> = items
                .iter()
                .filter(|i| i.category == category)
                .map(|i| i.bbox)
                .collect();
            (!boxes.is_empty()).then(|| (id.clone(), boxes))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::GtItem;

    fn bx(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    fn det(image: &str, category: &str, bbox: BBox, confidence: f64) -> DetectionResult {
        DetectionResult {
            image_id: image.into(),
            category: category.into(),
            bbox,
            confidence,
        }
    }

    fn gt_two_classes() -> GroundTruthSet {
        let per_image = BTreeMap::from([
            (
                "i1".to_string(),
                vec![
                    GtItem {
                        category: "a".into(),
                        bbox: bx(0.0),
                    },
                    GtItem {
                        category: "b".into(),
                        bbox: bx(30.0),
                    },
                ],
            ),
            (
                "i2".to_string(),
                vec![GtItem {
                    category: "a".into(),
                    bbox: bx(0.0),
                }],
            ),
        ]);
        GroundTruthSet::new(per_image)
            .with_split(
                BTreeSet::from(["a".to_string()]),
                BTreeSet::from(["b".to_string()]),
            )
            .unwrap()
    }

    #[test]
    fn generalized_eval_splits_means() {
        let gt = gt_two_classes();
        let dets = vec![
            det("i1", "a", bx(0.0), 0.9),
            det("i2", "a", bx(0.0), 0.9),
            det("i1", "b", bx(300.0), 0.9), // miss
        ];
        let report = generalized_eval(&dets, &gt).unwrap();
        assert_eq!(report.per_class["a"].ap, Some(1.0));
        assert_eq!(report.per_class["b"].ap, Some(0.0));
        assert_eq!(report.base_map, Some(1.0));
        assert_eq!(report.novel_map, Some(0.0));
        assert_eq!(report.overall_map, Some(0.5));
        assert_eq!(report.gt_boxes, 3);
    }

    #[test]
    fn zero_gt_class_is_excluded_from_means() {
        let per_image = BTreeMap::from([(
            "i1".to_string(),
            vec![GtItem {
                category: "a".into(),
                bbox: bx(0.0),
            }],
        )]);
        let gt = GroundTruthSet::new(per_image)
            .with_split(
                BTreeSet::from(["a".to_string(), "c".to_string()]),
                BTreeSet::from(["b".to_string()]),
            )
            .unwrap();
        let dets = vec![det("i1", "a", bx(0.0), 0.9), det("i1", "c", bx(50.0), 0.8)];
        let report = generalized_eval(&dets, &gt).unwrap();
        assert!(report.per_class["c"].ap.is_none());
        assert!(report.per_class["b"].ap.is_none());
        assert_eq!(report.base_map, Some(1.0));
        assert_eq!(report.novel_map, None);
        assert_eq!(report.overall_map, Some(1.0));
    }

    #[test]
    fn unsplit_gt_rejected_for_generalized() {
        let gt = GroundTruthSet::new(BTreeMap::new());
        assert!(generalized_eval(&[], &gt).is_err());
    }

    #[test]
    fn unknown_detection_category_rejected() {
        let gt = gt_two_classes();
        let dets = vec![det("i1", "zebra", bx(0.0), 0.9)];
        assert!(generalized_eval(&dets, &gt).is_err());
    }

    #[test]
    fn transfer_matches_generalized_restriction() {
        // Transfer over {a, b} must equal the generalized per-class APs.
        let gt = gt_two_classes();
        let dets = vec![det("i1", "a", bx(0.0), 0.9), det("i1", "b", bx(30.0), 0.9)];
        let gen = generalized_eval(&dets, &gt).unwrap();
        let unsplit = GroundTruthSet::new(gt.per_image.clone());
        let tr = transfer_eval(&dets, &unsplit, &["a".to_string(), "b".to_string()]).unwrap();
        for c in ["a", "b"] {
            assert_eq!(gen.per_class[c].ap, tr.per_class[c].ap);
        }
        assert!(tr.novel_map.is_none() && tr.base_map.is_none());
        // Vocabulary mismatch is an error.
        assert!(transfer_eval(&dets, &unsplit, &["a".to_string()]).is_err());
    }

    #[test]
    fn quality_counts_exactly() {
        // 10 labels, 2 of them displaced beyond IoU 0.5: precision 0.8.
        let mut per_image = BTreeMap::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let id = format!("img{i}");
            let gt_box = bx(0.0);
            per_image.insert(
                id.clone(),
                vec![GtItem {
                    category: "c".into(),
                    bbox: gt_box,
                }],
            );
            let label_box = if i < 2 { bx(8.0) } else { bx(1.0) }; // IoU 1/9 vs 9/11
            labels.push(PseudoBoxLabel {
                pair_id: id,
                category: "c".into(),
                bbox: label_box,
                score: 1.0,
                token_span: [1, 2],
            });
        }
        let report = pseudo_label_quality(&labels, &GroundTruthSet::new(per_image));
        assert_eq!(report.precision, Some(0.8));
        assert_eq!(report.recall, Some(0.8));
        assert_eq!(report.labels, 10);
        assert_eq!(report.per_category["c"].correct, 8);
    }

    #[test]
    fn quality_empty_labels_is_undefined_precision_zero_recall() {
        let per_image = BTreeMap::from([(
            "i".to_string(),
            vec![GtItem {
                category: "c".into(),
                bbox: bx(0.0),
            }],
        )]);
        let report = pseudo_label_quality(&[], &GroundTruthSet::new(per_image));
        assert_eq!(report.precision, None);
        assert_eq!(report.recall, Some(0.0));
    }

    #[test]
    fn detections_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.jsonl");
        let dets = vec![det("i1", "a", bx(0.0), 0.75)];
        save_detections(&path, &dets).unwrap();
        let back = load_detections(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].image_id, "i1");
        assert_eq!(back[0].category, "a");
        assert_eq!(back[0].confidence, 0.75);
    }

    #[test]
    fn csv_has_class_rows_and_summary() {
        let gt = gt_two_classes();
        let dets = vec![det("i1", "a", bx(0.0), 0.9)];
        let report = generalized_eval(&dets, &gt).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,split,ap,gt_count,det_count");
        assert!(lines.iter().any(|l| l.starts_with("a,")));
        assert!(lines.iter().any(|l| l.starts_with("mAP_overall,")));
    }
}
