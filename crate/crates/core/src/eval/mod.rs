//! Detection evaluation: IoU, average precision, and the generalized
//! base/novel report, plus pseudo-label quality against ground truth.

mod ap;
mod report;

pub use ap::{average_precision, pr_curve, Detection, PrCurve, PrPoint};
pub use report::{
    generalized_eval, load_detections, pseudo_label_quality, save_detections, transfer_eval,
    CategoryQuality, ClassAp, EvalReport, QualityReport,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo_label::BBox;

/// Intersection over union of two boxes. Degenerate boxes cannot be
/// constructed ([`BBox::new`] rejects them), so the result is always in
/// [0, 1], and equals 1 exactly when the boxes coincide.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// One ground-truth annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtItem {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Ground truth for a set of images, optionally split into base and novel
/// category sets for generalized evaluation.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthSet {
    pub per_image: BTreeMap<String, Vec<GtItem>>,
    pub base: BTreeSet<String>,
    pub novel: BTreeSet<String>,
}

impl GroundTruthSet {
    /// Unsplit ground truth (for transfer evaluation or quality checks).
    pub fn new(per_image: BTreeMap<String, Vec<GtItem>>) -> Self {
        GroundTruthSet {
            per_image,
            base: BTreeSet::new(),
            novel: BTreeSet::new(),
        }
    }

    /// Attach a base/novel split. The sets must be disjoint and every
    /// annotated category must belong to one of them.
    pub fn with_split(mut self, base: BTreeSet<String>, novel: BTreeSet<String>) -> Result<Self> {
        if base.is_empty() && novel.is_empty() {
            return Err(Error::invalid("empty base and novel sets"));
        }
        if let Some(both) = base.intersection(&novel).next() {
            return Err(Error::invalid(format!(
                "category {both:?} is in both base and novel"
            )));
        }
        for items in self.per_image.values() {
            for item in items {
                if !base.contains(&item.category) && !novel.contains(&item.category) {
                    return Err(Error::invalid(format!(
                        "annotated category {:?} missing from the base/novel split",
                        item.category
                    )));
                }
            }
        }
        self.base = base;
        self.novel = novel;
        Ok(self)
    }

    pub fn has_split(&self) -> bool {
        !self.base.is_empty() || !self.novel.is_empty()
    }

    pub fn gt_count(&self) -> usize {
        self.per_image.values().map(Vec::len).sum()
    }
}
