//! From activation maps to pseudo bounding-box labels.
//!
//! For every caption span matched against an object vocabulary, the span's
//! activation map is upsampled to pixel resolution and each proposal box `b`
//! is scored by the area-normalized activation sum `Σ_{p ∈ b} Φ(p) / √|b|`;
//! the best-scoring proposal becomes the pseudo box for that mention. The
//! square root keeps large boxes from winning on accumulated mass alone while
//! still crediting them for covering more activation than a tight sub-box.
//!
//! Boxes are axis-aligned half-open pixel rectangles: pixel `(x, y)` lies in
//! the box iff `x_min ≤ x < x_max` and `y_min ≤ y < y_max`. A box spanning
//! `[0, 10) x [0, 10)` therefore covers exactly 100 pixels.

mod generate;
mod proposals;
mod scoring;
mod vocab;

pub use generate::{
    generate_for_pairs, generate_pseudo_labels, ActivationSource, GenerateStats,
    ImportedActivationSource, PairActivations, ProposalProvider, ToyActivationSource,
};
pub use proposals::{grid_proposals, load_proposals, region_merge_proposals, save_proposals};
pub use scoring::{score_proposal, select_box, upsample_activation};
pub use vocab::{
    match_vocabulary, normalize_token, tokenize_caption, ObjectVocabulary, VocabCategory,
    VocabularyMatch,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with positive area, in pixel units, half-open on both
/// axes. Construction validates finiteness and `min < max`, so any `BBox`
/// value is a valid, non-degenerate box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        for v in [x_min, y_min, x_max, y_max] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("box coordinate {v} is not finite")));
            }
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(Error::invalid(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<BBox> {
        BBox::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Intersection over union; in [0, 1], 1 iff the boxes coincide.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }

    /// Smallest box enclosing both.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    /// Bit-exact key for dedup/ordering of boxes from a common source.
    pub(crate) fn bits(&self) -> [u64; 4] {
        [
            self.x_min.to_bits(),
            self.y_min.to_bits(),
            self.x_max.to_bits(),
            self.y_max.to_bits(),
        ]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> [f64; 4] {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Where a proposal set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalSource {
    Loaded,
    Grid,
    RegionMerge,
}

/// Candidate boxes for one image. Must be non-empty when used for selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub source: ProposalSource,
}

/// One selected box for one vocabulary mention in one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoBoxLabel {
    pub pair_id: String,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Selection score of the winning proposal (not a calibrated confidence).
    pub score: f64,
    /// Token span `[start, end)` of the mention in the tokenized caption.
    pub token_span: [usize; 2],
}
