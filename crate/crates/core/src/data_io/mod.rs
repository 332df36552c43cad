//! Dataset ingestion and persistence: image–caption pairs, manifests,
//! COCO-style annotations, and the synthetic shape world used for
//! quantitative desk-scale tests.

mod formats;
mod overlay;
mod synth;

pub use formats::{
    export_coco_ground_truth, export_coco_labels, load_coco_ground_truth, load_pairs,
    load_pseudo_labels, save_pairs, save_pseudo_labels, PairEntry, PairStream,
};
pub use overlay::export_overlay;
pub use synth::{
    certified_categories, synth_dataset, write_dataset, CategorySpec, JitterConfig, Shape,
    SynthConfig, SynthOutput,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::detector::TextEmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{GroundTruthSet, GtItem};
use crate::pseudo_label::ObjectVocabulary;

pub const MANIFEST_SCHEMA: &str = "capdet-manifest-v1";

/// One image with its caption, the unit the label generator consumes.
#[derive(Debug, Clone)]
pub struct ImageCaptionPair {
    pub pair_id: String,
    pub image: RgbImage,
    pub caption: String,
}

impl ImageCaptionPair {
    pub fn new(
        pair_id: impl Into<String>,
        image: RgbImage,
        caption: impl Into<String>,
    ) -> Result<Self> {
        let pair_id = pair_id.into();
        let caption = caption.into();
        if caption.trim().is_empty() {
            return Err(Error::pair(&pair_id, "empty caption"));
        }
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::pair(&pair_id, "empty image"));
        }
        Ok(ImageCaptionPair {
            pair_id,
            image,
            caption,
        })
    }
}

/// Train/test split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Manifest entry pointing at one stored pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub pair_id: String,
    /// Relative to the dataset directory.
    pub image_path: String,
    pub caption: String,
    pub split: Split,
}

/// On-disk description of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    /// `(width, height)` shared by every image.
    pub image_size: (usize, usize),
    pub categories: Vec<String>,
    pub base: Vec<String>,
    pub novel: Vec<String>,
    pub pairs: Vec<PairMeta>,
    /// Ground truth per pair id; pairs without objects may be absent.
    pub ground_truth: BTreeMap<String, Vec<GtItem>>,
    /// Present when the dataset was synthesized, for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(Error::invalid(format!(
                "unknown manifest schema {:?}",
                self.schema
            )));
        }
        let categories: BTreeSet<&String> = self.categories.iter().collect();
        if categories.len() != self.categories.len() {
            return Err(Error::invalid("duplicate category in manifest"));
        }
        for name in self.base.iter().chain(&self.novel) {
            if !categories.contains(name) {
                return Err(Error::invalid(format!(
                    "split names unknown category {name:?}"
                )));
            }
        }
        if self.base.iter().any(|b| self.novel.contains(b)) {
            return Err(Error::invalid("base and novel splits overlap"));
        }
        let mut ids = BTreeSet::new();
        for meta in &self.pairs {
            if !ids.insert(&meta.pair_id) {
                return Err(Error::invalid(format!(
                    "duplicate pair id {:?}",
                    meta.pair_id
                )));
            }
        }
        for (id, items) in &self.ground_truth {
            if !ids.contains(id) {
                return Err(Error::invalid(format!(
                    "ground truth for unknown pair {id:?}"
                )));
            }
            for item in items {
                if !categories.contains(&item.category) {
                    return Err(Error::invalid(format!(
                        "ground truth category {:?} not registered",
                        item.category
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn pair_meta(&self, pair_id: &str) -> Option<&PairMeta> {
        self.pairs.iter().find(|m| m.pair_id == pair_id)
    }

    pub fn split_ids(&self, split: Split) -> Vec<&str> {
        self.pairs
            .iter()
            .filter(|m| m.split == split)
            .map(|m| m.pair_id.as_str())
            .collect()
    }

    /// Ground truth restricted to one split's images. When the manifest has a
    /// base/novel partition it is carried over; otherwise the set is unsplit.
    pub fn ground_truth_set(&self, split: Split) -> Result<GroundTruthSet> {
        let ids: BTreeSet<&str> = self.split_ids(split).into_iter().collect();
        let mut per_image = BTreeMap::new();
        for (id, items) in &self.ground_truth {
            if ids.contains(id.as_str()) {
                per_image.insert(id.clone(), items.clone());
            }
        }
        if self.novel.is_empty() {
            Ok(GroundTruthSet::new(per_image))
        } else {
            GroundTruthSet::new(per_image).with_split(
                self.base.iter().cloned().collect(),
                self.novel.iter().cloned().collect(),
            )
        }
    }
}

/// A dataset directory opened for reading: manifest plus lazy image access.
pub struct LoadedDataset {
    dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl LoadedDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::malformed(&manifest_path, 0, e.to_string()))?;
        manifest.validate()?;
        Ok(LoadedDataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn image(&self, pair_id: &str) -> Result<RgbImage> {
        let meta = self
            .manifest
            .pair_meta(pair_id)
            .ok_or_else(|| Error::pair(pair_id, "not in manifest"))?;
        let img = image::open(self.dir.join(&meta.image_path))
            .map_err(|e| Error::pair(pair_id, e.to_string()))?;
        Ok(img.to_rgb8())
    }

    pub fn pair(&self, pair_id: &str) -> Result<ImageCaptionPair> {
        let meta = self
            .manifest
            .pair_meta(pair_id)
            .ok_or_else(|| Error::pair(pair_id, "not in manifest"))?;
        ImageCaptionPair::new(pair_id, self.image(pair_id)?, meta.caption.clone())
    }

    /// All pairs of one split, in manifest order.
    pub fn pairs(&self, split: Split) -> Result<Vec<ImageCaptionPair>> {
        self.manifest
            .pairs
            .iter()
            .filter(|m| m.split == split)
            .map(|m| self.pair(&m.pair_id))
            .collect()
    }

    /// Vocabulary stored next to the manifest, or one derived from the
    /// category list when no vocab file exists.
    pub fn vocabulary(&self) -> Result<ObjectVocabulary> {
        let path = self.dir.join("vocab.jsonl");
        if path.exists() {
            ObjectVocabulary::load_jsonl(&path)
        } else {
            ObjectVocabulary::from_names(&self.manifest.categories)
        }
    }

    pub fn embeddings(&self) -> Result<TextEmbeddingTable> {
        TextEmbeddingTable::load(&self.dir.join("embeddings.json"))
    }
}
