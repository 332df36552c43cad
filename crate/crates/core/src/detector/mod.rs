//! Open-vocabulary detector head.
//!
//! The detector never learns class weights: classification compares a
//! projected region embedding `r` against a fixed table of text embeddings
//! `{c_1..c_N}` plus an all-zeros background embedding,
//!
//! ```text
//! p(class j | r) = exp(r·c_j) / (exp(r·bg) + Σ_k exp(r·c_k)).
//! ```
//!
//! Training fits only the projection from pooled visual features to the
//! embedding space and a scalar objectness head; swapping or extending the
//! embedding table at inference time is what makes the vocabulary open.

mod checkpoint;
mod embedding;
mod infer;
mod loss;
mod matching;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use embedding::{extract_region_embedding, pooled_feature, RegionEmbedding};
pub use infer::{infer, InferOptions};
pub use loss::{detection_loss, LossBreakdown, ParamGrads};
pub use matching::{match_probability, match_probability_subset};
pub use train::{build_samples, fine_tune, train, train_from_samples, TrainImage, TrainSample};

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo_label::BBox;
use crate::vlm::encoder_stream;

/// Fixed per-category text embeddings plus the background embedding
/// (all zeros, giving background a constant logit of 0). The table is never
/// mutated by training; training takes it by shared reference.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingTable {
    categories: Vec<String>,
    dim: usize,
    /// `N x dim`, row i is the embedding of `categories[i]`.
    vectors: Array2<f64>,
    bg: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    schema: String,
    categories: Vec<String>,
    dim: usize,
    vectors: Vec<Vec<f64>>,
    bg: Vec<f64>,
}

impl TextEmbeddingTable {
    pub fn new(categories: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::invalid(
                "embedding table needs at least one category",
            ));
        }
        if vectors.nrows() != categories.len() {
            return Err(Error::invalid(format!(
                "{} embeddings for {} categories",
                vectors.nrows(),
                categories.len()
            )));
        }
        let unique: BTreeSet<&String> = categories.iter().collect();
        if unique.len() != categories.len() {
            return Err(Error::invalid("duplicate category in embedding table"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite embedding value"));
        }
        let dim = vectors.ncols();
        if dim == 0 {
            return Err(Error::invalid("zero-width embeddings"));
        }
        Ok(TextEmbeddingTable {
            categories,
            dim,
            vectors,
            bg: Array1::zeros(dim),
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn embedding(&self, index: usize) -> ndarray::ArrayView1<'_, f64> {
        self.vectors.row(index)
    }

    pub fn bg(&self) -> ndarray::ArrayView1<'_, f64> {
        self.bg.view()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    /// Stable byte serialization, used to assert the table is untouched by
    /// training.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TableFile {
            schema: "capdet-embeddings-v1".into(),
            categories: self.categories.clone(),
            dim: self.dim,
            vectors: self
                .vectors
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            bg: self.bg.to_vec(),
        })?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: TableFile =
            serde_json::from_str(&text).map_err(|e| Error::malformed(path, 0, e.to_string()))?;
        if file.schema != "capdet-embeddings-v1" {
            return Err(Error::malformed(
                path,
                0,
                format!("unknown embeddings schema {:?}", file.schema),
            ));
        }
        let n = file.categories.len();
        let mut vectors = Array2::zeros((n, file.dim));
        if file.vectors.len() != n {
            return Err(Error::malformed(path, 0, "vector count != category count"));
        }
        for (i, row) in file.vectors.iter().enumerate() {
            if row.len() != file.dim {
                return Err(Error::malformed(
                    path,
                    0,
                    format!("vector {i} has wrong width"),
                ));
            }
            for (j, &v) in row.iter().enumerate() {
                vectors[(i, j)] = v;
            }
        }
        let table = TextEmbeddingTable::new(file.categories, vectors)?;
        if file.bg.iter().any(|&v| v != 0.0) {
            return Err(Error::malformed(
                path,
                0,
                "background embedding must be all zeros",
            ));
        }
        Ok(table)
    }

    /// Indices of a category subset, preserving the given order.
    pub fn subset_indices<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        if names.is_empty() {
            return Err(Error::invalid("empty category subset"));
        }
        names
            .iter()
            .map(|n| {
                self.category_index(n.as_ref()).ok_or_else(|| {
                    Error::invalid(format!("category {:?} not in embedding table", n.as_ref()))
                })
            })
            .collect()
    }
}

/// Learned detector parameters: a linear projection into embedding space and
/// a scalar objectness head over pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    /// `embed_dim x feature_dim`.
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
    pub w_obj: Array1<f64>,
    pub b_obj: f64,
}

impl DetectorParams {
    /// Small random init, deterministic in the seed.
    pub fn init(feature_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || embed_dim == 0 {
            return Err(Error::invalid("zero-sized detector parameters"));
        }
        let mut rng = encoder_stream(seed, "detector-init");
        let sigma = 0.1 / (feature_dim as f64).sqrt();
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut sample = |_: ()| {
            let z: f64 = rng.sample(StandardNormal);
            z * sigma
        };
        let w_proj = Array2::from_shape_fn((embed_dim, feature_dim), |_| sample(()));
        let w_obj = Array1::from_shape_fn(feature_dim, |_| sample(()));
        Ok(DetectorParams {
            w_proj,
            b_proj: Array1::zeros(embed_dim),
            w_obj,
            b_obj: 0.0,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_proj.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_proj.nrows()
    }
}

/// Training target of one region sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Background,
    /// Index into the embedding table.
    Class(usize),
}

/// SGD schedule and sampling configuration. Desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Iterations at which the learning rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    /// Negatives sampled per positive in each batch.
    pub negative_ratio: f64,
    /// Proposals with IoU below this against every pseudo box are negatives.
    pub negative_iou: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            iterations: 2000,
            milestones: vec![1200, 1800],
            decay_factor: 0.1,
            weight_decay: 1e-4,
            negative_ratio: 3.0,
            negative_iou: 0.3,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::invalid("batch size and iterations must be positive"));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::invalid("decay factor must be positive"));
        }
        if self.weight_decay < 0.0 || self.negative_ratio < 0.0 {
            return Err(Error::invalid(
                "weight decay and negative ratio must be non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.negative_iou) {
            return Err(Error::invalid("negative IoU threshold must be in [0, 1]"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("milestones must be strictly increasing"));
        }
        Ok(())
    }

    /// Step-decayed learning rate at a 0-based iteration.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }
}

/// One detection emitted by inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image_id: String,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn table_validation_and_lookup() {
        let t = TextEmbeddingTable::new(
            vec!["a".into(), "b".into()],
            arr2(&[[1.0, 0.0], [0.0, 1.0]]),
        )
        .unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.category_index("b"), Some(1));
        assert_eq!(t.category_index("z"), None);
        assert!(t.bg().iter().all(|&v| v == 0.0));
        assert!(
            TextEmbeddingTable::new(vec!["a".into(), "a".into()], arr2(&[[1.0], [2.0]])).is_err()
        );
        assert!(TextEmbeddingTable::new(vec!["a".into()], arr2(&[[f64::NAN]])).is_err());
        assert!(TextEmbeddingTable::new(vec![], Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        let t = TextEmbeddingTable::new(
            vec!["a".into(), "b".into()],
            arr2(&[[0.5, -1.0], [2.0, 0.25]]),
        )
        .unwrap();
        t.save(&path).unwrap();
        let back = TextEmbeddingTable::load(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn subset_indices_validate() {
        let t = TextEmbeddingTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            arr2(&[[1.0], [2.0], [3.0]]),
        )
        .unwrap();
        assert_eq!(t.subset_indices(&["c", "a"]).unwrap(), vec![2, 0]);
        assert!(t.subset_indices(&["nope"]).is_err());
        assert!(t.subset_indices::<&str>(&[]).is_err());
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            milestones: vec![10, 20],
            decay_factor: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 1.0);
        assert_eq!(cfg.learning_rate_at(9), 1.0);
        assert!((cfg.learning_rate_at(10) - 0.1).abs() < 1e-12);
        assert!((cfg.learning_rate_at(25) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            milestones: vec![10, 10],
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn params_init_deterministic() {
        let a = DetectorParams::init(8, 4, 3).unwrap();
        let b = DetectorParams::init(8, 4, 3).unwrap();
        let c = DetectorParams::init(8, 4, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
