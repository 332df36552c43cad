//! Detector checkpoints: JSON files carrying the learned parameters together
//! with the configurations that produced them.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{DetectorParams, TrainConfig};
use crate::error::{Error, Result};
use crate::vlm::ModelConfig;

const CHECKPOINT_SCHEMA: &str = "capdet-checkpoint-v1";

/// Self-describing snapshot of a trained detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    /// `embed_dim x feature_dim` projection, row-major.
    pub w_proj: Vec<Vec<f64>>,
    pub b_proj: Vec<f64>,
    pub w_obj: Vec<f64>,
    pub b_obj: f64,
    pub train_config: TrainConfig,
    /// Encoder configuration the detector's features came from.
    pub model_config: ModelConfig,
    pub iterations_done: usize,
}

impl Checkpoint {
    pub fn new(
        params: &DetectorParams,
        train_config: &TrainConfig,
        model_config: &ModelConfig,
        iterations_done: usize,
    ) -> Self {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            w_proj: params
                .w_proj
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            b_proj: params.b_proj.to_vec(),
            w_obj: params.w_obj.to_vec(),
            b_obj: params.b_obj,
            train_config: train_config.clone(),
            model_config: model_config.clone(),
            iterations_done,
        }
    }

    pub fn params(&self) -> Result<DetectorParams> {
        let embed_dim = self.w_proj.len();
        if embed_dim == 0 || self.w_proj[0].is_empty() {
            return Err(Error::invalid("checkpoint projection is empty"));
        }
        let feature_dim = self.w_proj[0].len();
        if self.w_proj.iter().any(|r| r.len() != feature_dim) {
            return Err(Error::invalid(
                "checkpoint projection rows have unequal widths",
            ));
        }
        if self.b_proj.len() != embed_dim {
            return Err(Error::invalid(
                "checkpoint projection bias has wrong length",
            ));
        }
        if self.w_obj.len() != feature_dim {
            return Err(Error::invalid(
                "checkpoint objectness weights have wrong length",
            ));
        }
        let flat: Vec<f64> = self.w_proj.iter().flatten().copied().collect();
        if flat.iter().any(|v| !v.is_finite())
            || self.b_proj.iter().any(|v| !v.is_finite())
            || self.w_obj.iter().any(|v| !v.is_finite())
            || !self.b_obj.is_finite()
        {
            return Err(Error::invalid("checkpoint contains non-finite parameters"));
        }
        Ok(DetectorParams {
            w_proj: Array2::from_shape_vec((embed_dim, feature_dim), flat)
                .map_err(|e| Error::invalid(e.to_string()))?,
            b_proj: Array1::from_vec(self.b_proj.clone()),
            w_obj: Array1::from_vec(self.w_obj.clone()),
            b_obj: self.b_obj,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string_pretty(checkpoint)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, 0, e.to_string()))?;
    if checkpoint.schema != CHECKPOINT_SCHEMA {
        return Err(Error::malformed(
            path,
            0,
            format!("unknown checkpoint schema {:?}", checkpoint.schema),
        ));
    }
    checkpoint.params()?;
    Ok(checkpoint)
}
