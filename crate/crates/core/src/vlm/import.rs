//! Imported attention/gradient tensors from a real model.
//!
//! The toy encoder can be replaced by per-pair JSON records produced offline
//! by any model that exposes cross-attention maps and similarity gradients.
//! One file per pair, named `{pair_id}.json`:
//!
//! ```json
//! {
//!   "schema": "capdet-pair-tensors-v1",
//!   "pair_id": "pair_00001",
//!   "grid": [8, 8],
//!   "tokens": ["[CLS]", "a", "cat", "[SEP]"],
//!   "layers": [
//!     {
//!       "attention": [[[...], ...], ...],   // [head][token][region]
//!       "grad":      [[[...], ...], ...]    // [head][token][region]
//!     }
//!   ]
//! }
//! ```
//!
//! Attention rows must be probability vectors (validated to 1e-3); gradients
//! are unconstrained reals. `layers[0]` is the first cross-attention layer.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAIR_TENSOR_SCHEMA: &str = "capdet-pair-tensors-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerTensors {
    /// `[head][token][region]`, rows sum to 1.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// `[head][token][region]`.
    pub grad: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairTensorRecord {
    pub schema: String,
    pub pair_id: String,
    /// `(rows, cols)` of the visual grid.
    pub grid: [usize; 2],
    pub tokens: Vec<String>,
    pub layers: Vec<LayerTensors>,
}

fn to_matrix(data: &[Vec<f64>], n_t: usize, n_v: usize, what: &str) -> Result<Array2<f64>> {
    if data.len() != n_t {
        return Err(Error::invalid(format!(
            "{what}: {} token rows, expected {n_t}",
            data.len()
        )));
    }
    let mut m = Array2::zeros((n_t, n_v));
    for (t, row) in data.iter().enumerate() {
        if row.len() != n_v {
            return Err(Error::invalid(format!(
                "{what}: row {t} has {} regions, expected {n_v}",
                row.len()
            )));
        }
        for (i, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "{what}: non-finite value at ({t},{i})"
                )));
            }
            m[(t, i)] = v;
        }
    }
    Ok(m)
}

impl PairTensorRecord {
    pub fn validate(&self) -> Result<()> {
        if self.schema != PAIR_TENSOR_SCHEMA {
            return Err(Error::invalid(format!(
                "unknown tensor schema {:?}, expected {PAIR_TENSOR_SCHEMA:?}",
                self.schema
            )));
        }
        if self.tokens.is_empty() {
            return Err(Error::invalid("record has no tokens"));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("record has no layers"));
        }
        let n_v = self.grid[0] * self.grid[1];
        if n_v == 0 {
            return Err(Error::invalid("record grid is empty"));
        }
        let n_heads = self.layers[0].attention.len();
        if n_heads == 0 {
            return Err(Error::invalid("record has no attention heads"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.attention.len() != n_heads || layer.grad.len() != n_heads {
                return Err(Error::invalid(format!(
                    "layer {}: head count differs from layer 1",
                    l + 1
                )));
            }
            for (h, (a, g)) in layer.attention.iter().zip(&layer.grad).enumerate() {
                let attn = to_matrix(
                    a,
                    self.tokens.len(),
                    n_v,
                    &format!("layer {} head {h} attention", l + 1),
                )?;
                to_matrix(
                    g,
                    self.tokens.len(),
                    n_v,
                    &format!("layer {} head {h} grad", l + 1),
                )?;
                for (t, row) in attn.rows().into_iter().enumerate() {
                    let sum: f64 = row.sum();
                    if (sum - 1.0).abs() > 1e-3 || row.iter().any(|&v| v < -1e-9) {
                        return Err(Error::invalid(format!(
                            "layer {} head {h} token {t}: attention row is not a probability vector (sum {sum})",
                            l + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Attention and gradient matrices of one 1-based layer.
    pub fn layer_matrices(&self, layer: usize) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::invalid(format!(
                "layer {layer} outside 1..={}",
                self.layers.len()
            )));
        }
        let lt = &self.layers[layer - 1];
        let n_t = self.tokens.len();
        let n_v = self.grid[0] * self.grid[1];
        let attn = lt
            .attention
            .iter()
            .map(|a| to_matrix(a, n_t, n_v, "attention"))
            .collect::<Result<Vec<_>>>()?;
        let grads = lt
            .grad
            .iter()
            .map(|g| to_matrix(g, n_t, n_v, "grad"))
            .collect::<Result<Vec<_>>>()?;
        Ok((attn, grads))
    }
}

pub fn load_pair_record(path: &Path) -> Result<PairTensorRecord> {
    let text = fs::read_to_string(path)?;
    let record: PairTensorRecord = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(path, 0, format!("tensor record: {e}")))?;
    record
        .validate()
        .map_err(|e| Error::malformed(path, 0, e.to_string()))?;
    Ok(record)
}

pub fn save_pair_record(path: &Path, record: &PairTensorRecord) -> Result<()> {
    record.validate()?;
    fs::write(path, serde_json::to_string(record)?)?;
    Ok(())
}

/// Build an importable record from a toy-encoder forward pass, mainly so the
/// on-disk schema has a generator to test the loader against.
pub fn record_from_forward(
    pair_id: &str,
    tokens: &[String],
    records: &[super::AttentionRecord],
    score: &super::SimilarityScore,
) -> PairTensorRecord {
    let grid = records
        .first()
        .map(|r| [r.grid.0, r.grid.1])
        .unwrap_or([0, 0]);
    let layers = records
        .iter()
        .zip(&score.gradients)
        .map(|(rec, grads)| LayerTensors {
            attention: rec
                .attn
                .iter()
                .map(|a| a.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            grad: grads
                .iter()
                .map(|g| g.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
        })
        .collect();
    PairTensorRecord {
        schema: PAIR_TENSOR_SCHEMA.to_string(),
        pair_id: pair_id.to_string(),
        grid,
        tokens: tokens.to_vec(),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_record() -> PairTensorRecord {
        PairTensorRecord {
            schema: PAIR_TENSOR_SCHEMA.into(),
            pair_id: "p0".into(),
            grid: [1, 2],
            tokens: vec!["[CLS]".into(), "cat".into()],
            layers: vec![LayerTensors {
                attention: vec![vec![vec![0.5, 0.5], vec![0.25, 0.75]]],
                grad: vec![vec![vec![0.1, -0.2], vec![0.0, 1.0]]],
            }],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p0.json");
        let rec = tiny_record();
        save_pair_record(&path, &rec).unwrap();
        let back = load_pair_record(&path).unwrap();
        assert_eq!(back.pair_id, "p0");
        assert_eq!(back.tokens, rec.tokens);
        let (attn, grads) = back.layer_matrices(1).unwrap();
        assert_eq!(attn[0][(1, 1)], 0.75);
        assert_eq!(grads[0][(1, 1)], 1.0);
    }

    #[test]
    fn rejects_non_probability_rows() {
        let mut rec = tiny_record();
        rec.layers[0].attention[0][0] = vec![0.9, 0.5];
        assert!(rec.validate().is_err());
    }

    #[test]
    fn rejects_bad_schema_and_shapes() {
        let mut rec = tiny_record();
        rec.schema = "something-else".into();
        assert!(rec.validate().is_err());

        let mut rec = tiny_record();
        rec.layers[0].grad[0][0] = vec![1.0];
        assert!(rec.validate().is_err());

        let mut rec = tiny_record();
        rec.layers.clear();
        assert!(rec.validate().is_err());
    }

    #[test]
    fn layer_out_of_range() {
        let rec = tiny_record();
        assert!(rec.layer_matrices(0).is_err());
        assert!(rec.layer_matrices(2).is_err());
    }
}
