//! Toy multimodal encoder with analytic attention gradients.
//!
//! Caption tokens cross-attend over a grid of visual features for `L` layers.
//! Each layer computes, per head,
//!
//! ```text
//! A = softmax(Q Kᵀ / √d_head),   O = A · V_proj,
//! ```
//!
//! where the queries come from the previous layer's token states and keys and
//! values are projections of the (layer-independent) visual features. The
//! concatenated head outputs pass through a per-layer output projection to
//! become the next token states. An image-text similarity score `s` is read
//! out from the final states, and [`ToyEncoder::forward`] returns the exact
//! gradient `∂s/∂A` for every layer and head, treating each recorded attention
//! map as a leaf: the gradient flows through everything downstream of the map
//! (the layer's output and all layers above) but not back through the softmax
//! that produced it. [`ToyEncoder::finite_diff_grad`] checks those gradients
//! numerically by central differences.
//!
//! An activation map for token `t` is the head-averaged, gradient-gated
//! attention row `A_t ⊙ max(∂s/∂A_t, 0)` ([`grad_cam`]): attention says where
//! the token looked, the clamped gradient keeps only the regions that push the
//! similarity score up.
//!
//! The score is read out from the mean of the final `[CLS]` state and the
//! all-token mean state. Reading out `[CLS]` alone would make every non-`[CLS]`
//! gradient vanish identically, because token rows never mix in this
//! architecture — each token's state evolves independently of the others.
//!
//! The encoder itself is a fixed, seeded random network: deterministic in the
//! seed, never trained. Real-model tensors can be substituted through
//! [`import`].

mod encoder;
mod forward;
mod gradcam;
pub mod import;

pub(crate) use encoder::stream as encoder_stream;
pub use encoder::{ToyEncoder, CLS_TOKEN, SEP_TOKEN};
pub use gradcam::{grad_cam, grad_cam_from_heads, mean_activation};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the toy encoder. All sizes are desk-scale by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width `d`. Must be divisible by `n_heads`.
    pub dim: usize,
    /// Number of cross-attention layers `L`.
    pub layers: usize,
    /// Attention heads per layer.
    pub n_heads: usize,
    /// Visual feature grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// 1-based layer whose attention maps feed activation-map extraction.
    pub gradcam_layer: usize,
    /// Replace every projection with the identity (forces `n_heads = 1`), so a
    /// layer computes literally `softmax(H Vᵀ/√d) · V`. Used by oracle tests.
    pub identity_projections: bool,
    /// Seed for all encoder parameters and token embeddings.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 16,
            layers: 2,
            n_heads: 2,
            grid: (8, 8),
            gradcam_layer: 2,
            identity_projections: false,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.n_heads == 0 {
            return Err(Error::invalid(
                "model dims, layers and heads must be positive",
            ));
        }
        if self.dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::invalid("feature grid must be at least 1x1"));
        }
        if self.gradcam_layer == 0 || self.gradcam_layer > self.layers {
            return Err(Error::invalid(format!(
                "gradcam_layer {} outside 1..={}",
                self.gradcam_layer, self.layers
            )));
        }
        if self.identity_projections && self.n_heads != 1 {
            return Err(Error::invalid("identity projections require a single head"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Number of visual regions `N_V = rows * cols`.
    pub fn n_regions(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Visual side of an encoded pair: one feature row per grid cell, row-major
/// (`row = gy * cols + gx`).
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    /// `N_V x d`.
    pub features: Array2<f64>,
    /// `(rows, cols)` with `rows * cols = N_V`.
    pub grid: (usize, usize),
}

/// Text side of an encoded pair, marker tokens included.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// `N_T x d`.
    pub features: Array2<f64>,
    pub tokens: Vec<String>,
}

/// Attention maps and output states of one cross-attention layer.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// 1-based layer index.
    pub layer: usize,
    /// Per-head attention, each `N_T x N_V`; rows are probability vectors.
    pub attn: Vec<Array2<f64>>,
    /// Layer output states, `N_T x d`.
    pub hidden: Array2<f64>,
    /// Visual grid shape carried along for reshaping attention rows.
    pub grid: (usize, usize),
}

/// Similarity score plus `∂s/∂A` for every layer (outer index, 0-based layer
/// order) and head (inner index).
#[derive(Debug, Clone)]
pub struct SimilarityScore {
    pub value: f64,
    pub gradients: Vec<Vec<Array2<f64>>>,
}

/// Non-negative per-region activation for one token occurrence.
#[derive(Debug, Clone)]
pub struct ActivationMap {
    pub token_index: usize,
    /// Length `N_V`, reshapeable to `grid`.
    pub phi: Array1<f64>,
    pub grid: (usize, usize),
    /// Object/category name the map was computed for; empty when unknown.
    pub object_name: String,
}

impl ActivationMap {
    /// Reshape `phi` to the `(rows, cols)` grid.
    pub fn to_grid(&self) -> Array2<f64> {
        Array2::from_shape_vec(self.grid, self.phi.to_vec())
            .expect("phi length always matches grid")
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.object_name = name.into();
        self
    }
}
