//! capdet turns image captions into pseudo bounding-box labels and trains an
//! open-vocabulary detector on them.
//!
//! The pipeline has three stages:
//!
//! 1. A small multimodal encoder ([`vlm`]) cross-attends caption tokens over a
//!    grid of visual features and exposes exact analytic gradients of an
//!    image-text similarity score with respect to every attention map.
//! 2. Gradient-weighted attention maps are turned into per-object activation
//!    maps, and a box is selected for each caption-mentioned object from a
//!    proposal set by an area-normalized activation sum ([`pseudo_label`]).
//! 3. A detector head with a fixed text-embedding classifier is trained on the
//!    pseudo boxes and evaluated with AP@0.5 in a generalized base/novel
//!    setting ([`detector`], [`eval`]).
//!
//! [`data_io`] provides the file formats plus a synthetic shape world whose
//! exact ground truth makes the whole pipeline quantitatively testable, and
//! [`pipeline`] wires the stages together over an on-disk dataset.

pub mod data_io;
pub mod detector;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod pseudo_label;
pub mod vlm;

pub use error::{Error, Result};
