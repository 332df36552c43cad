//! Gradient-weighted attention maps.

use ndarray::{Array1, Array2};

use super::{ActivationMap, AttentionRecord};
use crate::error::{Error, Result};

/// Activation map for one token: per head, the attention row gated by the
/// positive part of its gradient, `A_t ⊙ max(∂s/∂A_t, 0)`, then averaged over
/// heads. `grads` must be indexed like `record.attn`.
pub fn grad_cam(
    record: &AttentionRecord,
    grads: &[Array2<f64>],
    token_index: usize,
) -> Result<ActivationMap> {
    grad_cam_from_heads(&record.attn, grads, token_index, record.grid)
}

/// Same computation from bare per-head matrices, for callers that hold
/// attention and gradients outside an [`AttentionRecord`].
pub fn grad_cam_from_heads(
    attn: &[Array2<f64>],
    grads: &[Array2<f64>],
    token_index: usize,
    grid: (usize, usize),
) -> Result<ActivationMap> {
    if attn.is_empty() {
        return Err(Error::invalid("no attention heads"));
    }
    if attn.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} attention heads but {} gradient heads",
            attn.len(),
            grads.len()
        )));
    }
    let shape = attn[0].raw_dim();
    for m in attn.iter().chain(grads.iter()) {
        if m.raw_dim() != shape {
            return Err(Error::invalid("attention/gradient shape mismatch"));
        }
    }
    let (n_t, n_v) = (shape[0], shape[1]);
    if token_index >= n_t {
        return Err(Error::invalid(format!(
            "token index {token_index} outside 0..{n_t}"
        )));
    }
    if grid.0 * grid.1 != n_v {
        return Err(Error::invalid(format!(
            "grid {}x{} inconsistent with {n_v} regions",
            grid.0, grid.1
        )));
    }
    let mut phi = Array1::zeros(n_v);
    for (a, g) in attn.iter().zip(grads.iter()) {
        for i in 0..n_v {
            phi[i] += a[(token_index, i)] * g[(token_index, i)].max(0.0);
        }
    }
    phi /= attn.len() as f64;
    Ok(ActivationMap {
        token_index,
        phi,
        grid,
        object_name: String::new(),
    })
}

/// Element-wise mean of activation maps over a token span. All maps must
/// share a grid; the result keeps the first map's token index.
pub fn mean_activation(maps: &[ActivationMap]) -> Result<ActivationMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("no maps to average"))?;
    let mut phi = Array1::zeros(first.phi.len());
    for m in maps {
        if m.grid != first.grid || m.phi.len() != first.phi.len() {
            return Err(Error::invalid("activation maps disagree on grid"));
        }
        phi += &m.phi;
    }
    phi /= maps.len() as f64;
    Ok(ActivationMap {
        token_index: first.token_index,
        phi,
        grid: first.grid,
        object_name: first.object_name.clone(),
    })
}
