//! Activation upsampling, proposal scoring, and box selection.

use ndarray::Array2;

use super::{BBox, ProposalSet};
use crate::error::{Error, Result};
use crate::vlm::ActivationMap;

/// Bilinearly upsample a grid activation map to pixel resolution
/// (`image_size` is `(width, height)`, the result is `height x width`).
/// Cell centers are aligned: pixel `(x, y)` samples grid position
/// `((x + 0.5) * cols / width - 0.5, (y + 0.5) * rows / height - 0.5)`,
/// clamped at the borders. Interpolating non-negative values keeps the
/// result non-negative.
pub fn upsample_activation(map: &ActivationMap, image_size: (usize, usize)) -> Result<Array2<f64>> {
    let (rows, cols) = map.grid;
    if rows * cols != map.phi.len() {
        return Err(Error::invalid(format!(
            "grid {rows}x{cols} inconsistent with {} activations",
            map.phi.len()
        )));
    }
    let (width, height) = image_size;
    if width == 0 || height == 0 {
        return Err(Error::invalid("empty target image size"));
    }
    let grid = map.to_grid();
    let mut out = Array2::zeros((height, width));
    for y in 0..height {
        let gy =
            ((y as f64 + 0.5) * rows as f64 / height as f64 - 0.5).clamp(0.0, (rows - 1) as f64);
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let fy = gy - y0 as f64;
        for x in 0..width {
            let gx =
                ((x as f64 + 0.5) * cols as f64 / width as f64 - 0.5).clamp(0.0, (cols - 1) as f64);
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let fx = gx - x0 as f64;
            out[(y, x)] = grid[(y0, x0)] * (1.0 - fy) * (1.0 - fx)
                + grid[(y0, x1)] * (1.0 - fy) * fx
                + grid[(y1, x0)] * fy * (1.0 - fx)
                + grid[(y1, x1)] * fy * fx;
        }
    }
    Ok(out)
}

/// Sum the pixel activation over the box and divide by the square root of
/// the box area. Pixels outside the map contribute nothing.
pub fn score_proposal(phi: &Array2<f64>, bbox: &BBox) -> Result<f64> {
    let (height, width) = phi.dim();
    if height == 0 || width == 0 {
        return Err(Error::invalid("empty activation map"));
    }
    // Integer pixels x with x_min <= x < x_max are ceil(x_min)..ceil(x_max).
    let x0 = bbox.x_min().ceil().max(0.0) as usize;
    let x1 = (bbox.x_max().ceil() as isize).clamp(0, width as isize) as usize;
    let y0 = bbox.y_min().ceil().max(0.0) as usize;
    let y1 = (bbox.y_max().ceil() as isize).clamp(0, height as isize) as usize;
    let mut sum = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            sum += phi[(y, x)];
        }
    }
    Ok(sum / bbox.area().sqrt())
}

/// Score every proposal and return the best box with its score. Ties are
/// broken toward the lowest proposal index.
pub fn select_box(phi: &Array2<f64>, proposals: &ProposalSet) -> Result<(BBox, f64)> {
    if proposals.boxes.is_empty() {
        return Err(Error::invalid("empty proposal set"));
    }
    let mut best: Option<(BBox, f64)> = None;
    for bbox in &proposals.boxes {
        let score = score_proposal(phi, bbox)?;
        match &best {
            Some((_, s)) if score <= *s => {}
            _ => best = Some((*bbox, score)),
        }
    }
    Ok(best.expect("nonempty proposals"))
}
