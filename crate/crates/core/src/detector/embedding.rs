//! Region features: pooling grid cells under a box and projecting into the
//! text-embedding space.

use ndarray::Array1;

use super::DetectorParams;
use crate::error::{Error, Result};
use crate::pseudo_label::BBox;
use crate::vlm::VisualFeatures;

/// A projected region feature, comparable against text embeddings.
#[derive(Debug, Clone)]
pub struct RegionEmbedding {
    pub image_id: String,
    pub bbox: BBox,
    pub embedding: Array1<f64>,
}

/// Mean of the visual feature rows whose grid cells overlap the box with
/// positive area. `image_size` is `(width, height)` in pixels. Errors when
/// the box misses the grid entirely.
pub fn pooled_feature(
    features: &VisualFeatures,
    image_size: (usize, usize),
    bbox: &BBox,
) -> Result<Array1<f64>> {
    let (rows, cols) = features.grid;
    if rows * cols != features.features.nrows() {
        return Err(Error::invalid("visual rows inconsistent with grid"));
    }
    let (width, height) = image_size;
    if width == 0 || height == 0 {
        return Err(Error::invalid("empty image size"));
    }
    let cell_w = width as f64 / cols as f64;
    let cell_h = height as f64 / rows as f64;
    let mut sum = Array1::zeros(features.features.ncols());
    let mut count = 0usize;
    for gy in 0..rows {
        let y0 = gy as f64 * cell_h;
        let y1 = y0 + cell_h;
        if y1 <= bbox.y_min() || y0 >= bbox.y_max() {
            continue;
        }
        for gx in 0..cols {
            let x0 = gx as f64 * cell_w;
            let x1 = x0 + cell_w;
            if x1 <= bbox.x_min() || x0 >= bbox.x_max() {
                continue;
            }
            sum += &features.features.row(gy * cols + gx);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid(format!(
            "box [{}, {}, {}, {}] overlaps no grid cell of a {width}x{height} image",
            bbox.x_min(),
            bbox.y_min(),
            bbox.x_max(),
            bbox.y_max()
        )));
    }
    Ok(sum / count as f64)
}

/// Pool and project: `r = W·f + b`.
pub fn extract_region_embedding(
    features: &VisualFeatures,
    image_size: (usize, usize),
    bbox: &BBox,
    params: &DetectorParams,
    image_id: &str,
) -> Result<RegionEmbedding> {
    let f = pooled_feature(features, image_size, bbox)?;
    if f.len() != params.feature_dim() {
        return Err(Error::invalid(format!(
            "feature width {} != projection width {}",
            f.len(),
            params.feature_dim()
        )));
    }
    let embedding = params.w_proj.dot(&f) + &params.b_proj;
    Ok(RegionEmbedding {
        image_id: image_id.to_string(),
        bbox: *bbox,
        embedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, Array2};

    fn feats() -> VisualFeatures {
        // 2x2 grid, d = 2; each cell's feature encodes its index.
        let mut f = Array2::zeros((4, 2));
        for i in 0..4 {
            f[(i, 0)] = i as f64;
            f[(i, 1)] = 10.0 * i as f64;
        }
        VisualFeatures {
            features: f,
            grid: (2, 2),
        }
    }

    #[test]
    fn box_inside_one_cell_pools_that_cell() {
        // 16x16 image, cells are 8x8; box fully inside cell (1,1) = row 3.
        let f = feats();
        let b = BBox::new(9.0, 9.0, 15.0, 15.0).unwrap();
        let pooled = pooled_feature(&f, (16, 16), &b).unwrap();
        assert_abs_diff_eq!(pooled[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pooled[1], 30.0, epsilon = 1e-12);
    }

    #[test]
    fn box_spanning_cells_averages_them() {
        let f = feats();
        // Spans the top two cells (rows 0 and 1) with positive overlap each.
        let b = BBox::new(2.0, 2.0, 14.0, 6.0).unwrap();
        let pooled = pooled_feature(&f, (16, 16), &b).unwrap();
        assert_abs_diff_eq!(pooled[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn touching_a_cell_boundary_only_is_not_overlap() {
        let f = feats();
        // x range [8, 16) touches cell column 0 only at x = 8 (zero measure).
        let b = BBox::new(8.0, 0.0, 16.0, 8.0).unwrap();
        let pooled = pooled_feature(&f, (16, 16), &b).unwrap();
        assert_abs_diff_eq!(pooled[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn box_outside_grid_is_error() {
        let f = feats();
        let b = BBox::new(100.0, 100.0, 120.0, 120.0).unwrap();
        assert!(pooled_feature(&f, (16, 16), &b).is_err());
    }

    #[test]
    fn projection_is_affine() {
        let f = feats();
        let params = DetectorParams {
            w_proj: ndarray::arr2(&[[1.0, 0.0], [0.0, 0.5]]),
            b_proj: arr1(&[1.0, -1.0]),
            w_obj: arr1(&[0.0, 0.0]),
            b_obj: 0.0,
        };
        let b = BBox::new(9.0, 9.0, 15.0, 15.0).unwrap();
        let r = extract_region_embedding(&f, (16, 16), &b, &params, "img").unwrap();
        assert_abs_diff_eq!(r.embedding[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.embedding[1], 14.0, epsilon = 1e-12);
        assert_eq!(r.image_id, "img");
    }
}
