//! Visualization: blend an activation heatmap over the image, outline the
//! proposals, and highlight the selected box.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::pseudo_label::{upsample_activation, BBox};
use crate::vlm::ActivationMap;

const HEAT: [u8; 3] = [255, 32, 16];
const PROPOSAL: [u8; 3] = [0, 0, 0];
const SELECTED: [u8; 3] = [220, 16, 16];

fn blend(base: u8, over: u8, alpha: f64) -> u8 {
    (base as f64 * (1.0 - alpha) + over as f64 * alpha).round() as u8
}

/// Draw a rectangle outline of the given thickness (grown inward), clipped to
/// the image.
fn draw_box(image: &mut RgbImage, bbox: &BBox, color: [u8; 3], thickness: u32) {
    let (w, h) = image.dimensions();
    let x0 = bbox.x_min().round().max(0.0) as u32;
    let y0 = bbox.y_min().round().max(0.0) as u32;
    let x1 = (bbox.x_max().round() as i64).clamp(0, w as i64) as u32;
    let y1 = (bbox.y_max().round() as i64).clamp(0, h as i64) as u32;
    if x0 >= x1 || y0 >= y1 {
        return;
    }
    for py in y0..y1 {
        for px in x0..x1 {
            let on_edge = px < x0 + thickness
                || px >= x1.saturating_sub(thickness)
                || py < y0 + thickness
                || py >= y1.saturating_sub(thickness);
            if on_edge {
                image.put_pixel(px, py, Rgb(color));
            }
        }
    }
}

/// Write a visualization of one activation map: values below half of the
/// maximum are zeroed, the rest blend into the image with opacity
/// proportional to value (the maximum renders fully opaque). Proposals get
/// thin black outlines; the selected box, when given, a thick red one.
/// Output dimensions equal the input image.
pub fn export_overlay(
    image: &RgbImage,
    map: &ActivationMap,
    proposals: &[BBox],
    selected: Option<&BBox>,
    path: &Path,
) -> Result<()> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("empty image"));
    }
    let phi = upsample_activation(map, (w as usize, h as usize))?;
    let max = phi.iter().cloned().fold(0.0f64, f64::max);
    let mut out = image.clone();
    if max > 0.0 {
        let half = max / 2.0;
        for (pixel, &v) in out.pixels_mut().zip(phi.iter()) {
            // Fig-style zeroing: everything below half the max is dropped.
            if v < half {
                continue;
            }
            let alpha = v / max;
            let Rgb([r, g, b]) = *pixel;
            *pixel = Rgb([
                blend(r, HEAT[0], alpha),
                blend(g, HEAT[1], alpha),
                blend(b, HEAT[2], alpha),
            ]);
        }
    }
    for bbox in proposals {
        draw_box(&mut out, bbox, PROPOSAL, 1);
    }
    if let Some(bbox) = selected {
        draw_box(&mut out, bbox, SELECTED, 2);
    }
    out.save(path).map_err(Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn map_with(values: Vec<f64>) -> ActivationMap {
        ActivationMap {
            token_index: 1,
            phi: Array1::from_vec(values),
            grid: (2, 2),
            object_name: String::from("obj"),
        }
    }

    #[test]
    fn output_dimensions_match_and_all_zero_map_changes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.png");
        let image = RgbImage::from_pixel(8, 6, Rgb([100, 100, 100]));
        let map = map_with(vec![0.0; 4]);
        export_overlay(&image, &map, &[], None, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (8, 6));
        assert_eq!(back, image, "zero map must leave pixels untouched");
    }

    #[test]
    fn half_max_rule_and_full_opacity_peak() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.png");
        let image = RgbImage::from_pixel(2, 2, Rgb([100, 100, 100]));
        // One strong cell, one at 40% (below half), two zeros. On a 2x2 image
        // each pixel samples one grid cell exactly.
        let map = map_with(vec![1.0, 0.4, 0.0, 0.0]);
        export_overlay(&image, &map, &[], None, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        // Peak pixel: alpha 1 → pure heat color.
        assert_eq!(back.get_pixel(0, 0).0, HEAT);
        // Below-half pixel untouched.
        assert_eq!(back.get_pixel(1, 0).0, [100, 100, 100]);
        assert_eq!(back.get_pixel(0, 1).0, [100, 100, 100]);
    }

    #[test]
    fn boxes_are_drawn() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.png");
        let image = RgbImage::from_pixel(10, 10, Rgb([100, 100, 100]));
        let map = map_with(vec![0.0; 4]);
        let proposal = BBox::new(1.0, 1.0, 9.0, 9.0).unwrap();
        let selected = BBox::new(2.0, 2.0, 8.0, 8.0).unwrap();
        export_overlay(&image, &map, &[proposal], Some(&selected), &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.get_pixel(1, 1).0, PROPOSAL);
        assert_eq!(back.get_pixel(2, 2).0, SELECTED);
        assert_eq!(back.get_pixel(5, 5).0, [100, 100, 100]);
    }

    #[test]
    fn unwritable_path_errors() {
        let image = RgbImage::from_pixel(2, 2, Rgb([0, 0, 0]));
        let map = map_with(vec![0.0; 4]);
        let path = Path::new("/nonexistent-dir-zzz/x.png");
        assert!(export_overlay(&image, &map, &[], None, path).is_err());
    }
}
