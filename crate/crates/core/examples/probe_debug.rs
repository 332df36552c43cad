//! Diagnostic for the certification gate: for a handful of candidate names
//! and one target color, print where the activation mass sits and which
//! proposal wins. Not part of the test suite.

use capdet::pseudo_label::{
    region_merge_proposals, select_box, tokenize_caption, upsample_activation, BBox,
};
use capdet::vlm::{grad_cam_from_heads, mean_activation, ModelConfig, ToyEncoder};
use image::RgbImage;

fn main() {
    let model = ModelConfig::default();
    let encoder = ToyEncoder::new(model.clone()).unwrap();
    let (w, h) = (64u32, 64u32);
    let size = 14u32;

    // Rebuild one probe image by hand: target at the first quarter.
    let dataset = capdet::data_io::SynthConfig::default();
    let _ = dataset;
    let mut image = RgbImage::new(w, h);
    // Flat background in the middle of the background band.
    for p in image.pixels_mut() {
        *p = image::Rgb([168, 168, 168]);
    }
    let color = [242, 12, 12];
    let d1 = [12, 242, 12];
    let d2 = [12, 12, 242];
    let draw = |img: &mut RgbImage, cx: u32, cy: u32, c: [u8; 3]| {
        let r = size as f64 / 2.0;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx as f64;
                let dy = y as f64 + 0.5 - cy as f64;
                if dx * dx + dy * dy <= r * r {
                    img.put_pixel(x, y, image::Rgb(c));
                }
            }
        }
    };
    draw(&mut image, 16, 16, color);
    draw(&mut image, 48, 16, d1);
    draw(&mut image, 16, 48, d2);
    let target = BBox::new(9.0, 9.0, 23.0, 23.0).unwrap();

    let visual = encoder.encode_image(&image).unwrap();
    let proposals = region_merge_proposals(&image).unwrap();
    println!("proposals ({}):", proposals.boxes.len());
    for b in &proposals.boxes {
        println!(
            "  [{:>4.0},{:>4.0},{:>4.0},{:>4.0}] iou(target)={:.3}",
            b.x_min(),
            b.y_min(),
            b.x_max(),
            b.y_max(),
            b.iou(&target)
        );
    }

    let names = [
        "bola", "kemi", "rasu", "devo", "niva", "gotu", "pafe", "zuli", "mose", "tivu",
    ];
    for name in names {
        let tokens = tokenize_caption(&format!("a photo of a {name}"));
        let text = encoder.encode_text(&tokens).unwrap();
        let (records, score) = encoder.forward(&text, &visual).unwrap();
        let token_index = tokens.iter().position(|t| t == name).unwrap();
        let layer = model.gradcam_layer;
        let record = &records[layer - 1];
        let grads = &score.gradients[layer - 1];
        let map = grad_cam_from_heads(&record.attn, grads, token_index, record.grid).unwrap();
        let map = mean_activation(&[map]).unwrap();
        let phi = upsample_activation(&map, (w as usize, h as usize)).unwrap();

        // Mass inside the target box vs total.
        let mut inside = 0.0;
        let mut total = 0.0;
        for y in 0..h as usize {
            for x in 0..w as usize {
                let v = phi[(y, x)];
                total += v;
                if (9..23).contains(&x) && (9..23).contains(&y) {
                    inside += v;
                }
            }
        }
        // Raw attention mass over the target cells at the gradcam layer.
        let att = record.attn[0].view();
        let mut att_target = 0.0;
        for gy in 0..8 {
            for gx in 0..8 {
                if gy <= 2 && gx <= 2 {
                    att_target += att[(token_index, gy * 8 + gx)];
                }
            }
        }
        let (bbox, s) = select_box(&phi, &proposals).unwrap();
        // Score the true box and the background box directly for comparison.
        let score_of = |b: &BBox| {
            let x0 = b.x_min().ceil() as usize;
            let y0 = b.y_min().ceil() as usize;
            let x1 = (b.x_max().ceil() as usize).min(w as usize);
            let y1 = (b.y_max().ceil() as usize).min(h as usize);
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += phi[(y, x)];
                }
            }
            sum / (((x1 - x0) * (y1 - y0)) as f64).sqrt()
        };
        println!(
            "{name}: mass_in_target={:.3} att(3x3 target cells, head0)={:.3} chosen=[{:.0},{:.0},{:.0},{:.0}] iou={:.3} score={:.4} target_score={:.4}",
            inside / total.max(1e-12),
            att_target,
            bbox.x_min(), bbox.y_min(), bbox.x_max(), bbox.y_max(),
            bbox.iou(&target),
            s,
            score_of(&target),
        );
    }
}
