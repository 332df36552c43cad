//! SGD training on pseudo labels and ground-truth fine-tuning.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::Rng;

use super::{
    detection_loss, pooled_feature, DetectorParams, Target, TextEmbeddingTable, TrainConfig,
};
use crate::error::{Error, Result};
use crate::pseudo_label::{BBox, ProposalSet, PseudoBoxLabel};
use crate::vlm::{encoder_stream, VisualFeatures};

/// Per-image inputs to training: encoded features plus the proposal set that
/// negatives are mined from.
pub struct TrainImage {
    pub image_id: String,
    pub features: VisualFeatures,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
    pub proposals: ProposalSet,
}

/// One region sample with its pooled feature, precomputed once.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image_id: String,
    pub feature: Array1<f64>,
    pub target: Target,
}

/// Build positive samples from pseudo boxes and negative samples from
/// proposals whose IoU with every pseudo box of their image stays below
/// `cfg.negative_iou`. Labels must reference known images and categories.
pub fn build_samples(
    labels: &[PseudoBoxLabel],
    images: &BTreeMap<String, TrainImage>,
    table: &TextEmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(Vec<TrainSample>, Vec<TrainSample>)> {
    let mut boxes_by_image: BTreeMap<&str, Vec<BBox>> = BTreeMap::new();
    let mut positives = Vec::new();
    for label in labels {
        let img = images.get(&label.pair_id).ok_or_else(|| {
            Error::invalid(format!(
                "label references unknown image {:?}",
                label.pair_id
            ))
        })?;
        let class = table.category_index(&label.category).ok_or_else(|| {
            Error::invalid(format!(
                "label category {:?} not in embedding table",
                label.category
            ))
        })?;
        let feature = pooled_feature(&img.features, img.image_size, &label.bbox)?;
        positives.push(TrainSample {
            image_id: label.pair_id.clone(),
            feature,
            target: Target::Class(class),
        });
        boxes_by_image
            .entry(&label.pair_id)
            .or_default()
            .push(label.bbox);
    }
    let mut negatives = Vec::new();
    for (id, img) in images {
        let empty = Vec::new();
        let positives_here = boxes_by_image.get(id.as_str()).unwrap_or(&empty);
        for bbox in &img.proposals.boxes {
            let overlaps = positives_here
                .iter()
                .any(|p| p.iou(bbox) >= cfg.negative_iou);
            if !overlaps {
                let feature = pooled_feature(&img.features, img.image_size, bbox)?;
                negatives.push(TrainSample {
                    image_id: id.clone(),
                    feature,
                    target: Target::Background,
                });
            }
        }
    }
    Ok((positives, negatives))
}

/// Batch composition: positives come first, then `negative_ratio` times as
/// many negatives, all sampled with replacement.
fn batch_counts(cfg: &TrainConfig, have_negatives: bool) -> (usize, usize) {
    if !have_negatives {
        return (cfg.batch_size, 0);
    }
    let n_pos = ((cfg.batch_size as f64 / (1.0 + cfg.negative_ratio)).round() as usize)
        .clamp(1, cfg.batch_size);
    (n_pos, cfg.batch_size - n_pos)
}

/// SGD over precomputed samples. Weight decay applies to the weight matrices
/// only; the embedding table is read-only throughout.
pub fn train_from_samples(
    mut params: DetectorParams,
    positives: &[TrainSample],
    negatives: &[TrainSample],
    table: &TextEmbeddingTable,
    cfg: &TrainConfig,
) -> Result<DetectorParams> {
    cfg.validate()?;
    if positives.is_empty() {
        return Err(Error::invalid("no positive samples to train on"));
    }
    if negatives.is_empty() {
        log::warn!("training without negative samples: all batches are positive");
    }
    let mut rng = encoder_stream(cfg.seed, "train-batches");
    let (n_pos, n_neg) = batch_counts(cfg, !negatives.is_empty());
    for iteration in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(n_pos + n_neg);
        for _ in 0..n_pos {
            let s = &positives[rng.random_range(0..positives.len())];
            batch.push((s.feature.clone(), s.target));
        }
        for _ in 0..n_neg {
            let s = &negatives[rng.random_range(0..negatives.len())];
            batch.push((s.feature.clone(), s.target));
        }
        let (loss, grads) = detection_loss(&batch, &params, table)?;
        let lr = cfg.learning_rate_at(iteration);
        params.w_proj.zip_mut_with(&grads.w_proj, |p, g| {
            *p -= lr * (g + cfg.weight_decay * *p);
        });
        params
            .b_proj
            .zip_mut_with(&grads.b_proj, |p, g| *p -= lr * g);
        params.w_obj.zip_mut_with(&grads.w_obj, |p, g| {
            *p -= lr * (g + cfg.weight_decay * *p);
        });
        params.b_obj -= lr * grads.b_obj;
        if iteration % 500 == 0 || iteration + 1 == cfg.iterations {
            log::info!(
                "iter {iteration:5}  lr {lr:.5}  loss {:.4} (match {:.4}, obj {:.4})",
                loss.total,
                loss.matching,
                loss.objectness
            );
        }
    }
    Ok(params)
}

/// Train from scratch on pseudo labels.
pub fn train(
    labels: &[PseudoBoxLabel],
    images: &BTreeMap<String, TrainImage>,
    table: &TextEmbeddingTable,
    cfg: &TrainConfig,
) -> Result<DetectorParams> {
    cfg.validate()?;
    let (positives, negatives) = build_samples(labels, images, table, cfg)?;
    let feature_dim = images
        .values()
        .next()
        .map(|i| i.features.features.ncols())
        .ok_or_else(|| Error::invalid("no training images"))?;
    let params = DetectorParams::init(feature_dim, table.dim(), cfg.seed)?;
    train_from_samples(params, &positives, &negatives, table, cfg)
}

/// Continue training from existing parameters, supervised by ground-truth
/// boxes restricted to the base categories. Annotations outside `base` are
/// dropped, so novel classes never appear as targets.
pub fn fine_tune(
    params: DetectorParams,
    ground_truth: &[(String, BBox, String)],
    base: &[String],
    images: &BTreeMap<String, TrainImage>,
    table: &TextEmbeddingTable,
    cfg: &TrainConfig,
) -> Result<DetectorParams> {
    if cfg.iterations == 0 {
        // Explicit no-op: callers may disable fine-tuning by zeroing the
        // iteration count, which plain training treats as invalid.
        return Ok(params);
    }
    cfg.validate()?;
    for b in base {
        if table.category_index(b).is_none() {
            return Err(Error::invalid(format!(
                "base category {b:?} not in embedding table"
            )));
        }
    }
    let as_labels: Vec<PseudoBoxLabel> = ground_truth
        .iter()
        .filter(|(_, _, category)| base.iter().any(|b| b == category))
        .map(|(image_id, bbox, category)| PseudoBoxLabel {
            pair_id: image_id.clone(),
            category: category.clone(),
            bbox: *bbox,
            score: 1.0,
            token_span: [0, 0],
        })
        .collect();
    if as_labels.is_empty() {
        return Err(Error::invalid("no base-class ground truth to fine-tune on"));
    }
    let (positives, negatives) = build_samples(&as_labels, images, table, cfg)?;
    train_from_samples(params, &positives, &negatives, table, cfg)
}
