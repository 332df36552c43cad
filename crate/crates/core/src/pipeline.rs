//! End-to-end orchestration shared by the command-line tool and the
//! integration tests: encode images for the detector, generate labels for a
//! dataset, and run inference over many images.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data_io::{ImageCaptionPair, LoadedDataset, Split};
use crate::detector::{
    infer, DetectionResult, DetectorParams, InferOptions, TextEmbeddingTable, TrainImage,
};
use crate::error::Result;
use crate::pseudo_label::{
    generate_for_pairs, GenerateStats, ProposalProvider, PseudoBoxLabel, ToyActivationSource,
};
use crate::vlm::{ModelConfig, ToyEncoder};

/// Encode every pair into the detector's per-image inputs: visual features
/// plus the proposal set used for negative mining and inference. Parallel
/// per image with a deterministic (sorted) result.
pub fn encode_images(
    encoder: &ToyEncoder,
    pairs: &[ImageCaptionPair],
    provider: &ProposalProvider,
) -> Result<BTreeMap<String, TrainImage>> {
    let entries: Vec<(String, TrainImage)> = pairs
        .par_iter()
        .map(|pair| {
            let features = encoder.encode_image(&pair.image)?;
            let proposals = provider.proposals_for(pair)?;
            let (w, h) = pair.image.dimensions();
            Ok((
                pair.pair_id.clone(),
                TrainImage {
                    image_id: pair.pair_id.clone(),
                    features,
                    image_size: (w as usize, h as usize),
                    proposals,
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(entries.into_iter().collect())
}

/// Generate pseudo labels for one split of a dataset with the toy encoder
/// and the dataset's stored vocabulary.
pub fn generate_dataset_labels(
    dataset: &LoadedDataset,
    split: Split,
    model: &ModelConfig,
    provider: &ProposalProvider,
) -> Result<(Vec<PseudoBoxLabel>, GenerateStats)> {
    let pairs = dataset.pairs(split)?;
    let encoder = ToyEncoder::new(model.clone())?;
    let source = ToyActivationSource { encoder: &encoder };
    let vocab = dataset.vocabulary()?;
    Ok(generate_for_pairs(&pairs, &vocab, &source, provider))
}

/// Run inference over every encoded image against a class subset. Parallel
/// per image; output ordered by image id, then each image's detections in
/// their confidence order.
pub fn run_inference(
    images: &BTreeMap<String, TrainImage>,
    subset: &[String],
    params: &DetectorParams,
    table: &TextEmbeddingTable,
    options: &InferOptions,
) -> Result<Vec<DetectionResult>> {
    let per_image: Vec<Vec<DetectionResult>> = images
        .par_iter()
        .map(|(id, img)| {
            infer(
                id,
                &img.features,
                img.image_size,
                &img.proposals.boxes,
                subset,
                params,
                table,
                options,
            )
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}
