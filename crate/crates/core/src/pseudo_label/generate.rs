//! Pseudo-label generation: caption mentions → activation maps → boxes.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use ndarray::Array2;
use rayon::prelude::*;

use super::{
    grid_proposals, match_vocabulary, region_merge_proposals, select_box, tokenize_caption,
    upsample_activation, ObjectVocabulary, ProposalSet, PseudoBoxLabel,
};
use crate::data_io::ImageCaptionPair;
use crate::error::{Error, Result};
use crate::vlm::{grad_cam_from_heads, import, mean_activation, ToyEncoder};

/// Per-pair attention/gradient data at the activation layer.
pub struct PairActivations {
    pub tokens: Vec<String>,
    /// Per head, `N_T x N_V`.
    pub attn: Vec<Array2<f64>>,
    /// Per head, `N_T x N_V`.
    pub grads: Vec<Array2<f64>>,
    pub grid: (usize, usize),
}

/// Anything that can produce attention maps and similarity gradients for an
/// image-caption pair: the toy encoder, or tensors imported from a real model.
pub trait ActivationSource: Sync {
    fn pair_activations(&self, pair: &ImageCaptionPair) -> Result<PairActivations>;
}

/// Runs the toy encoder end to end and extracts its configured layer.
pub struct ToyActivationSource<'a> {
    pub encoder: &'a ToyEncoder,
}

impl ActivationSource for ToyActivationSource<'_> {
    fn pair_activations(&self, pair: &ImageCaptionPair) -> Result<PairActivations> {
        let visual = self.encoder.encode_image(&pair.image)?;
        let tokens = tokenize_caption(&pair.caption);
        let text = self.encoder.encode_text(&tokens)?;
        let (records, score) = self.encoder.forward(&text, &visual)?;
        let layer = self.encoder.config().gradcam_layer;
        let record = &records[layer - 1];
        Ok(PairActivations {
            tokens,
            attn: record.attn.clone(),
            grads: score.gradients[layer - 1].clone(),
            grid: record.grid,
        })
    }
}

/// Reads `{pair_id}.json` tensor records from a directory (see
/// [`crate::vlm::import`]). `layer` selects the 1-based layer to use; `None`
/// takes each record's last layer.
pub struct ImportedActivationSource {
    pub dir: PathBuf,
    pub layer: Option<usize>,
}

impl ActivationSource for ImportedActivationSource {
    fn pair_activations(&self, pair: &ImageCaptionPair) -> Result<PairActivations> {
        let path = self.dir.join(format!("{}.json", pair.pair_id));
        if !path.is_file() {
            return Err(Error::pair(
                &pair.pair_id,
                format!("no tensor record at {}", path.display()),
            ));
        }
        let record = import::load_pair_record(&path)?;
        let layer = self.layer.unwrap_or(record.layers.len());
        let (attn, grads) = record.layer_matrices(layer)?;
        Ok(PairActivations {
            tokens: record.tokens.clone(),
            attn,
            grads,
            grid: (record.grid[0], record.grid[1]),
        })
    }
}

/// Where proposal boxes come from.
pub enum ProposalProvider {
    Grid {
        scales: Vec<f64>,
        ratios: Vec<f64>,
        stride: f64,
    },
    RegionMerge,
    Table(BTreeMap<String, ProposalSet>),
}

impl ProposalProvider {
    /// Desk-scale grid defaults: scales 16/32, ratios 1/2/0.5, stride 8.
    pub fn default_grid() -> Self {
        ProposalProvider::Grid {
            scales: vec![16.0, 32.0],
            ratios: vec![1.0, 2.0, 0.5],
            stride: 8.0,
        }
    }

    pub fn proposals_for(&self, pair: &ImageCaptionPair) -> Result<ProposalSet> {
        match self {
            ProposalProvider::Grid {
                scales,
                ratios,
                stride,
            } => {
                let (w, h) = pair.image.dimensions();
                grid_proposals((w as usize, h as usize), scales, ratios, *stride)
            }
            ProposalProvider::RegionMerge => region_merge_proposals(&pair.image),
            ProposalProvider::Table(table) => table
                .get(&pair.pair_id)
                .cloned()
                .ok_or_else(|| Error::pair(&pair.pair_id, "no proposals in table")),
        }
    }
}

/// Generate pseudo boxes for every vocabulary mention in one pair's caption.
///
/// Each mention's activation map is the mean of its span tokens' maps,
/// upsampled to pixel resolution; the box is the proposal maximizing the
/// area-normalized activation sum. Mentions of the same category selecting
/// the same box collapse to one label. No mentions → empty vec.
pub fn generate_pseudo_labels(
    pair: &ImageCaptionPair,
    vocab: &ObjectVocabulary,
    source: &dyn ActivationSource,
    provider: &ProposalProvider,
) -> Result<Vec<PseudoBoxLabel>> {
    let acts = source.pair_activations(pair)?;
    let matches = match_vocabulary(&acts.tokens, vocab);
    if matches.is_empty() {
        return Ok(Vec::new());
    }
    let proposals = provider.proposals_for(pair)?;
    if proposals.boxes.is_empty() {
        return Err(Error::pair(&pair.pair_id, "empty proposal set"));
    }
    let (w, h) = pair.image.dimensions();
    let image_size = (w as usize, h as usize);
    let mut labels = Vec::new();
    let mut emitted: HashSet<(String, [u64; 4])> = HashSet::new();
    for m in matches {
        let token_maps = (m.token_span[0]..m.token_span[1])
            .map(|t| grad_cam_from_heads(&acts.attn, &acts.grads, t, acts.grid))
            .collect::<Result<Vec<_>>>()?;
        let map = mean_activation(&token_maps)?.with_name(m.category.clone());
        let phi = upsample_activation(&map, image_size)?;
        let (bbox, score) = select_box(&phi, &proposals)?;
        if emitted.insert((m.category.clone(), bbox.bits())) {
            labels.push(PseudoBoxLabel {
                pair_id: pair.pair_id.clone(),
                category: m.category,
                bbox,
                score,
                token_span: m.token_span,
            });
        }
    }
    Ok(labels)
}

#[derive(Debug, Default, Clone)]
pub struct GenerateStats {
    pub pairs_total: usize,
    pub pairs_ok: usize,
    pub pairs_failed: usize,
    pub labels: usize,
    pub per_category: BTreeMap<String, usize>,
}

/// Run generation over many pairs. Per-pair failures are logged and skipped;
/// the output is sorted by `(pair_id, token_span, category)` so it does not
/// depend on thread scheduling.
pub fn generate_for_pairs(
    pairs: &[ImageCaptionPair],
    vocab: &ObjectVocabulary,
    source: &dyn ActivationSource,
    provider: &ProposalProvider,
) -> (Vec<PseudoBoxLabel>, GenerateStats) {
    let results: Vec<(String, Result<Vec<PseudoBoxLabel>>)> = pairs
        .par_iter()
        .map(|pair| {
            (
                pair.pair_id.clone(),
                generate_pseudo_labels(pair, vocab, source, provider),
            )
        })
        .collect();
    let mut stats = GenerateStats {
        pairs_total: pairs.len(),
        ..GenerateStats::default()
    };
    let mut labels = Vec::new();
    for (pair_id, result) in results {
        match result {
            Ok(mut l) => {
                stats.pairs_ok += 1;
                labels.append(&mut l);
            }
            Err(e) => {
                stats.pairs_failed += 1;
                log::warn!("pair {pair_id}: {e}");
            }
        }
    }
    labels.sort_by(|a, b| {
        a.pair_id
            .cmp(&b.pair_id)
            .then(a.token_span.cmp(&b.token_span))
            .then(a.category.cmp(&b.category))
    });
    stats.labels = labels.len();
    for l in &labels {
        *stats.per_category.entry(l.category.clone()).or_insert(0) += 1;
    }
    (labels, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo_label::{BBox, ProposalSource};

    /// A fabricated source whose activation is concentrated on chosen cells
    /// per token, for pipeline tests without the encoder.
    struct FixedSource {
        tokens: Vec<String>,
        phi_rows: Array2<f64>,
        grid: (usize, usize),
    }

    impl ActivationSource for FixedSource {
        fn pair_activations(&self, _pair: &ImageCaptionPair) -> Result<PairActivations> {
            // attn = the map itself, grads = 1 everywhere: grad_cam returns attn.
            Ok(PairActivations {
                tokens: self.tokens.clone(),
                attn: vec![self.phi_rows.clone()],
                grads: vec![Array2::from_elem(self.phi_rows.raw_dim(), 1.0)],
                grid: self.grid,
            })
        }
    }

    fn pair(w: u32, h: u32, caption: &str) -> ImageCaptionPair {
        ImageCaptionPair {
            pair_id: "t0".into(),
            image: image::RgbImage::from_pixel(w, h, image::Rgb([128, 128, 128])),
            caption: caption.into(),
        }
    }

    #[test]
    fn mention_selects_box_over_its_activation() {
        // 2x2 grid over a 16x16 image; token "dot" (index 2) activates cell
        // (0,1) only, so the top-right box must win.
        let tokens = tokenize_caption("a dot here");
        assert_eq!(tokens.len(), 5);
        let mut phi = Array2::zeros((5, 4));
        phi[(2, 1)] = 1.0;
        let source = FixedSource {
            tokens,
            phi_rows: phi,
            grid: (2, 2),
        };
        let vocab = ObjectVocabulary::from_names(&["dot"]).unwrap();
        let boxes = vec![
            BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
            BBox::new(8.0, 0.0, 16.0, 8.0).unwrap(),
            BBox::new(0.0, 8.0, 8.0, 16.0).unwrap(),
            BBox::new(8.0, 8.0, 16.0, 16.0).unwrap(),
        ];
        let provider = ProposalProvider::Table(BTreeMap::from([(
            "t0".to_string(),
            ProposalSet {
                boxes: boxes.clone(),
                source: ProposalSource::Loaded,
            },
        )]));
        let p = pair(16, 16, "a dot here");
        let labels = generate_pseudo_labels(&p, &vocab, &source, &provider).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].category, "dot");
        assert_eq!(labels[0].bbox, boxes[1]);
        assert_eq!(labels[0].token_span, [2, 3]);
        assert!(labels[0].score > 0.0);
    }

    #[test]
    fn no_mentions_is_empty_not_error() {
        let tokens = tokenize_caption("nothing here");
        let phi = Array2::zeros((4, 4));
        let source = FixedSource {
            tokens,
            phi_rows: phi,
            grid: (2, 2),
        };
        let vocab = ObjectVocabulary::from_names(&["dot"]).unwrap();
        let provider = ProposalProvider::RegionMerge;
        let labels =
            generate_pseudo_labels(&pair(16, 16, "nothing here"), &vocab, &source, &provider)
                .unwrap();
        assert!(labels.is_empty());
    }

    #[test]
    fn duplicate_category_same_box_collapses() {
        let tokens = tokenize_caption("dot and dot");
        let mut phi = Array2::zeros((5, 4));
        phi[(1, 3)] = 1.0;
        phi[(3, 3)] = 1.0;
        let source = FixedSource {
            tokens,
            phi_rows: phi,
            grid: (2, 2),
        };
        let vocab = ObjectVocabulary::from_names(&["dot"]).unwrap();
        let provider = ProposalProvider::Table(BTreeMap::from([(
            "t0".to_string(),
            ProposalSet {
                boxes: vec![BBox::new(8.0, 8.0, 16.0, 16.0).unwrap()],
                source: ProposalSource::Loaded,
            },
        )]));
        let labels =
            generate_pseudo_labels(&pair(16, 16, "dot and dot"), &vocab, &source, &provider)
                .unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].token_span, [1, 2]);
    }

    #[test]
    fn missing_table_entry_is_pair_error() {
        let tokens = tokenize_caption("a dot");
        let phi = Array2::zeros((4, 4));
        let source = FixedSource {
            tokens,
            phi_rows: phi,
            grid: (2, 2),
        };
        let vocab = ObjectVocabulary::from_names(&["dot"]).unwrap();
        let provider = ProposalProvider::Table(BTreeMap::new());
        let err =
            generate_pseudo_labels(&pair(16, 16, "a dot"), &vocab, &source, &provider).unwrap_err();
        assert!(matches!(err, Error::Pair { .. }));
    }

    #[test]
    fn batch_skips_failing_pairs_and_sorts() {
        let tokens = tokenize_caption("a dot");
        let mut phi = Array2::zeros((4, 4));
        phi[(2, 0)] = 1.0;
        let source = FixedSource {
            tokens,
            phi_rows: phi,
            grid: (2, 2),
        };
        let vocab = ObjectVocabulary::from_names(&["dot"]).unwrap();
        let mut table = BTreeMap::new();
        table.insert(
            "a".to_string(),
            ProposalSet {
                boxes: vec![BBox::new(0.0, 0.0, 8.0, 8.0).unwrap()],
                source: ProposalSource::Loaded,
            },
        );
        // pair "b" has no proposals and fails; pair "a" succeeds.
        let pairs = vec![
            ImageCaptionPair {
                pair_id: "b".into(),
                image: image::RgbImage::from_pixel(16, 16, image::Rgb([0, 0, 0])),
                caption: "a dot".into(),
            },
            ImageCaptionPair {
                pair_id: "a".into(),
                image: image::RgbImage::from_pixel(16, 16, image::Rgb([0, 0, 0])),
                caption: "a dot".into(),
            },
        ];
        let provider = ProposalProvider::Table(table);
        let (labels, stats) = generate_for_pairs(&pairs, &vocab, &source, &provider);
        assert_eq!(stats.pairs_total, 2);
        assert_eq!(stats.pairs_ok, 1);
        assert_eq!(stats.pairs_failed, 1);
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].pair_id, "a");
        assert_eq!(stats.per_category["dot"], 1);
    }
}
