//! Synthetic shape world: colored shapes on a noise background with captions
//! that mention every object, exact ground-truth boxes, and a hidden linear
//! category→embedding map. The world is small enough to run in tests yet
//! rich enough to measure label quality and open-vocabulary transfer
//! quantitatively.
//!
//! Geometry is integer-aligned so that at zero jitter every rendered shape's
//! pixel extent equals its analytic bounding box exactly (triangles use odd
//! side lengths to keep the apex pixel on the box edge). The background noise
//! stays inside one color-quantization bin, so connected-component proposals
//! recover shape boxes pixel-exactly.
//!
//! Because the encoder is randomly initialized rather than pretrained, a
//! category name localizes only if its token happens to attend to cells of
//! its color. `certified_categories` searches a pseudo-word name pool and a
//! color wheel for (name, color) pairs that demonstrably localize across
//! positions and distractors, and the quantitative benchmarks are built from
//! those certified categories. Token maps are mention-invariant (no token
//! mixing in the encoder), so single-mention probes transfer exactly to
//! multi-mention captions.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::formats::{export_coco_ground_truth, save_pairs, PairEntry};
use super::{DatasetManifest, PairMeta, Split, MANIFEST_SCHEMA};
use crate::detector::TextEmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::GtItem;
use crate::pseudo_label::{
    normalize_token, region_merge_proposals, select_box, tokenize_caption, upsample_activation,
    BBox, ObjectVocabulary, ProposalSet,
};
use crate::vlm::{
    encoder_stream, grad_cam_from_heads, mean_activation, ModelConfig, TextFeatures, ToyEncoder,
    VisualFeatures,
};

/// Background noise: per channel uniform in `BG_MEAN ± BG_SPREAD`, which stays
/// inside one 64-wide quantization bin so the background forms one component.
const BG_MEAN: i32 = 168;
const BG_SPREAD: i32 = 8;
/// Minimum distance from shapes to the image border and to each other.
const MARGIN: u32 = 2;
const GAP: f64 = 2.0;
const PLACE_TRIES: usize = 200;

/// Words the caption templates may use; category names must avoid them.
const FILLER_WORDS: &[&str] = &[
    "a",
    "an",
    "and",
    "the",
    "of",
    "background",
    "photo",
    "image",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn onehot_index(self) -> usize {
        match self {
            Shape::Circle => 0,
            Shape::Square => 1,
            Shape::Triangle => 2,
        }
    }
}

/// One category of the shape world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
}

/// Perturbation levels; all zero by default for pixel-exact geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct JitterConfig {
    /// Uniform position offset in pixels.
    pub position: f64,
    /// Relative size perturbation.
    pub scale: f64,
    /// Per-channel color perturbation as a fraction of 255.
    pub color: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_images: usize,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
    pub categories: Vec<CategorySpec>,
    /// Inclusive range of objects per image; categories never repeat within
    /// one image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of shape side lengths in pixels.
    pub size_range: (u32, u32),
    /// Category names without ground-truth supervision; they appear only in
    /// test images unless `novel_in_train` is set.
    pub novel: Vec<String>,
    /// Allow novel objects in training images (their captions would then
    /// mention them, which desk-scale negative mining punishes; off by
    /// default so the benchmark isolates embedding transfer).
    pub novel_in_train: bool,
    /// Fraction of images assigned to the test split.
    pub test_fraction: f64,
    /// Templates containing an `{objects}` placeholder.
    pub caption_templates: Vec<String>,
    /// Probability that an object's mention is omitted from the caption.
    pub drop_mentions: f64,
    pub jitter: JitterConfig,
    /// Width of the hidden category→embedding map.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: 100,
            image_size: (64, 64),
            categories: Vec::new(),
            objects_per_image: (1, 3),
            size_range: (10, 16),
            novel: Vec::new(),
            novel_in_train: false,
            test_fraction: 0.25,
            caption_templates: vec![
                "a photo of {objects}".into(),
                "an image showing {objects}".into(),
                "{objects} on a plain background".into(),
            ],
            drop_mentions: 0.0,
            jitter: JitterConfig::default(),
            embed_dim: 8,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        if w == 0 || h == 0 {
            return Err(Error::invalid("empty image size"));
        }
        if self.categories.is_empty() {
            return Err(Error::invalid("no categories configured"));
        }
        let mut reserved: BTreeSet<String> = FILLER_WORDS.iter().map(|w| w.to_string()).collect();
        for template in &self.caption_templates {
            if !template.contains("{objects}") {
                return Err(Error::invalid(format!(
                    "template {template:?} lacks the {{objects}} placeholder"
                )));
            }
            for token in tokenize_caption(&template.replace("{objects}", "")) {
                reserved.insert(token);
            }
        }
        let mut names = BTreeSet::new();
        for spec in &self.categories {
            if spec.name.is_empty() || normalize_token(&spec.name) != spec.name {
                return Err(Error::invalid(format!(
                    "category name {:?} must be a single lowercase alphanumeric token",
                    spec.name
                )));
            }
            if reserved.contains(&spec.name) {
                return Err(Error::invalid(format!(
                    "category name {:?} collides with caption template text",
                    spec.name
                )));
            }
            if !names.insert(&spec.name) {
                return Err(Error::invalid(format!(
                    "duplicate category name {:?}",
                    spec.name
                )));
            }
            if !color_clears_background(spec.color, self.jitter.color) {
                return Err(Error::invalid(format!(
                    "category {:?} color {:?} is not separable from the background \
                     under quantization at the configured jitter",
                    spec.name, spec.color
                )));
            }
        }
        for i in 0..self.categories.len() {
            for j in (i + 1)..self.categories.len() {
                let a = self.categories[i].color;
                let b = self.categories[j].color;
                let dist = (0..3)
                    .map(|k| (a[k] as i32 - b[k] as i32).abs())
                    .max()
                    .unwrap();
                if dist < 32 {
                    return Err(Error::invalid(format!(
                        "colors of {:?} and {:?} are too similar ({dist} < 32 max-channel \
                         distance)",
                        self.categories[i].name, self.categories[j].name
                    )));
                }
            }
        }
        for name in &self.novel {
            if !self.categories.iter().any(|c| &c.name == name) {
                return Err(Error::invalid(format!(
                    "novel category {name:?} is not configured"
                )));
            }
        }
        let (min_obj, max_obj) = self.objects_per_image;
        if min_obj == 0 || min_obj > max_obj {
            return Err(Error::invalid(
                "objects per image must be a nonempty range from >= 1",
            ));
        }
        let train_pool = if self.novel_in_train || self.novel.is_empty() {
            self.categories.len()
        } else {
            self.categories.len() - self.novel.len()
        };
        if max_obj > train_pool {
            return Err(Error::invalid(format!(
                "up to {max_obj} distinct objects per image but only {train_pool} categories \
                 are available in training images"
            )));
        }
        let (min_s, max_s) = self.size_range;
        if min_s < 4 || min_s > max_s {
            return Err(Error::invalid("size range must satisfy 4 <= min <= max"));
        }
        if max_s + 2 * MARGIN > w.min(h) {
            return Err(Error::invalid("largest shape does not fit in the image"));
        }
        // Gross packing feasibility; exact placement is checked at render time.
        let budget = (w as usize) * (h as usize);
        let worst = max_obj * ((max_s as usize + 4) * (max_s as usize + 4));
        if worst > budget {
            return Err(Error::invalid(format!(
                "{max_obj} objects of size {max_s} cannot pack a {w}x{h} image"
            )));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("test fraction must be in [0, 1]"));
        }
        if !self.novel.is_empty() && self.n_images > 0 && self.test_fraction == 0.0 {
            return Err(Error::invalid("novel categories need a test split"));
        }
        if !(0.0..=1.0).contains(&self.drop_mentions) {
            return Err(Error::invalid(
                "drop-mentions probability must be in [0, 1]",
            ));
        }
        if self.jitter.position < 0.0 || self.jitter.scale < 0.0 || self.jitter.color < 0.0 {
            return Err(Error::invalid("jitter levels must be non-negative"));
        }
        if self.caption_templates.is_empty() {
            return Err(Error::invalid("no caption templates"));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embedding width must be positive"));
        }
        Ok(())
    }

    pub fn base_names(&self) -> Vec<String> {
        self.categories
            .iter()
            .map(|c| c.name.clone())
            .filter(|n| !self.novel.contains(n))
            .collect()
    }
}

/// True when the color cannot fall into the background's quantization bin
/// even at the configured jitter level.
fn color_clears_background(color: [u8; 3], color_jitter: f64) -> bool {
    let m = (color_jitter * 255.0).ceil() as i32;
    let bg_lo = 128 - m;
    let bg_hi = 191 + m;
    color
        .iter()
        .any(|&c| (c as i32) < bg_lo || (c as i32) > bg_hi)
}

/// Everything `synth_dataset` produces: the manifest, rendered images, the
/// embedding table, and the hidden map behind it (kept for analysis/tests).
pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub images: BTreeMap<String, RgbImage>,
    pub embeddings: TextEmbeddingTable,
    /// `embed_dim x 6` map from `[rgb - 0.5; shape one-hot]`.
    pub hidden_map: Array2<f64>,
}

struct PlacedObject {
    category: usize,
    bbox: BBox,
    color: [u8; 3],
}

/// Embedding input of a category: centered RGB plus the shape one-hot.
fn category_input(spec: &CategorySpec) -> Array1<f64> {
    let mut x = Array1::zeros(6);
    for (k, &c) in spec.color.iter().enumerate() {
        x[k] = c as f64 / 255.0 - 0.5;
    }
    x[3 + spec.shape.onehot_index()] = 1.0;
    x
}

/// Draw the hidden map and derive the embedding table; retry until every
/// category's nearest embedding (by dot product) is itself, so the matching
/// task is well-posed.
fn build_embedding_table(
    categories: &[CategorySpec],
    embed_dim: usize,
    seed: u64,
) -> Result<(TextEmbeddingTable, Array2<f64>)> {
    let names: Vec<String> = categories.iter().map(|c| c.name.clone()).collect();
    for attempt in 0..50 {
        let mut rng = encoder_stream(seed, &format!("hidden-map:{attempt}"));
        let scale = 1.0 / 6f64.sqrt();
        let e = Array2::from_shape_fn((embed_dim, 6), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        });
        let mut vectors = Array2::zeros((categories.len(), embed_dim));
        for (i, spec) in categories.iter().enumerate() {
            let emb = e.dot(&category_input(spec));
            vectors.row_mut(i).assign(&emb);
        }
        let well_posed = (0..categories.len()).all(|i| {
            let self_sim = vectors.row(i).dot(&vectors.row(i));
            (0..categories.len())
                .all(|j| j == i || vectors.row(i).dot(&vectors.row(j)) + 1e-9 < self_sim)
        });
        if well_posed {
            let table = TextEmbeddingTable::new(names, vectors)?;
            return Ok((table, e));
        }
    }
    Err(Error::invalid(
        "could not draw a hidden map with well-separated category embeddings",
    ))
}

/// A shape's analytic bounding box: `[x0, y0, x0 + s, y0 + s)`.
fn shape_bbox(x0: f64, y0: f64, size: f64) -> Result<BBox> {
    BBox::new(x0, y0, x0 + size, y0 + size)
}

/// Fill a pixel when its center lies inside the shape. Integer-aligned
/// squares and circles of any size and triangles of odd size render with a
/// pixel extent exactly equal to the analytic box.
fn pixel_in_shape(shape: Shape, bbox: &BBox, px: u32, py: u32) -> bool {
    let cx = (bbox.x_min() + bbox.x_max()) / 2.0;
    let cy = (bbox.y_min() + bbox.y_max()) / 2.0;
    let s = bbox.width();
    let x = px as f64 + 0.5;
    let y = py as f64 + 0.5;
    match shape {
        Shape::Square => {
            x >= bbox.x_min() && x < bbox.x_max() && y >= bbox.y_min() && y < bbox.y_max()
        }
        Shape::Circle => {
            let r = s / 2.0;
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        }
        Shape::Triangle => {
            // Apex up: at depth t in [0, 1] below the apex row the half-width
            // grows linearly to s/2.
            let t = (y - bbox.y_min()) / s;
            if !(0.0..=1.0).contains(&t) {
                return false;
            }
            (x - cx).abs() <= t * s / 2.0
        }
    }
}

fn render_object(image: &mut RgbImage, shape: Shape, bbox: &BBox, color: [u8; 3]) {
    let x0 = bbox.x_min().floor().max(0.0) as u32;
    let y0 = bbox.y_min().floor().max(0.0) as u32;
    let x1 = (bbox.x_max().ceil() as u32).min(image.width());
    let y1 = (bbox.y_max().ceil() as u32).min(image.height());
    for py in y0..y1 {
        for px in x0..x1 {
            if pixel_in_shape(shape, bbox, px, py) {
                image.put_pixel(px, py, Rgb(color));
            }
        }
    }
}

fn fill_background(image: &mut RgbImage, rng: &mut impl Rng) {
    for pixel in image.pixels_mut() {
        let mut channels = [0u8; 3];
        for c in &mut channels {
            *c = (BG_MEAN + rng.random_range(-BG_SPREAD..=BG_SPREAD)) as u8;
        }
        *pixel = Rgb(channels);
    }
}

/// "a x", "a x and a y", "a x, a y and a z".
fn join_mentions(names: &[&str]) -> String {
    let mentions: Vec<String> = names.iter().map(|n| format!("a {n}")).collect();
    match mentions.len() {
        0 => String::new(),
        1 => mentions[0].clone(),
        n => format!("{} and {}", mentions[..n - 1].join(", "), mentions[n - 1]),
    }
}

/// Place `n_objects` distinct categories into one image. Returns analytic
/// boxes; placement keeps `GAP` pixels between boxes and `MARGIN` from the
/// border, or errors when the image is too crowded.
fn place_objects(
    cfg: &SynthConfig,
    order: &[usize],
    n_objects: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PlacedObject>> {
    let (w, h) = cfg.image_size;
    let mut placed: Vec<PlacedObject> = Vec::new();
    for &cat in order.iter().take(n_objects) {
        let spec = &cfg.categories[cat];
        let mut s = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
        if spec.shape == Shape::Triangle {
            // Odd sizes keep the apex pixel on the analytic box edge.
            s = if s % 2 == 0 { s - 1 } else { s };
        }
        let mut size = s as f64;
        if cfg.jitter.scale > 0.0 {
            size *= 1.0 + rng.random_range(-cfg.jitter.scale..=cfg.jitter.scale);
            size = size.max(4.0);
        }
        let mut ok = None;
        for _ in 0..PLACE_TRIES {
            let max_x = (w - MARGIN) as f64 - size;
            let max_y = (h - MARGIN) as f64 - size;
            if max_x < MARGIN as f64 || max_y < MARGIN as f64 {
                break;
            }
            let mut x0 = rng.random_range(MARGIN..=(max_x.floor() as u32)) as f64;
            let mut y0 = rng.random_range(MARGIN..=(max_y.floor() as u32)) as f64;
            if cfg.jitter.position > 0.0 {
                x0 = (x0 + rng.random_range(-cfg.jitter.position..=cfg.jitter.position))
                    .clamp(MARGIN as f64, max_x);
                y0 = (y0 + rng.random_range(-cfg.jitter.position..=cfg.jitter.position))
                    .clamp(MARGIN as f64, max_y);
            }
            let bbox = shape_bbox(x0, y0, size)?;
            let padded = BBox::new(
                bbox.x_min() - GAP,
                bbox.y_min() - GAP,
                bbox.x_max() + GAP,
                bbox.y_max() + GAP,
            )?;
            if placed
                .iter()
                .all(|p| padded.intersection_area(&p.bbox) == 0.0)
            {
                ok = Some(bbox);
                break;
            }
        }
        let bbox = ok.ok_or_else(|| {
            Error::invalid(format!(
                "could not place {} objects of size <= {} in a {w}x{h} image",
                n_objects, cfg.size_range.1
            ))
        })?;
        let mut color = spec.color;
        if cfg.jitter.color > 0.0 {
            let m = cfg.jitter.color * 255.0;
            for c in &mut color {
                let v = *c as f64 + rng.random_range(-m..=m);
                *c = v.clamp(0.0, 255.0).round() as u8;
            }
        }
        placed.push(PlacedObject {
            category: cat,
            bbox,
            color,
        });
    }
    Ok(placed)
}

/// Generate the full dataset: images, captions, ground truth, splits, and the
/// embedding table. Deterministic per seed; every object appears in the
/// ground truth whether or not its caption mention survives `drop_mentions`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let (table, hidden_map) = build_embedding_table(&cfg.categories, cfg.embed_dim, cfg.seed)?;
    let base_names = cfg.base_names();
    let base_idx: Vec<usize> = cfg
        .categories
        .iter()
        .enumerate()
        .filter(|(_, c)| !cfg.novel.contains(&c.name))
        .map(|(i, _)| i)
        .collect();
    let novel_idx: Vec<usize> = cfg
        .categories
        .iter()
        .enumerate()
        .filter(|(_, c)| cfg.novel.contains(&c.name))
        .map(|(i, _)| i)
        .collect();
    let all_idx: Vec<usize> = (0..cfg.categories.len()).collect();

    // Split assignment up front: images are generated against their split's
    // category pool.
    let mut split_rng = encoder_stream(cfg.seed, "split");
    let mut order: Vec<usize> = (0..cfg.n_images).collect();
    order.shuffle(&mut split_rng);
    let mut n_test = (cfg.n_images as f64 * cfg.test_fraction).round() as usize;
    if cfg.test_fraction > 0.0 && cfg.n_images > 0 {
        n_test = n_test.clamp(1, cfg.n_images);
    }
    let test_ids: BTreeSet<usize> = order.iter().take(n_test).copied().collect();

    let mut pairs = Vec::new();
    let mut ground_truth: BTreeMap<String, Vec<GtItem>> = BTreeMap::new();
    let mut images = BTreeMap::new();
    let mut train_rank = 0usize;
    let mut test_rank = 0usize;
    for i in 0..cfg.n_images {
        let split = if test_ids.contains(&i) {
            Split::Test
        } else {
            Split::Train
        };
        let pool = match split {
            Split::Train if !cfg.novel_in_train => &base_idx,
            _ => &all_idx,
        };
        // Deterministic coverage: early images of each split lead with each
        // category eligible there, so small datasets still exercise every
        // category.
        let forced = match split {
            Split::Test => {
                let f = if !novel_idx.is_empty() && test_rank < novel_idx.len() * 4 {
                    Some(novel_idx[test_rank % novel_idx.len()])
                } else if test_rank < novel_idx.len() * 4 + all_idx.len() {
                    Some(all_idx[(test_rank - novel_idx.len() * 4) % all_idx.len()])
                } else {
                    None
                };
                test_rank += 1;
                f
            }
            Split::Train => {
                let f = if train_rank < pool.len() * 2 {
                    Some(pool[train_rank % pool.len()])
                } else {
                    None
                };
                train_rank += 1;
                f
            }
        };
        let mut place_rng = encoder_stream(cfg.seed, &format!("image:{i}:place"));
        let n_objects = place_rng
            .random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1)
            .min(pool.len());
        let mut order: Vec<usize> = match forced {
            Some(f) => {
                let mut rest: Vec<usize> = pool.iter().copied().filter(|&c| c != f).collect();
                rest.shuffle(&mut place_rng);
                let mut v = vec![f];
                v.extend(rest);
                v
            }
            None => {
                let mut v = pool.clone();
                v.shuffle(&mut place_rng);
                v
            }
        };
        order.truncate(n_objects);
        let placed = place_objects(cfg, &order, n_objects, &mut place_rng)?;

        let mut image = RgbImage::new(cfg.image_size.0, cfg.image_size.1);
        let mut bg_rng = encoder_stream(cfg.seed, &format!("image:{i}:bg"));
        fill_background(&mut image, &mut bg_rng);
        for obj in &placed {
            render_object(
                &mut image,
                cfg.categories[obj.category].shape,
                &obj.bbox,
                obj.color,
            );
        }

        let mut cap_rng = encoder_stream(cfg.seed, &format!("image:{i}:caption"));
        let mut mention_order: Vec<usize> = (0..placed.len()).collect();
        mention_order.shuffle(&mut cap_rng);
        let mentioned: Vec<&str> = mention_order
            .iter()
            .filter(|_| cap_rng.random_range(0.0..1.0) >= cfg.drop_mentions)
            .map(|&j| cfg.categories[placed[j].category].name.as_str())
            .collect();
        let template = &cfg.caption_templates[cap_rng.random_range(0..cfg.caption_templates.len())];
        let caption = if mentioned.is_empty() {
            "a photo of the background".to_string()
        } else {
            template.replace("{objects}", &join_mentions(&mentioned))
        };

        let pair_id = format!("pair-{i:05}");
        ground_truth.insert(
            pair_id.clone(),
            placed
                .iter()
                .map(|obj| GtItem {
                    category: cfg.categories[obj.category].name.clone(),
                    bbox: obj.bbox,
                })
                .collect(),
        );
        pairs.push(PairMeta {
            pair_id: pair_id.clone(),
            image_path: format!("images/{pair_id}.png"),
            caption,
            split,
        });
        images.insert(pair_id, image);
    }

    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        image_size: (cfg.image_size.0 as usize, cfg.image_size.1 as usize),
        categories: cfg.categories.iter().map(|c| c.name.clone()).collect(),
        base: base_names,
        novel: cfg.novel.clone(),
        pairs,
        ground_truth,
        synth: Some(cfg.clone()),
    };
    manifest.validate()?;
    Ok(SynthOutput {
        manifest,
        images,
        embeddings: table,
        hidden_map,
    })
}

/// Write a dataset directory: `manifest.json`, `images/*.png`, `pairs.jsonl`,
/// `vocab.jsonl`, `embeddings.json`, and COCO-style `gt.json`.
pub fn write_dataset(dir: &Path, out: &SynthOutput) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    for (pair_id, image) in &out.images {
        image
            .save(dir.join("images").join(format!("{pair_id}.png")))
            .map_err(|e| Error::pair(pair_id, e.to_string()))?;
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&out.manifest)?,
    )?;
    let entries: Vec<PairEntry> = out
        .manifest
        .pairs
        .iter()
        .map(|m| PairEntry {
            pair_id: m.pair_id.clone(),
            image_path: m.image_path.clone(),
            caption: m.caption.clone(),
        })
        .collect();
    save_pairs(&dir.join("pairs.jsonl"), &entries)?;
    ObjectVocabulary::from_names(&out.manifest.categories)?.save_jsonl(&dir.join("vocab.jsonl"))?;
    out.embeddings.save(&dir.join("embeddings.json"))?;
    let sizes: BTreeMap<String, (u32, u32)> = out
        .images
        .iter()
        .map(|(id, img)| (id.clone(), img.dimensions()))
        .collect();
    export_coco_ground_truth(&dir.join("gt.json"), &out.manifest.ground_truth, &sizes)?;
    Ok(())
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Candidate colors for certification: a hue wheel at four brightness
/// levels (each ring offset so hues interleave), all guaranteed to clear the
/// background quantization bin.
fn candidate_colors() -> Vec<[u8; 3]> {
    let mut colors = Vec::new();
    for (ring, &v) in [0.95, 0.55, 0.75, 0.35].iter().enumerate() {
        for k in 0..36 {
            let color = hsv_to_rgb(k as f64 * 10.0 + ring as f64 * 2.5, 1.0, v);
            if color_clears_background(color, 0.0) {
                colors.push(color);
            }
        }
    }
    colors
}

/// Pseudo-word pool: two-syllable consonant-vowel names, seeded order.
fn candidate_names(seed: u64, count: usize) -> Vec<String> {
    const ONSETS: &[char] = &[
        'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
    ];
    const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
    let mut pool = Vec::new();
    for &c1 in ONSETS {
        for &v1 in VOWELS {
            for &c2 in ONSETS {
                for &v2 in VOWELS {
                    pool.push(format!("{c1}{v1}{c2}{v2}"));
                }
            }
        }
    }
    let mut rng = encoder_stream(seed, "name-pool");
    pool.shuffle(&mut rng);
    pool.truncate(count);
    pool
}

/// Probe positions for a `(w, h)` image and shape size `s`: the four quarter
/// points plus the top-left and bottom-right corners (the hardest transfer
/// cases, where the object straddles edge cells).
fn probe_positions(w: u32, h: u32, s: u32) -> Vec<(u32, u32)> {
    let quarter = |c: u32| c.saturating_sub(s / 2).max(MARGIN);
    vec![
        (quarter(w / 4), quarter(h / 4)),
        (quarter(3 * w / 4), quarter(h / 4)),
        (quarter(w / 4), quarter(3 * h / 4)),
        (quarter(3 * w / 4), quarter(3 * h / 4)),
        (MARGIN, MARGIN),
        (w.saturating_sub(s + MARGIN), h.saturating_sub(s + MARGIN)),
    ]
}

/// One certification probe: encoded image, its region proposals, and the
/// analytic box of the target object.
type Probe = (VisualFeatures, ProposalSet, BBox);

/// Triangles render pixel-exactly only at odd sizes.
fn render_size(shape: Shape, size: u32) -> u32 {
    match shape {
        Shape::Triangle if size % 2 == 0 => (size - 1).max(3),
        _ => size,
    }
}

/// True when the GAP-padded boxes do not touch.
fn boxes_separated(a: &BBox, b: &BBox) -> bool {
    a.x_max() + GAP <= b.x_min()
        || b.x_max() + GAP <= a.x_min()
        || a.y_max() + GAP <= b.y_min()
        || b.y_max() + GAP <= a.y_min()
}

/// Render and encode the probe battery for one target category: the shape at
/// every probe position and size, with each distractor at a following
/// position whenever it fits there without touching the target.
fn build_probes(
    encoder: &ToyEncoder,
    target: (Shape, [u8; 3]),
    distractors: &[(Shape, [u8; 3])],
    image_size: (u32, u32),
    probe_sizes: &[u32],
    tag: &str,
    seed: u64,
) -> Result<Vec<Probe>> {
    let (w, h) = image_size;
    let (shape, color) = target;
    let mut probes = Vec::new();
    for (zi, &base) in probe_sizes.iter().enumerate() {
        let size = render_size(shape, base);
        // Distractors probe at the largest size: generated scenes mix sizes
        // freely, so a small target next to large rivals must still win.
        let d_base = probe_sizes.iter().copied().max().unwrap_or(base);
        let positions = probe_positions(w, h, size);
        let n_pos = positions.len();
        for (pi, &(x0, y0)) in positions.iter().enumerate() {
            let mut image = RgbImage::new(w, h);
            let mut rng = encoder_stream(seed, &format!("{tag}:{zi}:{pi}"));
            fill_background(&mut image, &mut rng);
            let target_box = shape_bbox(x0 as f64, y0 as f64, size as f64)?;
            render_object(&mut image, shape, &target_box, color);
            for (k, &(d_shape, d_color)) in distractors.iter().enumerate() {
                let d_size = render_size(d_shape, d_base);
                let (dx, dy) = positions[(pi + k + 1) % n_pos];
                let dbox = shape_bbox(dx as f64, dy as f64, d_size as f64)?;
                if boxes_separated(&dbox, &target_box) {
                    render_object(&mut image, d_shape, &dbox, d_color);
                }
            }
            let visual = encoder.encode_image(&image)?;
            let proposals = region_merge_proposals(&image)?;
            probes.push((visual, proposals, target_box));
        }
    }
    Ok(probes)
}

/// Render `count` benchmark-statistics scenes: the target plus the rivals at
/// independently drawn sizes and positions under the generator's margin and
/// gap rules. Complements the canonical battery, which pins worst-case
/// positions but probes only the extreme sizes.
fn build_scene_probes(
    encoder: &ToyEncoder,
    target: (Shape, [u8; 3]),
    distractors: &[(Shape, [u8; 3])],
    image_size: (u32, u32),
    size_range: (u32, u32),
    count: usize,
    tag: &str,
    seed: u64,
) -> Result<Vec<Probe>> {
    let (w, h) = image_size;
    let mut probes = Vec::new();
    for si in 0..count {
        let mut rng = encoder_stream(seed, &format!("{tag}:scene:{si}"));
        let mut image = RgbImage::new(w, h);
        fill_background(&mut image, &mut rng);
        let mut placed: Vec<BBox> = Vec::new();
        let mut target_box = None;
        for (oi, &(shape, color)) in
            std::iter::once(&target).chain(distractors.iter()).enumerate()
        {
            let size = render_size(shape, rng.random_range(size_range.0..=size_range.1));
            let mut found = None;
            for _ in 0..PLACE_TRIES {
                let x0 = rng.random_range(MARGIN..=w - MARGIN - size);
                let y0 = rng.random_range(MARGIN..=h - MARGIN - size);
                let bbox = shape_bbox(x0 as f64, y0 as f64, size as f64)?;
                if placed.iter().all(|p| boxes_separated(&bbox, p)) {
                    found = Some(bbox);
                    break;
                }
            }
            // A rival that cannot be placed is dropped from this scene; the
            // target always places first.
            let Some(bbox) = found else { continue };
            render_object(&mut image, shape, &bbox, color);
            if oi == 0 {
                target_box = Some(bbox.clone());
            }
            placed.push(bbox);
        }
        let target_box =
            target_box.ok_or_else(|| Error::invalid("scene probe failed to place its target"))?;
        let visual = encoder.encode_image(&image)?;
        let proposals = region_merge_proposals(&image)?;
        probes.push((visual, proposals, target_box));
    }
    Ok(probes)
}

/// The attainable attribution strength of a target across its probes: per
/// probe, the head-mean positive part of the score gradient maximized over
/// the grid cells overlapping the target; across probes, the minimum. The
/// gradient factor does not depend on the caption, so a probe where it
/// vanishes on the target (None) rules out localization under any name, and
/// its magnitude bounds the activation any caption can put on the target —
/// box selection is only winnable against rivals of comparable strength.
fn probe_strength(
    encoder: &ToyEncoder,
    gate_text: &TextFeatures,
    probes: &[Probe],
    layer: usize,
    image_size: (u32, u32),
) -> Result<Option<f64>> {
    let (w, h) = image_size;
    let mut strength = f64::INFINITY;
    for (visual, _, target) in probes {
        let (records, score) = encoder.forward(gate_text, visual)?;
        let (rows, cols) = records[layer - 1].grid;
        let grads = &score.gradients[layer - 1];
        let cw = w as f64 / cols as f64;
        let ch = h as f64 / rows as f64;
        let gx0 = (target.x_min() / cw).floor().max(0.0) as usize;
        let gx1 = ((target.x_max() / cw).ceil().max(0.0) as usize).min(cols);
        let gy0 = (target.y_min() / ch).floor().max(0.0) as usize;
        let gy1 = ((target.y_max() / ch).ceil().max(0.0) as usize).min(rows);
        let mut best = 0.0_f64;
        for gy in gy0..gy1 {
            for gx in gx0..gx1 {
                let cell = gy * cols + gx;
                let g =
                    grads.iter().map(|g| g[[0, cell]].max(0.0)).sum::<f64>() / grads.len() as f64;
                best = best.max(g);
            }
        }
        if best <= 0.0 {
            return Ok(None);
        }
        strength = strength.min(best);
    }
    Ok(Some(strength))
}

/// True when the caption "a photo of a {name}" selects a box with IoU ≥ 0.5
/// against the true target on every probe.
fn name_localizes(
    encoder: &ToyEncoder,
    name: &str,
    probes: &[Probe],
    layer: usize,
    image_size: (u32, u32),
) -> Result<bool> {
    let (w, h) = image_size;
    let tokens = tokenize_caption(&format!("a photo of a {name}"));
    let text = encoder.encode_text(&tokens)?;
    let token_index = tokens
        .iter()
        .position(|t| t == name)
        .ok_or_else(|| Error::invalid("probe token vanished in tokenization"))?;
    for (visual, proposals, target) in probes {
        let (records, score) = encoder.forward(&text, visual)?;
        let record = &records[layer - 1];
        let grads = &score.gradients[layer - 1];
        let map = grad_cam_from_heads(&record.attn, grads, token_index, record.grid)?;
        let map = mean_activation(&[map])?;
        let phi = upsample_activation(&map, (w as usize, h as usize))?;
        let (bbox, _) = select_box(&phi, proposals)?;
        if bbox.iou(target) < 0.5 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Search for `n` (pseudo-word, color, shape) triples that the given encoder
/// provably localizes, in isolation and in each other's presence.
///
/// Stage one sweeps a hue wheel crossed with the three shapes and keeps the
/// candidates whose rendered probes — six positions at the two extreme sizes
/// — carry gradient support on the target everywhere, a caption-independent
/// precondition for localization. Stage two grows the vocabulary one member
/// at a time: a joining candidate must stay color- and margin-compatible
/// with every member, must find a pseudo-word name under which the
/// activation-map pipeline recovers its box (IoU ≥ 0.5) on every probe
/// rendered with its nearest committed rivals as distractors — the situation
/// benchmark scenes actually create — and must leave all committed members
/// still localizing. Deterministic per (model, seed).
///
/// This exists because the toy encoder is randomly initialized: arbitrary
/// words do not localize, but a searched vocabulary demonstrably does, which
/// is exactly what the quantitative benchmarks need.
pub fn certified_categories(
    model: &ModelConfig,
    n: usize,
    image_size: (u32, u32),
    size_range: (u32, u32),
    seed: u64,
) -> Result<Vec<CategorySpec>> {
    if n == 0 {
        return Err(Error::invalid("asked for zero certified categories"));
    }
    let encoder = ToyEncoder::new(model.clone())?;
    let colors = candidate_colors();
    if n > colors.len() {
        return Err(Error::invalid(format!(
            "cannot certify {n} categories from {} candidate colors",
            colors.len()
        )));
    }
    let names = candidate_names(seed, 1200);
    let (w, h) = image_size;
    let cap = w.min(h) / 4;
    let probe_sizes = [size_range.0.min(cap).max(4), size_range.1.min(cap).max(4)];
    let layer = model.gradcam_layer;
    let gate_text = encoder.encode_text(&tokenize_caption("a photo of a thing"))?;

    // Stage one: viability sweep. Keep every (color, shape) whose probes all
    // carry gradient support on the target — a necessary condition for
    // localization that is independent of the caption, so no name search is
    // spent here.
    let mut pool: Vec<(usize, Shape, [u8; 3], f64)> = Vec::new();
    for (ci, &color) in colors.iter().enumerate() {
        let d1 = colors[(ci + 5) % colors.len()];
        let d2 = colors[(ci + 11) % colors.len()];
        for (si, &shape) in [Shape::Circle, Shape::Square, Shape::Triangle]
            .iter()
            .enumerate()
        {
            let probes = build_probes(
                &encoder,
                (shape, color),
                &[(Shape::Circle, d1), (Shape::Circle, d2)],
                image_size,
                &probe_sizes,
                &format!("probe:{ci}:{si}"),
                seed,
            )?;
            match probe_strength(&encoder, &gate_text, &probes, layer, image_size)? {
                None => log::debug!("{shape:?} in {color:?} lacks gradient support on a probe"),
                Some(s) => pool.push((ci, shape, color, s)),
            }
        }
    }
    log::info!(
        "certification pool: {} of {} candidates have full gradient support",
        pool.len(),
        colors.len() * 3
    );

    if pool.len() < n {
        return Err(Error::invalid(format!(
            "only {} of {} candidates have gradient support; cannot certify {n} categories",
            pool.len(),
            colors.len() * 3
        )));
    }
    // Strongest first; ties keep sweep order (circles, squares, triangles).
    let mut pool = pool;
    pool.sort_by(|a, b| b.3.partial_cmp(&a.3).expect("finite strengths"));
    let dist = |a: [u8; 3], b: [u8; 3]| {
        (0..3)
            .map(|k| (a[k] as i32 - b[k] as i32).abs())
            .max()
            .unwrap()
    };

    // Stage two: grow the vocabulary one member at a time. A joining
    // candidate must (a) stay ≥ 32 per channel away from every member and
    // keep the input-space margin x·(x−y) ≥ 0.1 in both directions (without
    // it most draws of the hidden linear map would put some category's
    // embedding nearer to a neighbor than to itself and nearest-embedding
    // decoding would be ill-posed), (b) find a name under which it recovers
    // its box on every probe rendered with its nearest committed rivals as
    // distractors, and (c) leave every committed member localizing once it
    // arrives. Names are searched in context — against the actual rivals —
    // because the attention a name pays to competing colors is exactly what
    // generic distractors cannot predict.
    let memo: RefCell<BTreeMap<Vec<String>, bool>> = RefCell::new(BTreeMap::new());
    let member_ok = |spec: &CategorySpec, others: &[&CategorySpec]| -> Result<bool> {
        let key: Vec<String> = std::iter::once(&spec.name)
            .chain(others.iter().map(|o| &o.name))
            .cloned()
            .collect();
        if let Some(&hit) = memo.borrow().get(&key) {
            return Ok(hit);
        }
        let distractors: Vec<(Shape, [u8; 3])> =
            others.iter().map(|o| (o.shape, o.color)).collect();
        let tag = format!("xprobe:{}", spec.name);
        let mut probes = build_probes(
            &encoder,
            (spec.shape, spec.color),
            &distractors,
            image_size,
            &probe_sizes,
            &tag,
            seed,
        )?;
        probes.extend(build_scene_probes(
            &encoder,
            (spec.shape, spec.color),
            &distractors,
            image_size,
            (probe_sizes[0], probe_sizes[probe_sizes.len() - 1]),
            SCENE_PROBES,
            &tag,
            seed,
        )?);
        let ok = name_localizes(&encoder, &spec.name, &probes, layer, image_size)?;
        memo.borrow_mut().insert(key, ok);
        Ok(ok)
    };

    // Order for growth: strength octave first (a newcomer whose gradient
    // mask is many-fold weaker than every rival's cannot win box selection
    // under any name), hue-diverse within an octave via greedy farthest-point
    // traversal, sweep order on ties.
    let octave = |s: f64| s.log2().floor() as i64;
    let mut order: Vec<usize> = Vec::new();
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    while !remaining.is_empty() {
        let pick = remaining
            .iter()
            .enumerate()
            .max_by_key(|(_, &i)| {
                let spread = order
                    .iter()
                    .map(|&j| dist(pool[i].2, pool[j].2))
                    .min()
                    .unwrap_or(255);
                (octave(pool[i].3), spread, std::cmp::Reverse(i))
            })
            .map(|(pos, _)| pos)
            .expect("nonempty remaining");
        order.push(remaining.remove(pick));
    }
    let ordered: Vec<(usize, Shape, [u8; 3], f64)> = order.into_iter().map(|i| pool[i]).collect();

    let mut names = names;
    let certified = grow_window(
        GrowContext {
            encoder: &encoder,
            colors: &colors,
            probe_sizes: &probe_sizes,
            layer,
            image_size,
            seed,
            n,
            names: &mut names,
            member_ok: &member_ok,
            dist: &dist,
        },
        &ordered,
    )?;
    if certified.len() == n {
        for (i, spec) in certified.iter().enumerate() {
            log::info!(
                "certified category {} of {n}: {:?} {:?} with color {:?}",
                i + 1,
                spec.name,
                spec.shape,
                spec.color
            );
        }
        return Ok(certified);
    }
    Err(Error::invalid(format!(
        "only {} of {n} requested categories could be certified from a pool of {} \
         localizable candidates; try a different seed or model configuration",
        certified.len(),
        pool.len()
    )))
}

/// Shared state for one window-growth attempt inside `certified_categories`.
struct GrowContext<'a> {
    encoder: &'a ToyEncoder,
    colors: &'a [[u8; 3]],
    probe_sizes: &'a [u32],
    layer: usize,
    image_size: (u32, u32),
    seed: u64,
    n: usize,
    names: &'a mut Vec<String>,
    member_ok: &'a dyn Fn(&CategorySpec, &[&CategorySpec]) -> Result<bool>,
    dist: &'a dyn Fn([u8; 3], [u8; 3]) -> i32,
}

/// Grow a certified set from one strength window of candidates; returns the
/// members committed (possibly fewer than requested).
fn grow_window(
    ctx: GrowContext<'_>,
    window: &[(usize, Shape, [u8; 3], f64)],
) -> Result<Vec<CategorySpec>> {
    const NAME_TRIES: usize = 256;
    let GrowContext {
        encoder,
        colors,
        probe_sizes,
        layer,
        image_size,
        seed,
        n,
        names,
        member_ok,
        dist,
    } = ctx;
    let (w, h) = image_size;
    let mut certified: Vec<CategorySpec> = Vec::new();
    // Sweep the pool repeatedly: each pass widens the name budget and
    // redraws probe backgrounds, and earlier commits change which rivals a
    // candidate faces, so a candidate rejected in one pass can succeed in
    // the next. Stop at a full set or a pass with no progress.
    let mut pass = 0;
    loop {
        let committed_before = certified.len();
        for &(ci, shape, color, strength) in window {
            if certified.len() == n {
                break;
            }
            let probe_spec = CategorySpec {
                name: String::new(),
                shape,
                color,
            };
            let compatible = certified.iter().all(|m| {
                let xa = category_input(m);
                let xb = category_input(&probe_spec);
                let d = &xa - &xb;
                dist(m.color, color) >= 32 && xa.dot(&d) >= 0.1 && xb.dot(&(-&d)) >= 0.1
            });
            if !compatible {
                continue;
            }
            // Probe against the two nearest committed rivals, padded with
            // generic hue-wheel colors while the set is still small.
            let mut rivals: Vec<&CategorySpec> = certified.iter().collect();
            rivals.sort_by_key(|m| dist(m.color, color));
            rivals.truncate(2);
            let mut distractors: Vec<(Shape, [u8; 3])> =
                rivals.iter().map(|m| (m.shape, m.color)).collect();
            while distractors.len() < 2 {
                let pad = colors[(ci + 5 + 6 * distractors.len()) % colors.len()];
                distractors.push((Shape::Circle, pad));
            }
            let tag = format!("grow:{ci}:{}:{pass}", shape.onehot_index());
            let mut probes =
                build_probes(&encoder, (shape, color), &distractors, image_size, probe_sizes, &tag, seed)?;
            probes.extend(build_scene_probes(
                &encoder,
                (shape, color),
                &distractors,
                image_size,
                (probe_sizes[0], probe_sizes[probe_sizes.len() - 1]),
                SCENE_PROBES,
                &tag,
                seed,
            )?);
            let mut winner = None;
            for (ni, name) in names.iter().take(NAME_TRIES * (pass + 1)).enumerate() {
                if name_localizes(&encoder, name, &probes, layer, image_size)? {
                    winner = Some(ni);
                    break;
                }
            }
            let Some(ni) = winner else {
                log::debug!(
                "no name localizes {shape:?} in {color:?} (strength {strength:.2e}) next to its \
                 rivals"
            );
                if log::log_enabled!(log::Level::Trace) {
                    let name = &names[0];
                    let tokens = tokenize_caption(&format!("a photo of a {name}"));
                    let text = encoder.encode_text(&tokens)?;
                    let token_index = tokens.iter().position(|t| t == name).unwrap_or(1);
                    for (idx, (visual, proposals, target)) in probes.iter().enumerate() {
                        let (records, score) = encoder.forward(&text, visual)?;
                        let record = &records[layer - 1];
                        let grads = &score.gradients[layer - 1];
                        let map =
                            grad_cam_from_heads(&record.attn, grads, token_index, record.grid)?;
                        let map = mean_activation(&[map])?;
                        let phi = upsample_activation(&map, (w as usize, h as usize))?;
                        let (bbox, s) = select_box(&phi, proposals)?;
                        log::trace!(
                            "  {name:?} probe {idx}: iou {:.2} chose {:.0}x{:.0} at \
                         ({:.0},{:.0}) score {s:.4}; target {:.0}x{:.0} at ({:.0},{:.0})",
                            bbox.iou(target),
                            bbox.width(),
                            bbox.height(),
                            bbox.x_min(),
                            bbox.y_min(),
                            target.width(),
                            target.height(),
                            target.x_min(),
                            target.y_min(),
                        );
                    }
                }
                continue;
            };
            let candidate = CategorySpec {
                name: names[ni].clone(),
                shape,
                color,
            };
            // The newcomer's color must not steal any committed member's box.
            // Only members whose two nearest rivals now include the newcomer
            // need a fresh check; the others keep their verified worst case.
            let mut breaks = None;
            for m in &certified {
                let mut rs: Vec<&CategorySpec> = certified
                    .iter()
                    .filter(|o| o.name != m.name)
                    .chain(std::iter::once(&candidate))
                    .collect();
                rs.sort_by_key(|o| dist(o.color, m.color));
                rs.truncate(2);
                if !rs.iter().any(|o| o.name == candidate.name) {
                    continue;
                }
                if !member_ok(m, &rs)? {
                    breaks = Some(m.name.clone());
                    break;
                }
            }
            if let Some(victim) = breaks {
                log::debug!("{shape:?} in {color:?} would break {victim:?}; rejected");
                continue;
            }
            names.remove(ni);
            log::debug!(
                "certified {:?} as {shape:?} in {color:?} with {} members present",
                candidate.name,
                certified.len()
            );
            certified.push(candidate);
        }
        pass += 1;
        if certified.len() == n || certified.len() == committed_before || pass >= 4 {
            break;
        }
        log::debug!(
            "pass {pass}: {} of {n} members committed, sweeping again",
            certified.len()
        );
    }
    Ok(certified)
}
