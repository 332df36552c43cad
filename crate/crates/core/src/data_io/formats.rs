//! File formats: pair lists, pseudo-label files, and a COCO-style JSON
//! subset for ground truth and label export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Lines, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ImageCaptionPair;
use crate::error::{Error, Result};
use crate::eval::{GroundTruthSet, GtItem};
use crate::pseudo_label::{BBox, PseudoBoxLabel};

pub const PAIRS_SCHEMA: &str = "capdet-pairs-v1";
pub const LABELS_SCHEMA: &str = "capdet-labels-v1";

/// One line of a pairs file; `image_path` is relative to the file's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub pair_id: String,
    pub image_path: String,
    pub caption: String,
}

/// Returns true when the line is a leading schema header to skip.
fn is_schema_header(line_index: usize, line: &str, id_field: &str) -> bool {
    line_index == 0
        && serde_json::from_str::<serde_json::Value>(line)
            .map(|v| v.get("schema").is_some() && v.get(id_field).is_none())
            .unwrap_or(false)
}

pub fn save_pairs(path: &Path, entries: &[PairEntry]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "{}", serde_json::json!({ "schema": PAIRS_SCHEMA }))?;
    for entry in entries {
        writeln!(out, "{}", serde_json::to_string(entry)?)?;
    }
    Ok(())
}

/// Lazy stream over a pairs file, yielding pairs in file order. Decode
/// problems surface per record so one bad image does not kill the stream.
pub struct PairStream {
    path: PathBuf,
    base_dir: PathBuf,
    lines: Lines<BufReader<fs::File>>,
    line_no: usize,
}

pub fn load_pairs(path: &Path) -> Result<PairStream> {
    let file = fs::File::open(path)?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(PairStream {
        path: path.to_path_buf(),
        base_dir,
        lines: BufReader::new(file).lines(),
        line_no: 0,
    })
}

impl Iterator for PairStream {
    type Item = Result<ImageCaptionPair>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(e.into())),
            };
            let index = self.line_no;
            self.line_no += 1;
            if line.trim().is_empty() || is_schema_header(index, &line, "pair_id") {
                continue;
            }
            let entry: PairEntry = match serde_json::from_str(&line) {
                Ok(entry) => entry,
                Err(e) => return Some(Err(Error::malformed(&self.path, index + 1, e.to_string()))),
            };
            let image_path = if Path::new(&entry.image_path).is_absolute() {
                PathBuf::from(&entry.image_path)
            } else {
                self.base_dir.join(&entry.image_path)
            };
            let image = match image::open(&image_path) {
                Ok(img) => img.to_rgb8(),
                Err(e) => {
                    return Some(Err(Error::pair(
                        &entry.pair_id,
                        format!("cannot read {}: {e}", image_path.display()),
                    )))
                }
            };
            return Some(ImageCaptionPair::new(entry.pair_id, image, entry.caption));
        }
    }
}

/// Write labels in canonical order: (pair_id, token_span, category, box).
pub fn save_pseudo_labels(path: &Path, labels: &[PseudoBoxLabel]) -> Result<()> {
    let mut sorted: Vec<&PseudoBoxLabel> = labels.iter().collect();
    sorted.sort_by(|a, b| {
        a.pair_id
            .cmp(&b.pair_id)
            .then_with(|| a.token_span.cmp(&b.token_span))
            .then_with(|| a.category.cmp(&b.category))
            .then_with(|| a.bbox.bits().cmp(&b.bbox.bits()))
    });
    let mut out = fs::File::create(path)?;
    writeln!(out, "{}", serde_json::json!({ "schema": LABELS_SCHEMA }))?;
    for label in sorted {
        writeln!(out, "{}", serde_json::to_string(label)?)?;
    }
    Ok(())
}

pub fn load_pseudo_labels(path: &Path) -> Result<Vec<PseudoBoxLabel>> {
    let file = fs::File::open(path)?;
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || is_schema_header(i, &line, "pair_id") {
            continue;
        }
        let label: PseudoBoxLabel = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(path, i + 1, e.to_string()))?;
        labels.push(label);
    }
    Ok(labels)
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: i64,
    #[serde(default)]
    file_name: Option<String>,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: i64,
    image_id: i64,
    category_id: i64,
    /// `[x, y, width, height]`.
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
}

/// Image key: the file name stem when present, else the numeric id. This is
/// what detections and pseudo labels must use as `image_id`/`pair_id`.
fn coco_image_key(img: &CocoImage) -> String {
    match &img.file_name {
        Some(name) => Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.clone()),
        None => img.id.to_string(),
    }
}

/// Load a COCO-style annotation file (images/annotations/categories subset)
/// into an unsplit ground-truth set. Boxes convert from `[x, y, w, h]` to
/// half-open corners.
pub fn load_coco_ground_truth(path: &Path) -> Result<GroundTruthSet> {
    let text = fs::read_to_string(path)?;
    let file: CocoFile =
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, 0, e.to_string()))?;
    let mut categories = BTreeMap::new();
    for cat in &file.categories {
        if categories.insert(cat.id, cat.name.clone()).is_some() {
            return Err(Error::malformed(
                path,
                0,
                format!("duplicate category id {}", cat.id),
            ));
        }
    }
    let mut images = BTreeMap::new();
    let mut keys = BTreeSet::new();
    for img in &file.images {
        let key = coco_image_key(img);
        if images.insert(img.id, key.clone()).is_some() {
            return Err(Error::malformed(
                path,
                0,
                format!("duplicate image id {}", img.id),
            ));
        }
        if !keys.insert(key.clone()) {
            return Err(Error::malformed(
                path,
                0,
                format!("duplicate image key {key:?}"),
            ));
        }
    }
    let mut per_image: BTreeMap<String, Vec<GtItem>> =
        images.values().map(|k| (k.clone(), Vec::new())).collect();
    for ann in &file.annotations {
        let category = categories.get(&ann.category_id).ok_or_else(|| {
            Error::malformed(
                path,
                0,
                format!(
                    "annotation {} references unknown category id {}",
                    ann.id, ann.category_id
                ),
            )
        })?;
        let key = images.get(&ann.image_id).ok_or_else(|| {
            Error::malformed(
                path,
                0,
                format!(
                    "annotation {} references unknown image id {}",
                    ann.id, ann.image_id
                ),
            )
        })?;
        let [x, y, w, h] = ann.bbox;
        let bbox = BBox::new(x, y, x + w, y + h)
            .map_err(|e| Error::malformed(path, 0, format!("annotation {}: {e}", ann.id)))?;
        per_image
            .get_mut(key)
            .expect("key inserted above")
            .push(GtItem {
                category: category.clone(),
                bbox,
            });
    }
    Ok(GroundTruthSet::new(per_image))
}

/// Export ground truth as a COCO-style annotation file. Categories are
/// numbered 1.. in sorted-name order; image ids follow sorted image keys.
pub fn export_coco_ground_truth(
    path: &Path,
    per_image: &BTreeMap<String, Vec<GtItem>>,
    image_sizes: &BTreeMap<String, (u32, u32)>,
) -> Result<()> {
    let category_names: BTreeSet<&str> = per_image
        .values()
        .flatten()
        .map(|item| item.category.as_str())
        .collect();
    let category_ids: BTreeMap<&str, i64> = category_names
        .iter()
        .enumerate()
        .map(|(i, &name)| (name, i as i64 + 1))
        .collect();
    let keys: BTreeSet<&str> = per_image
        .keys()
        .map(String::as_str)
        .chain(image_sizes.keys().map(String::as_str))
        .collect();
    let image_ids: BTreeMap<&str, i64> = keys
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, i as i64 + 1))
        .collect();
    let images: Vec<CocoImage> = keys
        .iter()
        .map(|&k| {
            let size = image_sizes.get(k).copied();
            CocoImage {
                id: image_ids[k],
                file_name: Some(format!("{k}.png")),
                width: size.map(|s| s.0),
                height: size.map(|s| s.1),
            }
        })
        .collect();
    let mut annotations = Vec::new();
    for (key, items) in per_image {
        for item in items {
            annotations.push(CocoAnnotation {
                id: annotations.len() as i64 + 1,
                image_id: image_ids[key.as_str()],
                category_id: category_ids[item.category.as_str()],
                bbox: [
                    item.bbox.x_min(),
                    item.bbox.y_min(),
                    item.bbox.width(),
                    item.bbox.height(),
                ],
                score: None,
            });
        }
    }
    let categories: Vec<CocoCategory> = category_ids
        .iter()
        .map(|(&name, &id)| CocoCategory {
            id,
            name: name.to_string(),
        })
        .collect();
    let doc = serde_json::json!({
        "images": images,
        "annotations": annotations,
        "categories": categories,
    });
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Export pseudo labels as a COCO-style annotation file. Categories are
/// numbered 1.. in sorted-name order; image ids follow sorted pair ids.
/// `image_sizes` supplies optional `(width, height)` per pair id.
pub fn export_coco_labels(
    path: &Path,
    labels: &[PseudoBoxLabel],
    image_sizes: &BTreeMap<String, (u32, u32)>,
) -> Result<()> {
    let category_names: BTreeSet<&str> = labels.iter().map(|l| l.category.as_str()).collect();
    let category_ids: BTreeMap<&str, i64> = category_names
        .iter()
        .enumerate()
        .map(|(i, &name)| (name, i as i64 + 1))
        .collect();
    let pair_ids: BTreeSet<&str> = labels
        .iter()
        .map(|l| l.pair_id.as_str())
        .chain(image_sizes.keys().map(String::as_str))
        .collect();
    let image_ids: BTreeMap<&str, i64> = pair_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i as i64 + 1))
        .collect();
    let images: Vec<CocoImage> = pair_ids
        .iter()
        .map(|&id| {
            let size = image_sizes.get(id).copied();
            CocoImage {
                id: image_ids[id],
                file_name: Some(format!("{id}.png")),
                width: size.map(|s| s.0),
                height: size.map(|s| s.1),
            }
        })
        .collect();
    let annotations: Vec<CocoAnnotation> = labels
        .iter()
        .enumerate()
        .map(|(i, label)| CocoAnnotation {
            id: i as i64 + 1,
            image_id: image_ids[label.pair_id.as_str()],
            category_id: category_ids[label.category.as_str()],
            bbox: [
                label.bbox.x_min(),
                label.bbox.y_min(),
                label.bbox.width(),
                label.bbox.height(),
            ],
            score: Some(label.score),
        })
        .collect();
    let categories: Vec<CocoCategory> = category_ids
        .iter()
        .map(|(&name, &id)| CocoCategory {
            id,
            name: name.to_string(),
        })
        .collect();
    let doc = serde_json::json!({
        "images": images,
        "annotations": annotations,
        "categories": categories,
    });
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn label(pair_id: &str, span: [usize; 2]) -> PseudoBoxLabel {
        PseudoBoxLabel {
            pair_id: pair_id.into(),
            category: "cat".into(),
            bbox: BBox::new(1.0, 2.0, 3.0, 4.5).unwrap(),
            score: 0.123456789012345,
            token_span: span,
        }
    }

    #[test]
    fn pseudo_labels_round_trip_in_canonical_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let labels = vec![label("b", [1, 2]), label("a", [3, 4]), label("a", [1, 2])];
        save_pseudo_labels(&path, &labels).unwrap();
        let back = load_pseudo_labels(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].pair_id, "a");
        assert_eq!(back[0].token_span, [1, 2]);
        assert_eq!(back[1].token_span, [3, 4]);
        assert_eq!(back[2].pair_id, "b");
        // Scores preserved to full precision.
        assert_eq!(back[0].score, 0.123456789012345);
    }

    #[test]
    fn empty_label_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        save_pseudo_labels(&path, &[]).unwrap();
        assert!(load_pseudo_labels(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_label_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        fs::write(&path, "{\"schema\": \"capdet-labels-v1\"}\nnot json\n").unwrap();
        let err = load_pseudo_labels(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn pair_stream_preserves_order_and_reports_missing_images() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30]))
            .save(dir.path().join("x.png"))
            .unwrap();
        let entries = vec![
            PairEntry {
                pair_id: "first".into(),
                image_path: "x.png".into(),
                caption: "ein rotes Дreieck".into(),
            },
            PairEntry {
                pair_id: "missing".into(),
                image_path: "nope.png".into(),
                caption: "whatever".into(),
            },
        ];
        let path = dir.path().join("pairs.jsonl");
        save_pairs(&path, &entries).unwrap();
        let mut stream = load_pairs(&path).unwrap();
        let first = stream.next().unwrap().unwrap();
        assert_eq!(first.pair_id, "first");
        // Non-ASCII captions survive byte-exact.
        assert_eq!(first.caption, "ein rotes Дreieck");
        let second = stream.next().unwrap();
        match second {
            Err(Error::Pair { pair_id, .. }) => assert_eq!(pair_id, "missing"),
            other => panic!("expected pair error, got {other:?}"),
        }
        assert!(stream.next().is_none());
    }

    #[test]
    fn empty_pairs_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        fs::write(&path, "").unwrap();
        assert_eq!(load_pairs(&path).unwrap().count(), 0);
    }

    #[test]
    fn coco_bbox_converts_to_corners() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        fs::write(
            &path,
            serde_json::json!({
                "images": [{"id": 1, "file_name": "img0.png"}],
                "annotations": [
                    {"id": 1, "image_id": 1, "category_id": 7, "bbox": [10.0, 20.0, 30.0, 40.0]}
                ],
                "categories": [{"id": 7, "name": "thing"}],
            })
            .to_string(),
        )
        .unwrap();
        let gt = load_coco_ground_truth(&path).unwrap();
        let items = &gt.per_image["img0"];
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].category, "thing");
        assert_eq!(items[0].bbox, BBox::new(10.0, 20.0, 40.0, 60.0).unwrap());
    }

    #[test]
    fn coco_dangling_category_names_annotation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        fs::write(
            &path,
            serde_json::json!({
                "images": [{"id": 1, "file_name": "a.png"}],
                "annotations": [
                    {"id": 42, "image_id": 1, "category_id": 99, "bbox": [0.0, 0.0, 1.0, 1.0]}
                ],
                "categories": [{"id": 7, "name": "thing"}],
            })
            .to_string(),
        )
        .unwrap();
        let err = load_coco_ground_truth(&path).unwrap_err();
        assert!(err.to_string().contains("annotation 42"), "{err}");
    }

    #[test]
    fn coco_duplicate_image_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        fs::write(
            &path,
            serde_json::json!({
                "images": [{"id": 1, "file_name": "a.png"}, {"id": 1, "file_name": "b.png"}],
                "annotations": [],
                "categories": [],
            })
            .to_string(),
        )
        .unwrap();
        assert!(load_coco_ground_truth(&path).is_err());
    }

    #[test]
    fn coco_ground_truth_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        let per_image = BTreeMap::from([(
            "img3".to_string(),
            vec![
                GtItem {
                    category: "x".into(),
                    bbox: BBox::new(2.0, 3.0, 10.0, 11.0).unwrap(),
                },
                GtItem {
                    category: "y".into(),
                    bbox: BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(),
                },
            ],
        )]);
        let sizes = BTreeMap::from([("img3".to_string(), (64u32, 64u32))]);
        export_coco_ground_truth(&path, &per_image, &sizes).unwrap();
        let gt = load_coco_ground_truth(&path).unwrap();
        assert_eq!(gt.per_image, per_image);
    }

    #[test]
    fn coco_export_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels_coco.json");
        let labels = vec![label("img0", [1, 2]), label("img1", [2, 3])];
        let sizes = BTreeMap::from([
            ("img0".to_string(), (64u32, 48u32)),
            ("img1".to_string(), (64u32, 48u32)),
        ]);
        export_coco_labels(&path, &labels, &sizes).unwrap();
        let gt = load_coco_ground_truth(&path).unwrap();
        assert_eq!(gt.gt_count(), 2);
        assert_eq!(gt.per_image["img0"][0].bbox, labels[0].bbox);
        assert_eq!(gt.per_image["img0"][0].category, "cat");
    }
}
