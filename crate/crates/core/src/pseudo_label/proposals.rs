//! Proposal sources: sliding grid, color-region merging, and files.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{BBox, ProposalSet, ProposalSource};
use crate::error::{Error, Result};

/// Sliding-window boxes for every (scale, aspect-ratio) combination on a
/// regular stride. A window of scale `s` and ratio `r` is `round(s·√r)` wide
/// and `round(s/√r)` tall; windows are clipped to the image and exact
/// duplicates (after clipping) are dropped, preserving first-occurrence order.
pub fn grid_proposals(
    image_size: (usize, usize),
    scales: &[f64],
    ratios: &[f64],
    stride: f64,
) -> Result<ProposalSet> {
    let (width, height) = image_size;
    if width == 0 || height == 0 {
        return Err(Error::invalid("empty image"));
    }
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::invalid(
            "grid proposals need at least one scale and ratio",
        ));
    }
    if !(stride > 0.0) || scales.iter().any(|&s| !(s > 0.0)) || ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::invalid("scales, ratios and stride must be positive"));
    }
    let mut boxes = Vec::new();
    let mut seen = HashSet::new();
    for &s in scales {
        for &r in ratios {
            let bw = (s * r.sqrt()).round().max(1.0);
            let bh = (s / r.sqrt()).round().max(1.0);
            let mut ky = 0usize;
            loop {
                let y = ky as f64 * stride;
                if y >= height as f64 {
                    break;
                }
                let mut kx = 0usize;
                loop {
                    let x = kx as f64 * stride;
                    if x >= width as f64 {
                        break;
                    }
                    let bbox = BBox::new(
                        x,
                        y,
                        (x + bw).min(width as f64),
                        (y + bh).min(height as f64),
                    )?;
                    if seen.insert(bbox.bits()) {
                        boxes.push(bbox);
                    }
                    kx += 1;
                }
                ky += 1;
            }
        }
    }
    Ok(ProposalSet {
        boxes,
        source: ProposalSource::Grid,
    })
}

const QUANT_STEP: u8 = 64;
const MIN_COMPONENT_AREA: usize = 4;

/// Quantize colors to coarse buckets, find 4-connected components of equal
/// quantized color, and propose every component's bounding box plus the
/// enclosing box of every pair of adjacent components. Deterministic: scan
/// order fixes component ids and output order.
pub fn region_merge_proposals(image: &RgbImage) -> Result<ProposalSet> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("empty image"));
    }
    let (w, h) = (w as usize, h as usize);
    let key = |x: usize, y: usize| -> u32 {
        let p = image.get_pixel(x as u32, y as u32).0;
        let q = |c: u8| u32::from(c / QUANT_STEP);
        q(p[0]) << 16 | q(p[1]) << 8 | q(p[2])
    };
    let mut comp = vec![usize::MAX; w * h];
    struct Region {
        min_x: usize,
        min_y: usize,
        max_x: usize,
        max_y: usize,
        area: usize,
    }
    let mut regions: Vec<Region> = Vec::new();
    for start_y in 0..h {
        for start_x in 0..w {
            if comp[start_y * w + start_x] != usize::MAX {
                continue;
            }
            let id = regions.len();
            let k = key(start_x, start_y);
            let mut region = Region {
                min_x: start_x,
                min_y: start_y,
                max_x: start_x,
                max_y: start_y,
                area: 0,
            };
            let mut queue = VecDeque::from([(start_x, start_y)]);
            comp[start_y * w + start_x] = id;
            while let Some((x, y)) = queue.pop_front() {
                region.area += 1;
                region.min_x = region.min_x.min(x);
                region.min_y = region.min_y.min(y);
                region.max_x = region.max_x.max(x);
                region.max_y = region.max_y.max(y);
                let mut visit = |nx: usize, ny: usize| {
                    let idx = ny * w + nx;
                    if comp[idx] == usize::MAX && key(nx, ny) == k {
                        comp[idx] = id;
                        queue.push_back((nx, ny));
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < w {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < h {
                    visit(x, y + 1);
                }
            }
            regions.push(region);
        }
    }
    // Adjacency between components, scanning right and down neighbors.
    let mut adjacent: BTreeSet<(usize, usize)> = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let a = comp[y * w + x];
            if x + 1 < w {
                let b = comp[y * w + x + 1];
                if a != b {
                    adjacent.insert((a.min(b), a.max(b)));
                }
            }
            if y + 1 < h {
                let b = comp[(y + 1) * w + x];
                if a != b {
                    adjacent.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    let kept: Vec<bool> = regions
        .iter()
        .map(|r| r.area >= MIN_COMPONENT_AREA)
        .collect();
    let region_box = |r: &Region| {
        BBox::new(
            r.min_x as f64,
            r.min_y as f64,
            (r.max_x + 1) as f64,
            (r.max_y + 1) as f64,
        )
        .expect("component boxes have at least one pixel")
    };
    let mut boxes = Vec::new();
    let mut seen = HashSet::new();
    for (id, r) in regions.iter().enumerate() {
        if kept[id] {
            let b = region_box(r);
            if seen.insert(b.bits()) {
                boxes.push(b);
            }
        }
    }
    for &(a, b) in &adjacent {
        if kept[a] && kept[b] {
            let merged = region_box(&regions[a]).enclosing(&region_box(&regions[b]));
            if seen.insert(merged.bits()) {
                boxes.push(merged);
            }
        }
    }
    Ok(ProposalSet {
        boxes,
        source: ProposalSource::RegionMerge,
    })
}

#[derive(Serialize, Deserialize)]
struct ProposalRecord {
    image_id: String,
    boxes: Vec<[f64; 4]>,
}

/// JSON-lines proposal table: one `{"image_id", "boxes": [[x0,y0,x1,y1],..]}`
/// per line. An optional leading `{"schema": ...}` line is skipped; duplicate
/// image ids and invalid boxes are errors naming the line.
pub fn load_proposals(path: &Path) -> Result<BTreeMap<String, ProposalSet>> {
    let file = fs::File::open(path)?;
    let mut table = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
                if v.get("schema").is_some() && v.get("image_id").is_none() {
                    continue;
                }
            }
        }
        let record: ProposalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(path, i + 1, e.to_string()))?;
        let mut boxes = Vec::with_capacity(record.boxes.len());
        for raw in record.boxes {
            let bbox =
                BBox::try_from(raw).map_err(|e| Error::malformed(path, i + 1, e.to_string()))?;
            boxes.push(bbox);
        }
        if table
            .insert(
                record.image_id.clone(),
                ProposalSet {
                    boxes,
                    source: ProposalSource::Loaded,
                },
            )
            .is_some()
        {
            return Err(Error::malformed(
                path,
                i + 1,
                format!("duplicate image id {:?}", record.image_id),
            ));
        }
    }
    Ok(table)
}

pub fn save_proposals(path: &Path, table: &BTreeMap<String, ProposalSet>) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(
        out,
        "{}",
        serde_json::json!({ "schema": "capdet-proposals-v1" })
    )?;
    for (image_id, set) in table {
        let record = ProposalRecord {
            image_id: image_id.clone(),
            boxes: set.boxes.iter().map(|b| <[f64; 4]>::from(*b)).collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn grid_counts_and_dedup() {
        // 64x64, scale 16, ratio 1, stride 16: 4x4 positions, windows of 16
        // never clip, so 16 distinct boxes.
        let set = grid_proposals((64, 64), &[16.0], &[1.0], 16.0).unwrap();
        assert_eq!(set.boxes.len(), 16);
        assert_eq!(set.source, ProposalSource::Grid);
        for b in &set.boxes {
            assert!(b.x_max() <= 64.0 && b.y_max() <= 64.0);
            assert!(b.x_min() >= 0.0 && b.y_min() >= 0.0);
        }
        // Two ratios r and 1/r give transposed windows; duplicates only when
        // clipping collapses them, so counts stay multiplicative here.
        let set2 = grid_proposals((64, 64), &[16.0, 32.0], &[1.0, 2.0, 0.5], 16.0).unwrap();
        let mut seen = HashSet::new();
        for b in &set2.boxes {
            assert!(seen.insert(b.bits()), "duplicate box in output");
        }
    }

    #[test]
    fn grid_windows_larger_than_image_clip_to_image() {
        let set = grid_proposals((16, 16), &[64.0], &[1.0], 16.0).unwrap();
        assert_eq!(set.boxes.len(), 1);
        assert_eq!(set.boxes[0], BBox::new(0.0, 0.0, 16.0, 16.0).unwrap());
    }

    #[test]
    fn grid_validates_inputs() {
        assert!(grid_proposals((0, 64), &[16.0], &[1.0], 16.0).is_err());
        assert!(grid_proposals((64, 64), &[], &[1.0], 16.0).is_err());
        assert!(grid_proposals((64, 64), &[16.0], &[1.0], 0.0).is_err());
        assert!(grid_proposals((64, 64), &[-16.0], &[1.0], 8.0).is_err());
    }

    #[test]
    fn region_merge_finds_two_blobs_and_their_union() {
        let mut img = RgbImage::from_pixel(32, 32, Rgb([170, 170, 170]));
        for y in 4..10 {
            for x in 4..10 {
                img.put_pixel(x, y, Rgb([250, 30, 30]));
            }
        }
        for y in 18..26 {
            for x in 20..28 {
                img.put_pixel(x, y, Rgb([30, 30, 250]));
            }
        }
        let set = region_merge_proposals(&img).unwrap();
        let red = BBox::new(4.0, 4.0, 10.0, 10.0).unwrap();
        let blue = BBox::new(20.0, 18.0, 28.0, 26.0).unwrap();
        let full = BBox::new(0.0, 0.0, 32.0, 32.0).unwrap();
        assert!(set.boxes.contains(&red), "missing red component box");
        assert!(set.boxes.contains(&blue), "missing blue component box");
        // Both blobs touch the background, so background-union boxes exist;
        // the background component box is the full image.
        assert!(set.boxes.contains(&full));
        for b in &set.boxes {
            assert!(b.area() > 0.0);
            assert!(b.x_max() <= 32.0 && b.y_max() <= 32.0);
        }
    }

    #[test]
    fn region_merge_uniform_image_is_single_box() {
        let img = RgbImage::from_pixel(16, 16, Rgb([100, 100, 100]));
        let set = region_merge_proposals(&img).unwrap();
        assert_eq!(set.boxes.len(), 1);
        assert_eq!(set.boxes[0], BBox::new(0.0, 0.0, 16.0, 16.0).unwrap());
    }

    #[test]
    fn proposal_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("props.jsonl");
        let mut table = BTreeMap::new();
        table.insert(
            "img1".to_string(),
            ProposalSet {
                boxes: vec![BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()],
                source: ProposalSource::Loaded,
            },
        );
        save_proposals(&path, &table).unwrap();
        let back = load_proposals(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back["img1"].boxes, table["img1"].boxes);

        // Empty file loads as an empty table.
        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(load_proposals(&empty).unwrap().is_empty());

        // Malformed record errors name the line.
        let bad = dir.path().join("bad.jsonl");
        fs::write(
            &bad,
            "{\"image_id\": \"a\", \"boxes\": [[0,0,10,10]]}\n{oops\n",
        )
        .unwrap();
        match load_proposals(&bad).unwrap_err() {
            Error::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }

        // Degenerate box in a record is also a named-line error.
        let degen = dir.path().join("degen.jsonl");
        fs::write(&degen, "{\"image_id\": \"a\", \"boxes\": [[10,0,10,10]]}\n").unwrap();
        assert!(matches!(
            load_proposals(&degen).unwrap_err(),
            Error::Malformed { line: 1, .. }
        ));

        // Duplicate ids are rejected.
        let dup = dir.path().join("dup.jsonl");
        fs::write(
            &dup,
            "{\"image_id\": \"a\", \"boxes\": [[0,0,1,1]]}\n{\"image_id\": \"a\", \"boxes\": [[0,0,2,2]]}\n",
        )
        .unwrap();
        assert!(load_proposals(&dup).is_err());
    }
}
