//! Desk-scale calibration sweep: certifies a vocabulary, generates a
//! synthetic dataset, measures pseudo-label quality, trains the detector,
//! and prints generalized AP. Used to pick defaults; not part of the test
//! suite.

use std::collections::BTreeMap;
use std::time::Instant;

use capdet::data_io::{certified_categories, synth_dataset, write_dataset, Split, SynthConfig};
use capdet::detector::{train, TrainConfig};
use capdet::eval::{generalized_eval, pseudo_label_quality};
use capdet::pipeline::{encode_images, generate_dataset_labels, run_inference};
use capdet::pseudo_label::ProposalProvider;
use capdet::vlm::{ModelConfig, ToyEncoder};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();

    let mut model = ModelConfig::default();
    if let Ok(s) = std::env::var("CAL_SEED") {
        model.seed = s.parse().unwrap();
    }
    if let Ok(s) = std::env::var("CAL_HEADS") {
        model.n_heads = s.parse().unwrap();
    }
    if let Ok(s) = std::env::var("CAL_GRID") {
        let g: usize = s.parse().unwrap();
        model.grid = (g, g);
    }
    if let Ok(s) = std::env::var("CAL_LAYER") {
        model.gradcam_layer = s.parse().unwrap();
    }
    let t0 = Instant::now();
    let size_range: (u32, u32) = match std::env::var("CAL_SIZES").ok().as_deref() {
        Some(s) => {
            let (a, b) = s.split_once(',').expect("CAL_SIZES=min,max");
            (a.parse().unwrap(), b.parse().unwrap())
        }
        None => (12, 16),
    };
    let cats = match certified_categories(&model, 8, (64, 64), size_range, model.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("certification FAILED after {:?}: {e}", t0.elapsed());
            std::process::exit(1);
        }
    };
    println!(
        "certified {} categories in {:.1?}",
        cats.len(),
        t0.elapsed()
    );
    for c in &cats {
        println!("  {:<12} {:?} {:?}", c.name, c.shape, c.color);
    }

    let novel: Vec<String> = cats[6..8].iter().map(|c| c.name.clone()).collect();
    let cfg = SynthConfig {
        n_images: 267,
        categories: cats.clone(),
        novel: novel.clone(),
        size_range,
        seed: 7,
        ..SynthConfig::default()
    };
    let t1 = Instant::now();
    let out = synth_dataset(&cfg).expect("synth");
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &out).expect("write");
    let dataset = capdet::data_io::LoadedDataset::open(dir.path()).expect("open");
    let train_pairs = dataset.pairs(Split::Train).expect("train pairs");
    let test_pairs = dataset.pairs(Split::Test).expect("test pairs");
    println!(
        "dataset: {} train / {} test pairs in {:.1?}",
        train_pairs.len(),
        test_pairs.len(),
        t1.elapsed()
    );

    // Stage 1: pseudo-label quality on the train split.
    let provider = ProposalProvider::RegionMerge;
    let t2 = Instant::now();
    let (labels, stats) =
        generate_dataset_labels(&dataset, Split::Train, &model, &provider).expect("generate");
    let gt_train = dataset.manifest.ground_truth_set(Split::Train).expect("gt");
    let quality = pseudo_label_quality(&labels, &gt_train);
    println!(
        "labels: {} from {}/{} pairs in {:.1?}",
        stats.labels,
        stats.pairs_ok,
        stats.pairs_total,
        t2.elapsed()
    );
    println!(
        "quality: precision {:?} recall {:?} ({} labels vs {} gt)",
        quality.precision, quality.recall, quality.labels, quality.gt_boxes
    );
    for (name, q) in &quality.per_category {
        println!(
            "  {:<12} p={:?} r={:?} emitted={} gt={}",
            name, q.precision, q.recall, q.emitted, q.gt_count
        );
    }

    // Stage 2: detector training on base-class pseudo labels and generalized
    // evaluation on the test split.
    let t3 = Instant::now();
    let encoder = ToyEncoder::new(model.clone()).expect("encoder");
    let train_images = encode_images(&encoder, &train_pairs, &provider).expect("encode train");
    let table = dataset.embeddings().expect("embeddings");
    let tcfg = TrainConfig::default();
    let params = train(&labels, &train_images, &table, &tcfg).expect("train");
    println!("trained in {:.1?}", t3.elapsed());

    let t4 = Instant::now();
    let test_images = encode_images(&encoder, &test_pairs, &provider).expect("encode test");
    let subset: Vec<String> = dataset.manifest.categories.clone();
    let detections = run_inference(
        &test_images,
        &subset,
        &params,
        &table,
        &capdet::detector::InferOptions::default(),
    )
    .expect("infer");
    let gt_test = dataset
        .manifest
        .ground_truth_set(Split::Test)
        .expect("gt test");
    let report = generalized_eval(&detections, &gt_test).expect("eval");
    println!(
        "eval: novel {:?} base {:?} overall {:?} ({} detections) in {:.1?}",
        report.novel_map,
        report.base_map,
        report.overall_map,
        report.detections,
        t4.elapsed()
    );
    for (name, ap) in &report.per_class {
        println!(
            "  {:<12} ap={:?} gt={} det={}",
            name, ap.ap, ap.gt_count, ap.det_count
        );
    }

    let mut timing = BTreeMap::new();
    timing.insert("certify", t0.elapsed());
    println!("total {:.1?}", t0.elapsed());
    let _ = timing;
}
