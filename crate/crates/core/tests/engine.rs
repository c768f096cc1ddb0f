mod common;

use common::{backends, calibrated, check_safety, world, PATCH};
use genaug_core::backend::toy::{Quality, ToyGenerator, ToyGeneratorParams};
use genaug_core::dataset::{load_dataset, Format};
use genaug_core::engine::{augment_dataset_pooled, export_training_patches, RunManifest};
use genaug_core::{augment_dataset, Annotation, AugmentationConfig, BBox, Dataset, ImageRecord, RunStatus};
use image::{Rgb, RgbImage};

fn config(threshold: f64, target: u32, seed: u64) -> AugmentationConfig {
    AugmentationConfig {
        acceptance_threshold: threshold,
        target_new_instances: target,
        instances_per_image: 2,
        seed,
        ..Default::default()
    }
}

#[test]
fn harvesting_the_split_fixture_gives_one_patch_per_instance() {
    // 245 images with two vehicles, 255 without: 490 instances over 500 images
    let records = (0..500)
        .map(|i| {
            let img = RgbImage::from_fn(160, 128, |x, y| Rgb([(x + i) as u8, y as u8, 40]));
            let anns = if i < 245 {
                vec![
                    Annotation::original(BBox::new(2.0, 5.0, 40.0, 43.0).unwrap(), "car"),
                    Annotation::original(BBox::new(110.0 + (i % 7) as f64, 70.0, 150.0, 118.0).unwrap(), "car"),
                ]
            } else {
                vec![]
            };
            ImageRecord::new(format!("img{i:03}"), img, anns).unwrap()
        })
        .collect();
    let train = Dataset::from_records(records).unwrap();
    assert_eq!(train.instance_count(), 490);

    let dir = tempfile::tempdir().unwrap();
    let manifest = export_training_patches(&train, PATCH, dir.path()).unwrap();
    assert_eq!(manifest.patches.len(), 490);
    let pngs = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 490);

    let corpus = load_dataset(dir.path(), Format::VedaiLike).unwrap();
    assert_eq!(corpus.len(), 490);
    for entry in &manifest.patches {
        let id = entry.image.trim_end_matches(".png");
        let k: usize = id.rsplit('_').next().unwrap().parse().unwrap();
        let source = train.get(&entry.source_id).unwrap();
        let own = source.annotations()[k]
            .bbox
            .translate(-(entry.origin.0 as f64), -(entry.origin.1 as f64));
        assert!(own.fits_within(PATCH, PATCH), "{id}: {own}");
        let patch = corpus.get(id).unwrap();
        assert_eq!(patch.image().dimensions(), (PATCH, PATCH));
        assert!(patch.annotations().iter().any(|a| a.bbox == own), "{id}");
    }
}

#[test]
fn same_seed_replays_exactly() {
    let train = world(12, 3);
    let (g, d) = calibrated(&train, 400, 3);
    let run = |seed| {
        let (mut gen, mut det) = backends(&g, &d);
        augment_dataset(&train, &mut gen, &mut det, &config(0.4, 15, seed)).unwrap()
    };
    let (a, b, c) = (run(9), run(9), run(10));
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.manifest(&config(0.4, 15, 9)), b.manifest(&config(0.4, 15, 9)));
    assert_ne!(a.accepted, c.accepted);
}

#[test]
fn runs_keep_every_safety_invariant() {
    let train = world(10, 8);
    let before = train.clone();
    let (g, d) = calibrated(&train, 400, 8);
    for seed in 0..3 {
        let (mut gen, mut det) = backends(&g, &d);
        let run = augment_dataset(&train, &mut gen, &mut det, &config(0.3, 12, seed)).unwrap();
        assert_eq!(run.status, RunStatus::Completed);
        check_safety(&train, &run).unwrap();
    }
    assert_eq!(train, before);
}

#[test]
fn zero_threshold_accepts_every_attempt() {
    let train = world(30, 1);
    let (g, d) = calibrated(&train, 400, 1);
    let (mut gen, mut det) = backends(&g, &d);
    let run = augment_dataset(&train, &mut gen, &mut det, &config(0.0, 50, 4)).unwrap();
    assert_eq!(run.stats.attempts, 50);
    assert_eq!(run.stats.accepted, 50);
    assert_eq!(run.stats.rejected_confidence, 0);
}

#[test]
fn toy_pool_matches_sequential_run() {
    let train = world(9, 5);
    let (g, d) = calibrated(&train, 400, 5);
    let cfg = config(0.5, 10, 2);
    let (mut gen, mut det) = backends(&g, &d);
    let sequential = augment_dataset(&train, &mut gen, &mut det, &cfg).unwrap();
    let mut pool: Vec<_> = (0..4).map(|_| backends(&g, &d)).collect();
    let pooled = augment_dataset_pooled(&train, &mut pool, &cfg).unwrap();
    assert_eq!(pooled.dataset, sequential.dataset);
    assert_eq!(pooled.stats, sequential.stats);
    assert_eq!(pooled.accepted, sequential.accepted);
}

#[test]
fn hopeless_generator_exhausts_the_budget() {
    let train = world(6, 2);
    let (_, d) = calibrated(&train, 400, 2);
    let mut gen = ToyGenerator::new(ToyGeneratorParams {
        quality: Quality::Fixed(0.0),
        ..Default::default()
    })
    .unwrap();
    let mut det = genaug_core::backend::toy::ToyDetector::new(d).unwrap();
    let cfg = AugmentationConfig {
        max_attempts_per_instance: 5,
        ..config(0.5, 4, 0)
    };
    let run = augment_dataset(&train, &mut gen, &mut det, &cfg).unwrap();
    assert_eq!(run.status, RunStatus::BudgetExhausted);
    assert_eq!(run.stats.accepted, 0);
    assert_eq!(run.stats.attempts, 20);
    check_safety(&train, &run).unwrap();
}

#[test]
fn manifest_survives_json() {
    let train = world(5, 6);
    let (g, d) = calibrated(&train, 300, 6);
    let (mut gen, mut det) = backends(&g, &d);
    let cfg = config(0.2, 4, 6);
    let run = augment_dataset(&train, &mut gen, &mut det, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    run.manifest(&cfg).write(&path).unwrap();
    let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, run.manifest(&cfg));
    assert_eq!(back.accepted.len(), 4);
    assert!(back.accepted.iter().all(|a| a.score > 0.2));
}
