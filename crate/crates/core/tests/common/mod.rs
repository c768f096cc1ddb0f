#![allow(dead_code)]

use genaug_core::backend::toy::{
    calibrate_score_map, ToyDetector, ToyDetectorParams, ToyGenerator, ToyGeneratorParams,
};
use genaug_core::synth::{toy_world, WorldSpec};
use genaug_core::{AugmentationRun, Dataset, Provenance};

pub const PATCH: u32 = 96;

/// Toy generator and a detector calibrated to it on `backgrounds`.
pub fn calibrated(backgrounds: &Dataset, samples: usize, seed: u64) -> (ToyGeneratorParams, ToyDetectorParams) {
    let gen = ToyGeneratorParams {
        seed,
        ..Default::default()
    };
    let raw = ToyDetectorParams::for_patches(PATCH);
    let map = calibrate_score_map(&gen, &raw, backgrounds, PATCH, samples, seed ^ 0xCA11).unwrap();
    (gen, raw.with_score_map(map))
}

pub fn backends(gen: &ToyGeneratorParams, det: &ToyDetectorParams) -> (ToyGenerator, ToyDetector) {
    (
        ToyGenerator::new(gen.clone()).unwrap(),
        ToyDetector::new(det.clone()).unwrap(),
    )
}

pub fn world(n: usize, seed: u64) -> Dataset {
    toy_world(n, &WorldSpec::default(), seed)
}

/// Checks every structural promise of a finished run against its input.
pub fn check_safety(input: &Dataset, run: &AugmentationRun) -> Result<(), String> {
    let out = &run.dataset;
    if out.len() != input.len() {
        return Err("record count changed".into());
    }
    let synthetic: usize = out
        .records()
        .iter()
        .flat_map(|r| r.annotations())
        .filter(|a| a.provenance == Provenance::Synthetic)
        .count();
    if synthetic as u64 != run.stats.accepted || run.accepted.len() != synthetic {
        return Err(format!(
            "{synthetic} synthetic boxes but {} accepted",
            run.stats.accepted
        ));
    }
    for (before, after) in input.records().iter().zip(out.records()) {
        if before.id() != after.id() {
            return Err("record order changed".into());
        }
        let n = before.annotations().len();
        if after.annotations()[..n] != *before.annotations() {
            return Err(format!("{}: original annotations changed", before.id()));
        }
        let holes: Vec<_> = run.accepted.iter().filter(|a| a.image_id == before.id()).collect();
        let mut existing: Vec<_> = before.annotations().iter().map(|a| a.bbox).collect();
        for acc in &holes {
            if existing.iter().any(|b| b.intersection_area(&acc.bbox) > 0.0) {
                return Err(format!("{}: hole {} overlaps an earlier box", before.id(), acc.bbox));
            }
            existing.push(acc.bbox);
        }
        for (x, y, px) in after.image().enumerate_pixels() {
            let (fx, fy) = (x as f64, y as f64);
            let in_hole = holes
                .iter()
                .any(|a| fx >= a.bbox.x_min() && fx < a.bbox.x_max() && fy >= a.bbox.y_min() && fy < a.bbox.y_max());
            if !in_hole && px != before.image().get_pixel(x, y) {
                return Err(format!("{}: pixel ({x}, {y}) outside holes changed", before.id()));
            }
        }
    }
    Ok(())
}
