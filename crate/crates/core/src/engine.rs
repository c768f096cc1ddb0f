//! The generate, score and accept loop, plus the training-patch export and the
//! score-distribution probe.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{score_generated, BackendError, DetectorBackend, GeneratorBackend};
use crate::dataset::{save_dataset, Format};
use crate::dataset::{shuffled_indices, Annotation, BBox, Dataset, DatasetError, ImageRecord, Provenance};
use crate::patch::{
    check_patch_size, composite_hole, harvest_instance_patch, hole_rect_global, mask_center, sample_clear_patch,
    sample_patch_origin, GenerationResult, MaskedPatch, Patch, PatchError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub patch_size: u32,
    /// A candidate is kept only if its score is strictly greater.
    pub acceptance_threshold: f64,
    pub instances_per_image: u32,
    pub target_new_instances: u32,
    /// The run gives up after `max_attempts_per_instance * target_new_instances`
    /// generate calls or as many intersection rejections.
    pub max_attempts_per_instance: u32,
    pub seed: u64,
    pub label: String,
    /// Whether synthetic instances accepted earlier block new holes.
    pub collide_with_synthetic: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            patch_size: 96,
            acceptance_threshold: 0.4,
            instances_per_image: 1,
            target_new_instances: 1000,
            max_attempts_per_instance: 100,
            seed: 0,
            label: "car".into(),
            collide_with_synthetic: true,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        check_patch_size(self.patch_size).map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.acceptance_threshold) {
            return bad(format!(
                "acceptance threshold {} outside [0, 1]",
                self.acceptance_threshold
            ));
        }
        if self.instances_per_image == 0 || self.target_new_instances == 0 || self.max_attempts_per_instance == 0 {
            return bad("instance and attempt counts must be positive".into());
        }
        if self.label.is_empty() || self.label.chars().any(char::is_whitespace) {
            return bad(format!("invalid label {:?}", self.label));
        }
        Ok(())
    }

    pub fn attempt_budget(&self) -> u64 {
        self.max_attempts_per_instance as u64 * self.target_new_instances as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationStats {
    /// Generate calls.
    pub attempts: u64,
    pub accepted: u64,
    /// Candidates dropped before generation because the hole hit an annotation.
    pub rejected_intersection: u64,
    pub rejected_confidence: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedInstance {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
    /// Seed handed to the generator for this candidate.
    pub seed: u64,
    /// 1-based attempt number at which the instance was accepted.
    pub attempt: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// The budget ran out or no image could take another instance; the run
    /// holds whatever was accepted.
    BudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct AugmentationRun {
    pub dataset: Dataset,
    pub stats: AugmentationStats,
    pub accepted: Vec<AcceptedInstance>,
    pub status: RunStatus,
    pub elapsed: Duration,
}

/// Everything needed to audit or replay a run. Wall-clock time is left out so
/// that replays produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: AugmentationConfig,
    pub status: RunStatus,
    pub stats: AugmentationStats,
    pub accepted: Vec<AcceptedInstance>,
}

impl AugmentationRun {
    pub fn manifest(&self, config: &AugmentationConfig) -> RunManifest {
        RunManifest {
            config: config.clone(),
            status: self.status,
            stats: self.stats,
            accepted: self.accepted.clone(),
        }
    }
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), EngineError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|source| EngineError::Io {
            path: path.to_owned(),
            source,
        })
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("backend failure after {} attempts: {source}", stats.attempts)]
    Backend {
        #[source]
        source: BackendError,
        stats: AugmentationStats,
    },
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("no clear background patch could be sampled")]
    NoBackground,
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A candidate that passed the collision check and waits for the backends.
struct Job {
    slot: usize,
    masked: MaskedPatch,
    seed: u64,
}

type JobOutcome = Result<(GenerationResult, f64), BackendError>;

fn run_job<G, D>(gen: &mut G, det: &mut D, job: &Job) -> JobOutcome
where
    G: GeneratorBackend + ?Sized,
    D: DetectorBackend + ?Sized,
{
    let result = gen.fill(&job.masked, job.seed)?;
    let score = score_generated(det, &result, &job.masked)?;
    Ok((result, score))
}

/// Round-robin cursor over a shuffled image order that skips full images.
struct Visitor {
    order: Vec<usize>,
    pos: usize,
}

impl Visitor {
    fn next(&mut self, counts: &[u32], cap: u32) -> Option<usize> {
        let n = self.order.len();
        for step in 0..n {
            let i = (self.pos + step) % n;
            let slot = self.order[i];
            if counts[slot] < cap {
                self.pos = (i + 1) % n;
                return Some(slot);
            }
        }
        None
    }
}

/// The loop shared by the sequential and pooled entry points. Candidates are
/// issued in batches of up to `batch_size` distinct images; `execute` returns
/// one outcome per job, in order. Commits happen in issue order and stop at the
/// same candidate a one-at-a-time run would stop at, so both modes agree.
fn run_engine(
    train: &Dataset,
    config: &AugmentationConfig,
    batch_size: usize,
    execute: &mut dyn FnMut(&[Job]) -> Vec<JobOutcome>,
) -> Result<AugmentationRun, EngineError> {
    config.validate()?;
    let started = Instant::now();
    for record in train.records() {
        Patch::extract(record, (0, 0), config.patch_size)?;
    }

    let mut records: Vec<ImageRecord> = train.records().to_vec();
    let mut counts = vec![0u32; records.len()];
    let mut visitor = Visitor {
        order: shuffled_indices(records.len(), config.seed),
        pos: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_A116_0000_0001);
    let mut stats = AugmentationStats::default();
    let mut accepted = Vec::new();
    let budget = config.attempt_budget();
    let target = config.target_new_instances as u64;

    let status = 'run: loop {
        // `collided[i]` marks issue-order candidates rejected before generation
        let mut collided: Vec<bool> = Vec::new();
        let mut jobs: Vec<Job> = Vec::new();
        let mut used = BTreeSet::new();
        while collided.len() < batch_size.max(1) {
            let saved = visitor.pos;
            let Some(slot) = visitor.next(&counts, config.instances_per_image) else {
                break;
            };
            if !used.insert(slot) {
                visitor.pos = saved;
                break;
            }
            let record = &records[slot];
            let origin = sample_patch_origin(record, config.patch_size, &mut rng)?;
            let seed: u64 = rng.random();
            let masked = mask_center(&Patch::extract(record, origin, config.patch_size)?);
            let hole = hole_rect_global(&masked);
            let collides = record.annotations().iter().any(|a| {
                (config.collide_with_synthetic || a.provenance == Provenance::Original) && hole.intersects(&a.bbox)
            });
            collided.push(collides);
            if !collides {
                jobs.push(Job { slot, masked, seed });
            }
        }
        if collided.is_empty() {
            break 'run RunStatus::BudgetExhausted;
        }

        let outcomes = if jobs.is_empty() { Vec::new() } else { execute(&jobs) };
        let mut done = jobs.into_iter().zip(outcomes);
        for hit in collided {
            if stats.accepted >= target {
                break 'run RunStatus::Completed;
            }
            if stats.attempts >= budget || stats.rejected_intersection >= budget {
                break 'run RunStatus::BudgetExhausted;
            }
            if hit {
                stats.rejected_intersection += 1;
                continue;
            }
            let (job, outcome) = done.next().expect("one outcome per job");
            let (result, score) = outcome.map_err(|source| EngineError::Backend { source, stats })?;
            stats.attempts += 1;
            if score > config.acceptance_threshold {
                let record = &records[job.slot];
                let hole = hole_rect_global(&job.masked);
                let composited = composite_hole(record, &job.masked, &result)?;
                let updated =
                    composited.with_annotation(Annotation::new(hole, config.label.clone(), Provenance::Synthetic))?;
                accepted.push(AcceptedInstance {
                    image_id: record.id().to_owned(),
                    bbox: hole,
                    score,
                    seed: job.seed,
                    attempt: stats.attempts,
                });
                records[job.slot] = updated;
                counts[job.slot] += 1;
                stats.accepted += 1;
            } else {
                stats.rejected_confidence += 1;
            }
        }
        if stats.accepted >= target {
            break 'run RunStatus::Completed;
        }
        if stats.attempts >= budget || stats.rejected_intersection >= budget {
            break 'run RunStatus::BudgetExhausted;
        }
    };
    log::debug!("augmentation {status:?}: {stats:?}");

    let label_set = train
        .label_set()
        .iter()
        .cloned()
        .chain(std::iter::once(config.label.clone()))
        .collect();
    Ok(AugmentationRun {
        dataset: Dataset::new(records, label_set)?,
        stats,
        accepted,
        status,
        elapsed: started.elapsed(),
    })
}

/// Runs the augmentation loop with one generator and one detector.
///
/// The input dataset is left untouched; the returned run holds the augmented
/// copy. Running out of budget is not an error: check [`AugmentationRun::status`].
pub fn augment_dataset<G, D>(
    train: &Dataset,
    generator: &mut G,
    detector: &mut D,
    config: &AugmentationConfig,
) -> Result<AugmentationRun, EngineError>
where
    G: GeneratorBackend + ?Sized,
    D: DetectorBackend + ?Sized,
{
    run_engine(train, config, 1, &mut |jobs| {
        jobs.iter().map(|job| run_job(generator, detector, job)).collect()
    })
}

/// Same as [`augment_dataset`], with candidates generated and scored
/// concurrently on a pool of backend pairs. Job `i` of every batch goes to
/// `pool[i]`, and the result equals that of a sequential run with any pool size.
pub fn augment_dataset_pooled<G, D>(
    train: &Dataset,
    pool: &mut [(G, D)],
    config: &AugmentationConfig,
) -> Result<AugmentationRun, EngineError>
where
    G: GeneratorBackend + Send,
    D: DetectorBackend + Send,
{
    if pool.is_empty() {
        return Err(EngineError::InvalidConfig("backend pool is empty".into()));
    }
    let width = pool.len();
    run_engine(train, config, width, &mut |jobs| {
        if jobs.len() == 1 {
            let (gen, det) = &mut pool[0];
            return vec![run_job(gen, det, &jobs[0])];
        }
        thread::scope(|scope| {
            let handles: Vec<_> = pool
                .iter_mut()
                .zip(jobs)
                .map(|((gen, det), job)| scope.spawn(move || run_job(gen, det, job)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("backend worker panicked"))
                .collect()
        })
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub image: String,
    pub annotations: String,
    pub source_id: String,
    pub origin: (u32, u32),
}

/// Index of an exported training-patch corpus.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PatchManifest {
    pub patch_size: u32,
    pub patches: Vec<PatchEntry>,
}

/// Writes one PNG per instance, each centred on its instance as far as the
/// image allows, with patch-local annotations. Neighbouring instances that
/// reach into a patch are kept, clipped to it. A `manifest.json` lists the files.
pub fn export_training_patches(train: &Dataset, patch_size: u32, out: &Path) -> Result<PatchManifest, EngineError> {
    check_patch_size(patch_size)?;
    let mut records = Vec::with_capacity(train.instance_count());
    let mut manifest = PatchManifest {
        patch_size,
        patches: Vec::new(),
    };
    for record in train.records() {
        for (k, ann) in record.annotations().iter().enumerate() {
            let patch = harvest_instance_patch(record, ann, patch_size)?;
            let (ox, oy) = patch.origin();
            let size = patch_size as f64;
            let local: Vec<Annotation> = record
                .annotations()
                .iter()
                .filter_map(|a| {
                    let moved = a.bbox.translate(-(ox as f64), -(oy as f64));
                    moved.clip(size, size).map(|bbox| Annotation {
                        bbox,
                        label: a.label.clone(),
                        provenance: a.provenance,
                    })
                })
                .collect();
            let id = format!("{}_{k:04}", record.id());
            manifest.patches.push(PatchEntry {
                image: format!("{id}.png"),
                annotations: format!("{id}.txt"),
                source_id: record.id().to_owned(),
                origin: (ox, oy),
            });
            records.push(ImageRecord::new(id, patch.pixels().clone(), local)?);
        }
    }
    let corpus = Dataset::new(records, train.label_set().clone())?;
    save_dataset(&corpus, out, Format::VedaiLike)?;
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|source| EngineError::Io { path, source })?;
    Ok(manifest)
}

/// Counts of scores in the ten bins `[0, 0.1), ..., [0.9, 1.0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub bins: [u64; 10],
    pub scores: Vec<f64>,
}

impl ScoreHistogram {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut bins = [0u64; 10];
        for &s in &scores {
            bins[((s * 10.0).floor().max(0.0) as usize).min(9)] += 1;
        }
        Self { bins, scores }
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }
}

/// Scores `n_samples` unfiltered candidates generated on random clear patches.
pub fn acceptance_rate_probe<G, D>(
    generator: &mut G,
    detector: &mut D,
    n_samples: usize,
    backgrounds: &Dataset,
    patch_size: u32,
    seed: u64,
) -> Result<ScoreHistogram, EngineError>
where
    G: GeneratorBackend + ?Sized,
    D: DetectorBackend + ?Sized,
{
    if n_samples == 0 {
        return Err(EngineError::InvalidConfig("n_samples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(n_samples);
    let mut stats = AugmentationStats::default();
    for _ in 0..n_samples {
        let masked = sample_clear_patch(backgrounds, patch_size, &mut rng, 1000)?.ok_or(EngineError::NoBackground)?;
        let job = Job {
            slot: 0,
            masked,
            seed: rng.random(),
        };
        let (_, score) = run_job(generator, detector, &job).map_err(|source| EngineError::Backend { source, stats })?;
        stats.attempts += 1;
        scores.push(score);
    }
    Ok(ScoreHistogram::from_scores(scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{DetectorCapabilities, GeneratorCapabilities};
    use crate::metrics::Detection;
    use image::{Rgb, RgbImage};

    struct Stamp;

    impl GeneratorBackend for Stamp {
        fn capabilities(&self) -> GeneratorCapabilities {
            GeneratorCapabilities {
                patch_size: None,
                deterministic: true,
            }
        }

        fn fill(&mut self, masked: &MaskedPatch, seed: u64) -> Result<GenerationResult, BackendError> {
            let mut out = masked.masked_pixels().clone();
            let (o, s) = masked.hole_span();
            for y in o..o + s {
                for x in o..o + s {
                    out.put_pixel(x, y, Rgb([200, (seed % 251) as u8, 7]));
                }
            }
            Ok(GenerationResult::from_completed(out, masked.size())?)
        }
    }

    /// Reports the hole with a fixed confidence.
    struct Constant(f64);

    impl DetectorBackend for Constant {
        fn capabilities(&self) -> DetectorCapabilities {
            DetectorCapabilities { min_input: 1 }
        }

        fn detect(&mut self, image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
            let s = image.width() as f64;
            let bbox = BBox::new(s / 4.0, s / 4.0, 3.0 * s / 4.0, 3.0 * s / 4.0).unwrap();
            Ok(vec![Detection::new(bbox, self.0, "car")])
        }
    }

    struct Blind;

    impl DetectorBackend for Blind {
        fn capabilities(&self) -> DetectorCapabilities {
            DetectorCapabilities { min_input: 1 }
        }

        fn detect(&mut self, _image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
            Ok(Vec::new())
        }
    }

    struct Failing;

    impl DetectorBackend for Failing {
        fn capabilities(&self) -> DetectorCapabilities {
            DetectorCapabilities { min_input: 1 }
        }

        fn detect(&mut self, _image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
            Err(BackendError::Remote("model unavailable".into()))
        }
    }

    fn dataset(n: usize) -> Dataset {
        let records = (0..n)
            .map(|i| {
                let img = RgbImage::from_pixel(64, 64, Rgb([i as u8, 50, 50]));
                let ann = Annotation::original(BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(), "car");
                ImageRecord::new(format!("img{i}"), img, vec![ann]).unwrap()
            })
            .collect();
        Dataset::from_records(records).unwrap()
    }

    fn config(target: u32) -> AugmentationConfig {
        AugmentationConfig {
            patch_size: 16,
            acceptance_threshold: 0.5,
            target_new_instances: target,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn accepts_up_to_target() {
        let train = dataset(6);
        let run = augment_dataset(&train, &mut Stamp, &mut Constant(0.9), &config(4)).unwrap();
        assert_eq!(run.status, RunStatus::Completed);
        assert_eq!(run.stats.accepted, 4);
        assert_eq!(run.stats.attempts, 4);
        assert_eq!(run.accepted.len(), 4);
        let synth = run
            .dataset
            .records()
            .iter()
            .flat_map(|r| r.annotations())
            .filter(|a| a.provenance == Provenance::Synthetic)
            .count();
        assert_eq!(synth, 4);
        assert_eq!(train, dataset(6));
    }

    #[test]
    fn threshold_is_strict() {
        let train = dataset(3);
        let mut cfg = config(2);
        cfg.max_attempts_per_instance = 5;
        let run = augment_dataset(&train, &mut Stamp, &mut Constant(0.5), &cfg).unwrap();
        assert_eq!(run.stats.accepted, 0);
        assert_eq!(run.status, RunStatus::BudgetExhausted);
        assert_eq!(run.stats.attempts, 10);
    }

    #[test]
    fn blind_detector_exhausts_budget() {
        let train = dataset(4);
        let run = augment_dataset(&train, &mut Stamp, &mut Blind, &config(3)).unwrap();
        assert_eq!(run.status, RunStatus::BudgetExhausted);
        assert_eq!(run.stats.accepted, 0);
        assert_eq!(run.stats.rejected_confidence, run.stats.attempts);
        assert_eq!(run.stats.attempts, 300);
    }

    #[test]
    fn per_image_cap_ends_the_run() {
        let train = dataset(2);
        let run = augment_dataset(&train, &mut Stamp, &mut Constant(0.9), &config(5)).unwrap();
        assert_eq!(run.status, RunStatus::BudgetExhausted);
        assert_eq!(run.stats.accepted, 2);
    }

    #[test]
    fn backend_failure_carries_stats() {
        let train = dataset(2);
        match augment_dataset(&train, &mut Stamp, &mut Failing, &config(1)) {
            Err(EngineError::Backend { stats, .. }) => assert_eq!(stats.attempts, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pooled_matches_sequential() {
        let train = dataset(7);
        let mut cfg = config(9);
        cfg.instances_per_image = 2;
        let seq = augment_dataset(&train, &mut Stamp, &mut Constant(0.9), &cfg).unwrap();
        for width in [1, 2, 3, 5] {
            let mut pool: Vec<(Stamp, Constant)> = (0..width).map(|_| (Stamp, Constant(0.9))).collect();
            let pooled = augment_dataset_pooled(&train, &mut pool, &cfg).unwrap();
            assert_eq!(pooled.dataset, seq.dataset, "pool width {width}");
            assert_eq!(pooled.stats, seq.stats);
            assert_eq!(pooled.accepted, seq.accepted);
        }
    }

    #[test]
    fn undersized_images_are_rejected() {
        let train = dataset(1);
        let mut cfg = config(1);
        cfg.patch_size = 128;
        assert!(matches!(
            augment_dataset(&train, &mut Stamp, &mut Constant(0.9), &cfg),
            Err(EngineError::Patch(PatchError::ImageTooSmall { .. }))
        ));
    }

    #[test]
    fn constant_detector_fills_one_bin() {
        let h = acceptance_rate_probe(&mut Stamp, &mut Constant(0.3), 50, &dataset(2), 16, 1).unwrap();
        assert_eq!(h.bins[3], 50);
        assert_eq!(h.total(), 50);
    }

    #[test]
    fn histogram_edges() {
        let h = ScoreHistogram::from_scores(vec![0.0, 0.1, 0.95, 1.0]);
        assert_eq!(h.bins, [1, 1, 0, 0, 0, 0, 0, 0, 0, 2]);
    }

    #[test]
    fn export_empty_set_writes_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = export_training_patches(&Dataset::default(), 96, dir.path()).unwrap();
        assert!(m.patches.is_empty());
        assert!(dir.path().join("manifest.json").exists());
    }
}
