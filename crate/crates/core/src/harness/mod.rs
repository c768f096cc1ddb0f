//! Experiment sweeps: acceptance threshold, dataset size by instances per
//! image, and instance-size statistics.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::protocol::{spawn_detector, spawn_generator, ProtocolOptions};
use crate::backend::toy::{
    train_toy_detector, ToyDetector, ToyDetectorParams, ToyError, ToyGenerator, ToyGeneratorParams, TrainOptions,
};
use crate::backend::{BackendError, BoxedDetector, BoxedGenerator, DetectorBackend};
use crate::dataset::{shuffle_dataset, Dataset};
use crate::engine::{augment_dataset_pooled, AugmentationConfig, EngineError, RunStatus};
use crate::metrics::{evaluate, IouAp, MetricsError, Predictions, DEFAULT_IOU_THRESHOLDS};

pub mod report;

pub use report::{emit_report, parse_csv, render_report, CsvRow, ReportFormat};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid sweep: {0}")]
    InvalidSpec(String),
    #[error("dataset has no instances")]
    EmptyDataset,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One row per seed.
    #[default]
    PerSeed,
    /// One row per configuration, averaged over seeds.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub thresholds: Vec<f64>,
    pub iou_thresholds: Vec<f64>,
    pub dataset_sizes: Vec<usize>,
    /// Synthetic instances per image for the size grid; 0 is the baseline.
    pub instances_per_image: Vec<u32>,
    pub seeds: Vec<u64>,
    /// New instances per threshold-sweep row.
    pub target_new_instances: u32,
    /// Threshold used by the size grid.
    pub acceptance_threshold: f64,
    pub patch_size: u32,
    pub max_attempts_per_instance: u32,
    pub aggregation: Aggregation,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            thresholds: (0..10).map(|i| i as f64 / 10.0).collect(),
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            dataset_sizes: vec![200, 300, 400],
            instances_per_image: vec![0, 1, 2],
            seeds: vec![0],
            target_new_instances: 1000,
            acceptance_threshold: 0.4,
            patch_size: 96,
            max_attempts_per_instance: 100,
            aggregation: Aggregation::PerSeed,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.into()));
        if self.thresholds.is_empty()
            || self.iou_thresholds.is_empty()
            || self.dataset_sizes.is_empty()
            || self.instances_per_image.is_empty()
            || self.seeds.is_empty()
        {
            return bad("every list must be non-empty");
        }
        if self
            .thresholds
            .iter()
            .chain([&self.acceptance_threshold])
            .any(|t| !(0.0..=1.0).contains(t))
        {
            return bad("acceptance thresholds must lie in [0, 1]");
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad("IoU thresholds must lie in (0, 1]");
        }
        if self.target_new_instances == 0 || self.max_attempts_per_instance == 0 {
            return bad("target and attempt budget must be positive");
        }
        Ok(())
    }

    fn augmentation(&self, threshold: f64, per_image: u32, target: u32, seed: u64) -> AugmentationConfig {
        AugmentationConfig {
            patch_size: self.patch_size,
            acceptance_threshold: threshold,
            instances_per_image: per_image,
            target_new_instances: target,
            max_attempts_per_instance: self.max_attempts_per_instance,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `None` for rows without augmentation.
    pub threshold: Option<f64>,
    pub n_images: usize,
    pub instances_per_image: u32,
    pub ap: Vec<IouAp>,
    /// Mean of the AP values.
    pub ap_avg: f64,
    pub attempts: f64,
    pub seconds: f64,
}

impl ReportRow {
    pub fn new(
        threshold: Option<f64>,
        n_images: usize,
        instances_per_image: u32,
        ap: Vec<IouAp>,
        attempts: f64,
        seconds: f64,
    ) -> Self {
        let ap_avg = ap.iter().map(|a| a.ap).sum::<f64>() / ap.len().max(1) as f64;
        Self {
            threshold,
            n_images,
            instances_per_image,
            ap,
            ap_avg,
            attempts,
            seconds,
        }
    }

    fn mean(rows: &[ReportRow]) -> ReportRow {
        let n = rows.len() as f64;
        let first = &rows[0];
        let ap = first
            .ap
            .iter()
            .enumerate()
            .map(|(i, a)| IouAp {
                iou_threshold: a.iou_threshold,
                ap: rows.iter().map(|r| r.ap[i].ap).sum::<f64>() / n,
            })
            .collect();
        ReportRow::new(
            first.threshold,
            first.n_images,
            first.instances_per_image,
            ap,
            rows.iter().map(|r| r.attempts).sum::<f64>() / n,
            rows.iter().map(|r| r.seconds).sum::<f64>() / n,
        )
    }
}

/// Provides generator/detector pairs for the augmentation loop.
pub trait BackendSuite {
    /// `width` pairs for a run seeded with `seed`.
    fn pool(&mut self, width: usize, seed: u64) -> Result<Vec<(BoxedGenerator, BoxedDetector)>, HarnessError>;
}

/// Produces the detector whose AP a row reports, given that row's training set.
pub trait EvalDetectorFactory {
    fn train(&mut self, train: &Dataset, seed: u64) -> Result<BoxedDetector, HarnessError>;
}

/// Built-in toy generator and acceptance detector.
#[derive(Debug, Clone)]
pub struct ToySuite {
    pub generator: ToyGeneratorParams,
    pub detector: ToyDetectorParams,
}

impl BackendSuite for ToySuite {
    fn pool(&mut self, width: usize, seed: u64) -> Result<Vec<(BoxedGenerator, BoxedDetector)>, HarnessError> {
        (0..width.max(1))
            .map(|_| {
                let gen = ToyGenerator::new(ToyGeneratorParams {
                    seed,
                    ..self.generator.clone()
                })?;
                let det = ToyDetector::new(self.detector.clone())?;
                Ok((Box::new(gen) as BoxedGenerator, Box::new(det) as BoxedDetector))
            })
            .collect()
    }
}

/// External generator and detector processes, one pair per pool slot.
#[derive(Debug, Clone)]
pub struct CommandSuite {
    pub generator_cmd: String,
    pub detector_cmd: String,
    pub options: ProtocolOptions,
}

impl BackendSuite for CommandSuite {
    fn pool(&mut self, width: usize, _seed: u64) -> Result<Vec<(BoxedGenerator, BoxedDetector)>, HarnessError> {
        (0..width.max(1))
            .map(|_| {
                let gen = spawn_generator(&self.generator_cmd, self.options)?;
                let det = spawn_detector(&self.detector_cmd, self.options)?;
                Ok((Box::new(gen) as BoxedGenerator, Box::new(det) as BoxedDetector))
            })
            .collect()
    }
}

/// Fits a toy detector to each row's training set.
#[derive(Debug, Clone, Default)]
pub struct ToyEvalFactory {
    pub options: TrainOptions,
}

impl EvalDetectorFactory for ToyEvalFactory {
    fn train(&mut self, train: &Dataset, seed: u64) -> Result<BoxedDetector, HarnessError> {
        let params = train_toy_detector(train, &self.options, seed)?;
        Ok(Box::new(ToyDetector::new(params)?))
    }
}

/// An already-trained external detector; the training set is ignored.
#[derive(Debug, Clone)]
pub struct CommandEvalFactory {
    pub command: String,
    pub options: ProtocolOptions,
}

impl EvalDetectorFactory for CommandEvalFactory {
    fn train(&mut self, _train: &Dataset, _seed: u64) -> Result<BoxedDetector, HarnessError> {
        Ok(Box::new(spawn_detector(&self.command, self.options)?))
    }
}

/// Runs `detector` over every test image and scores the result.
pub fn evaluate_detector<D: DetectorBackend + ?Sized>(
    detector: &mut D,
    test: &Dataset,
    iou_thresholds: &[f64],
) -> Result<Vec<IouAp>, HarnessError> {
    let mut predictions = Predictions::new();
    for record in test.records() {
        predictions.insert(record.id().to_owned(), detector.detect(record.image())?);
    }
    Ok(evaluate(test, &predictions, iou_thresholds)?)
}

fn aggregate(rows: Vec<ReportRow>, aggregation: Aggregation, per_config: usize) -> Vec<ReportRow> {
    match aggregation {
        Aggregation::PerSeed => rows,
        Aggregation::Mean => rows.chunks(per_config).map(ReportRow::mean).collect(),
    }
}

/// Augments and evaluates one configuration; returns AP and attempts.
fn augmented_row(
    spec: &SweepSpec,
    config: &AugmentationConfig,
    train: &Dataset,
    test: &Dataset,
    suite: &mut dyn BackendSuite,
    factory: &mut dyn EvalDetectorFactory,
    threads: usize,
) -> Result<(Vec<IouAp>, f64), HarnessError> {
    let mut pool = suite.pool(threads, config.seed)?;
    let run = augment_dataset_pooled(train, &mut pool, config)?;
    if run.status == RunStatus::BudgetExhausted {
        log::warn!(
            "threshold {:.2}: budget exhausted with {} of {} instances",
            config.acceptance_threshold,
            run.stats.accepted,
            config.target_new_instances
        );
    }
    let mut detector = factory.train(&run.dataset, config.seed)?;
    let ap = evaluate_detector(&mut detector, test, &spec.iou_thresholds)?;
    Ok((ap, run.stats.attempts as f64))
}

/// One row per threshold (and seed, unless averaged), in threshold order. Each
/// row augments `train` towards `target_new_instances`, retrains the
/// evaluation detector on the result and scores it on `test`.
pub fn threshold_sweep(
    spec: &SweepSpec,
    train: &Dataset,
    test: &Dataset,
    suite: &mut dyn BackendSuite,
    factory: &mut dyn EvalDetectorFactory,
    threads: usize,
) -> Result<Vec<ReportRow>, HarnessError> {
    spec.validate()?;
    if train.is_empty() {
        return Err(HarnessError::InvalidSpec("training set is empty".into()));
    }
    let per_image = (spec.target_new_instances as usize).div_ceil(train.len()).max(1) as u32;
    let mut rows = Vec::new();
    for &threshold in &spec.thresholds {
        for &seed in &spec.seeds {
            let started = Instant::now();
            let config = spec.augmentation(threshold, per_image, spec.target_new_instances, seed);
            let (ap, attempts) = augmented_row(spec, &config, train, test, suite, factory, threads)?;
            log::info!("threshold {threshold:.2} seed {seed}: {attempts} attempts");
            rows.push(ReportRow::new(
                Some(threshold),
                train.len(),
                per_image,
                ap,
                attempts,
                started.elapsed().as_secs_f64(),
            ));
        }
    }
    Ok(aggregate(rows, spec.aggregation, spec.seeds.len()))
}

/// Rows for every dataset size and instances-per-image count. Subsets are
/// prefixes of one seed-shuffled order, so smaller subsets nest in larger ones.
/// Count 0 is the unaugmented baseline: no generator runs and attempts are 0.
pub fn size_grid(
    spec: &SweepSpec,
    full_train: &Dataset,
    test: &Dataset,
    suite: &mut dyn BackendSuite,
    factory: &mut dyn EvalDetectorFactory,
    threads: usize,
) -> Result<Vec<ReportRow>, HarnessError> {
    spec.validate()?;
    if let Some(&n) = spec.dataset_sizes.iter().find(|&&n| n == 0 || n > full_train.len()) {
        return Err(HarnessError::InvalidSpec(format!(
            "dataset size {n} outside 1..={}",
            full_train.len()
        )));
    }
    let mut rows = Vec::new();
    for &n in &spec.dataset_sizes {
        for &k in &spec.instances_per_image {
            for &seed in &spec.seeds {
                let started = Instant::now();
                let subset = shuffle_dataset(full_train, seed).prefix(n);
                let (threshold, ap, attempts) = if k == 0 {
                    let mut detector = factory.train(&subset, seed)?;
                    (None, evaluate_detector(&mut detector, test, &spec.iou_thresholds)?, 0.0)
                } else {
                    let target = u32::try_from(n * k as usize)
                        .map_err(|_| HarnessError::InvalidSpec("target overflows".into()))?;
                    let config = spec.augmentation(spec.acceptance_threshold, k, target, seed);
                    let (ap, attempts) = augmented_row(spec, &config, &subset, test, suite, factory, threads)?;
                    (Some(spec.acceptance_threshold), ap, attempts)
                };
                rows.push(ReportRow::new(
                    threshold,
                    n,
                    k,
                    ap,
                    attempts,
                    started.elapsed().as_secs_f64(),
                ));
            }
        }
    }
    Ok(aggregate(rows, spec.aggregation, spec.seeds.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeHistogram {
    pub bin_width: f64,
    /// `counts[i]` covers longest sides in `[i * bin_width, (i + 1) * bin_width)`.
    pub counts: Vec<u64>,
    sizes: Vec<(f64, f64)>,
}

impl SizeHistogram {
    /// Fraction of instances whose width and height are both at most `side`.
    pub fn coverage(&self, side: f64) -> f64 {
        let inside = self.sizes.iter().filter(|(w, h)| *w <= side && *h <= side).count();
        inside as f64 / self.sizes.len() as f64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Histogram of the longest box side over every instance.
pub fn instance_size_histogram(dataset: &Dataset, bin_width: f64) -> Result<SizeHistogram, HarnessError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(HarnessError::InvalidSpec("bin width must be positive".into()));
    }
    let sizes: Vec<(f64, f64)> = dataset
        .records()
        .iter()
        .flat_map(|r| r.annotations().iter().map(|a| (a.bbox.width(), a.bbox.height())))
        .collect();
    if sizes.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut counts = Vec::new();
    for (w, h) in &sizes {
        let bin = (w.max(*h) / bin_width).floor() as usize;
        if counts.len() <= bin {
            counts.resize(bin + 1, 0);
        }
        counts[bin] += 1;
    }
    Ok(SizeHistogram {
        bin_width,
        counts,
        sizes,
    })
}
