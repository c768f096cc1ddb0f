use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use genaug_core::backend::protocol::{spawn_detector, spawn_generator, ProtocolOptions};
use genaug_core::backend::toy::{
    calibrate_score_map, ToyDetector, ToyDetectorParams, ToyGenerator, ToyGeneratorParams,
};
use genaug_core::backend::{BoxedDetector, BoxedGenerator};
use genaug_core::dataset::{filter_oversized, load_dataset, save_dataset, split_dataset, Dataset, Format};
use genaug_core::engine::{
    acceptance_rate_probe, augment_dataset_pooled, export_training_patches, AugmentationConfig, RunStatus,
};
use genaug_core::harness::{
    emit_report, instance_size_histogram, render_report, size_grid, threshold_sweep, Aggregation, BackendSuite,
    CommandEvalFactory, EvalDetectorFactory, HarnessError, ReportFormat, ReportRow, SweepSpec, ToyEvalFactory,
};
use genaug_core::metrics::{evaluate, read_predictions, DEFAULT_IOU_THRESHOLDS};
use genaug_core::synth::{toy_world, WorldSpec};

#[derive(Debug, Parser)]
#[command(
    name = "genaug",
    version,
    about = "Generative instance augmentation for aerial detection datasets"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Export one centred training patch per instance.
    Harvest(HarvestArgs),
    /// Add generated instances to a dataset.
    Augment(AugmentArgs),
    /// Score a prediction file against ground truth.
    Evaluate(EvaluateArgs),
    /// Threshold sweep: augment, retrain and evaluate per threshold.
    Sweep(SweepArgs),
    /// Dataset size by instances-per-image grid.
    Grid(GridArgs),
    /// Histogram of scores of unfiltered generated samples.
    Probe(ProbeArgs),
    /// Histogram of instance sizes and patch coverage.
    Hist(HistArgs),
    /// Write a synthetic toy dataset.
    Fixture(FixtureArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct DataArgs {
    #[arg(long)]
    data_root: PathBuf,
    /// Annotation format: vedai or yolo.
    #[arg(long, default_value = "vedai", value_parser = parse_format)]
    format: Format,
}

#[derive(Debug, Clone, Args, Serialize)]
struct RunArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Backend pool size.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    /// Print the resolved plan and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
struct BackendArgs {
    #[arg(long, default_value_t = 96)]
    patch_size: u32,
    /// Generator process speaking the line-delimited JSON protocol.
    #[arg(long)]
    generator_cmd: Option<String>,
    /// Acceptance detector process speaking the same protocol.
    #[arg(long)]
    detector_cmd: Option<String>,
    /// Use the built-in toy generator and detector for roles without a command.
    #[arg(long)]
    toy_backends: bool,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    /// Samples used to calibrate the toy acceptance detector.
    #[arg(long, default_value_t = 1000)]
    calibration_samples: usize,
}

#[derive(Debug, Args, Serialize)]
struct HarvestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 96)]
    patch_size: u32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args, Serialize)]
struct AugmentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backends: BackendArgs,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 0.4)]
    threshold: f64,
    #[arg(long, default_value_t = 1000)]
    target: u32,
    #[arg(long, default_value_t = 1)]
    per_image: u32,
    #[arg(long, default_value_t = 100)]
    max_attempts: u32,
    /// Output directory for the augmented dataset and its manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Prediction file: `image_id label confidence x_min y_min x_max y_max` per line.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_IOU_THRESHOLDS)]
    iou: Vec<f64>,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args, Serialize)]
struct ExperimentArgs {
    /// Training images; the rest is the test set. Defaults to 500/1272 of the data.
    #[arg(long)]
    n_train: Option<usize>,
    /// Seeds to run; defaults to the single `--seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    mean_over_seeds: bool,
    #[arg(long, default_value = "csv", value_parser = parse_report)]
    report: ReportFormat,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// External evaluation detector; a toy detector is fitted per row otherwise.
    #[arg(long)]
    eval_detector_cmd: Option<String>,
    #[arg(long, default_value_t = 100)]
    max_attempts: u32,
}

#[derive(Debug, Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backends: BackendArgs,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
    threshold: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    target: u32,
}

#[derive(Debug, Args, Serialize)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backends: BackendArgs,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [200, 300, 400])]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
    per_image: Vec<u32>,
    #[arg(long, default_value_t = 0.4)]
    threshold: f64,
}

#[derive(Debug, Args, Serialize)]
struct ProbeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backends: BackendArgs,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    /// Optional CSV of the bins.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct HistArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 8.0)]
    bin_width: f64,
    /// Side whose coverage is reported; defaults to half the patch size.
    #[arg(long)]
    side: Option<f64>,
    #[arg(long, default_value_t = 96)]
    patch_size: u32,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args, Serialize)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    images: usize,
    #[arg(long, default_value_t = 256)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "vedai", value_parser = parse_format)]
    format: Format,
    #[arg(long)]
    dry_run: bool,
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse()
}

fn parse_report(s: &str) -> Result<ReportFormat, String> {
    s.parse()
}

/// Failure classes that map to distinct exit codes.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

enum Outcome {
    Done,
    Partial,
}

type CmdResult = Result<Outcome, Failure>;

fn echo<T: Serialize>(command: &str, args: &T) {
    let text = serde_json::to_string_pretty(args).expect("arguments serialize");
    eprintln!("genaug {command}: resolved config\n{text}");
}

fn load(data: &DataArgs) -> anyhow::Result<Dataset> {
    load_dataset(&data.data_root, data.format).with_context(|| format!("loading {}", data.data_root.display()))
}

fn protocol_options(b: &BackendArgs) -> ProtocolOptions {
    ProtocolOptions {
        timeout: Duration::from_secs(b.timeout_secs),
        patch_size: b.patch_size,
    }
}

fn check_backend_sources(b: &BackendArgs) -> Result<(), Failure> {
    if !b.toy_backends && (b.generator_cmd.is_none() || b.detector_cmd.is_none()) {
        return Err(Failure::Usage(
            "each role needs a backend: pass --generator-cmd and --detector-cmd, or --toy-backends".into(),
        ));
    }
    Ok(())
}

/// Resolves `--generator-cmd`, `--detector-cmd` and `--toy-backends` into a pool factory.
struct CliSuite {
    args: BackendArgs,
    toy_detector: Option<ToyDetectorParams>,
}

impl CliSuite {
    fn new(args: &BackendArgs, backgrounds: &Dataset, seed: u64) -> anyhow::Result<Self> {
        let toy_detector = if args.detector_cmd.is_none() {
            let params = ToyDetectorParams::for_patches(args.patch_size);
            let map = calibrate_score_map(
                &ToyGeneratorParams::default(),
                &params,
                backgrounds,
                args.patch_size,
                args.calibration_samples.max(1),
                seed,
            )
            .context("calibrating the toy detector")?;
            Some(params.with_score_map(map))
        } else {
            None
        };
        Ok(Self {
            args: args.clone(),
            toy_detector,
        })
    }

    fn pair(&self, seed: u64) -> Result<(BoxedGenerator, BoxedDetector), HarnessError> {
        let options = protocol_options(&self.args);
        let gen: BoxedGenerator = match &self.args.generator_cmd {
            Some(cmd) => Box::new(spawn_generator(cmd, options)?),
            None => Box::new(ToyGenerator::new(ToyGeneratorParams {
                seed,
                ..Default::default()
            })?),
        };
        let det: BoxedDetector = match (&self.args.detector_cmd, &self.toy_detector) {
            (Some(cmd), _) => Box::new(spawn_detector(cmd, options)?),
            (None, Some(params)) => Box::new(ToyDetector::new(params.clone())?),
            (None, None) => unreachable!("toy detector is calibrated when no command is given"),
        };
        Ok((gen, det))
    }
}

impl BackendSuite for CliSuite {
    fn pool(&mut self, width: usize, seed: u64) -> Result<Vec<(BoxedGenerator, BoxedDetector)>, HarnessError> {
        (0..width.max(1)).map(|_| self.pair(seed)).collect()
    }
}

fn harvest(args: HarvestArgs) -> CmdResult {
    echo("harvest", &args);
    if args.dry_run {
        println!(
            "plan: load {}, drop instances larger than {} px, export {}x{} patches to {}",
            args.data.data_root.display(),
            args.patch_size / 2,
            args.patch_size,
            args.patch_size,
            args.out.display()
        );
        return Ok(Outcome::Done);
    }
    let data = load(&args.data)?;
    let (kept, dropped) = filter_oversized(&data, args.patch_size as f64 / 2.0);
    let manifest = export_training_patches(&kept, args.patch_size, &args.out).context("exporting patches")?;
    println!(
        "exported {} patches to {} ({dropped} oversized instances dropped)",
        manifest.patches.len(),
        args.out.display()
    );
    Ok(Outcome::Done)
}

fn augment(args: AugmentArgs) -> CmdResult {
    echo("augment", &args);
    check_backend_sources(&args.backends)?;
    let config = AugmentationConfig {
        patch_size: args.backends.patch_size,
        acceptance_threshold: args.threshold,
        instances_per_image: args.per_image,
        target_new_instances: args.target,
        max_attempts_per_instance: args.max_attempts,
        seed: args.run.seed,
        ..Default::default()
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if args.run.dry_run {
        println!(
            "plan: load {}, augment towards {} instances at threshold {:.2} with {} backend pair(s), write to {}",
            args.data.data_root.display(),
            args.target,
            args.threshold,
            args.run.threads,
            args.out.display()
        );
        return Ok(Outcome::Done);
    }
    let data = load(&args.data)?;
    let mut suite = CliSuite::new(&args.backends, &data, args.run.seed)?;
    let mut pool = suite
        .pool(args.run.threads as usize, args.run.seed)
        .map_err(anyhow::Error::from)?;
    let run = augment_dataset_pooled(&data, &mut pool, &config).context("augmentation failed")?;
    save_dataset(&run.dataset, &args.out, args.data.format).context("writing augmented dataset")?;
    run.manifest(&config)
        .write(&args.out.join("manifest.json"))
        .context("writing manifest")?;
    let s = run.stats;
    println!(
        "accepted {} of {} target in {} attempts ({} rejected by confidence, {} by intersection)",
        s.accepted, args.target, s.attempts, s.rejected_confidence, s.rejected_intersection
    );
    Ok(match run.status {
        RunStatus::Completed => Outcome::Done,
        RunStatus::BudgetExhausted => {
            eprintln!("budget exhausted before reaching the target; partial result written");
            Outcome::Partial
        }
    })
}

fn evaluate_cmd(args: EvaluateArgs) -> CmdResult {
    echo("evaluate", &args);
    if args.dry_run {
        println!(
            "plan: load {}, score {} at IoU {:?}",
            args.data.data_root.display(),
            args.predictions.display(),
            args.iou
        );
        return Ok(Outcome::Done);
    }
    let data = load(&args.data)?;
    let predictions = read_predictions(&args.predictions).context("reading predictions")?;
    let results = evaluate(&data, &predictions, &args.iou).context("evaluation failed")?;
    for r in &results {
        println!("AP@{} {:.2}", r.iou_threshold, r.ap);
    }
    let mean = results.iter().map(|r| r.ap).sum::<f64>() / results.len().max(1) as f64;
    println!("AP average {mean:.2}");
    Ok(Outcome::Done)
}

fn split(data: &Dataset, n_train: Option<usize>, seed: u64) -> anyhow::Result<(Dataset, Dataset)> {
    let n = n_train.unwrap_or_else(|| (data.len() * 500).div_ceil(1272).max(1));
    Ok(split_dataset(data, n, seed)?)
}

fn eval_factory(exp: &ExperimentArgs, backends: &BackendArgs) -> Box<dyn EvalDetectorFactory> {
    match &exp.eval_detector_cmd {
        Some(command) => Box::new(CommandEvalFactory {
            command: command.clone(),
            options: protocol_options(backends),
        }),
        None => Box::new(ToyEvalFactory::default()),
    }
}

fn write_rows(rows: &[ReportRow], exp: &ExperimentArgs) -> anyhow::Result<()> {
    match &exp.out {
        Some(path) => {
            emit_report(rows, exp.report, path)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => print!("{}", render_report(rows, exp.report)?),
    }
    Ok(())
}

fn base_spec(exp: &ExperimentArgs, backends: &BackendArgs, run: &RunArgs) -> SweepSpec {
    SweepSpec {
        seeds: if exp.seeds.is_empty() {
            vec![run.seed]
        } else {
            exp.seeds.clone()
        },
        patch_size: backends.patch_size,
        max_attempts_per_instance: exp.max_attempts,
        aggregation: if exp.mean_over_seeds {
            Aggregation::Mean
        } else {
            Aggregation::PerSeed
        },
        ..Default::default()
    }
}

fn sweep(args: SweepArgs) -> CmdResult {
    echo("sweep", &args);
    check_backend_sources(&args.backends)?;
    let spec = SweepSpec {
        thresholds: args.threshold.clone(),
        target_new_instances: args.target,
        ..base_spec(&args.experiment, &args.backends, &args.run)
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if args.run.dry_run {
        println!(
            "plan: {} threshold(s) x {} seed(s), target {} per row, {} report",
            spec.thresholds.len(),
            spec.seeds.len(),
            spec.target_new_instances,
            report_label(args.experiment.report)
        );
        return Ok(Outcome::Done);
    }
    let data = load(&args.data)?;
    let (train, test) = split(&data, args.experiment.n_train, args.run.seed)?;
    let mut suite = CliSuite::new(&args.backends, &train, args.run.seed)?;
    let mut factory = eval_factory(&args.experiment, &args.backends);
    let rows = threshold_sweep(
        &spec,
        &train,
        &test,
        &mut suite,
        factory.as_mut(),
        args.run.threads as usize,
    )
    .context("sweep failed")?;
    write_rows(&rows, &args.experiment)?;
    Ok(Outcome::Done)
}

fn grid(args: GridArgs) -> CmdResult {
    echo("grid", &args);
    check_backend_sources(&args.backends)?;
    let spec = SweepSpec {
        dataset_sizes: args.sizes.clone(),
        instances_per_image: args.per_image.clone(),
        acceptance_threshold: args.threshold,
        ..base_spec(&args.experiment, &args.backends, &args.run)
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if args.run.dry_run {
        println!(
            "plan: sizes {:?} x instances per image {:?} x {} seed(s) at threshold {:.2}, {} report",
            spec.dataset_sizes,
            spec.instances_per_image,
            spec.seeds.len(),
            spec.acceptance_threshold,
            report_label(args.experiment.report)
        );
        return Ok(Outcome::Done);
    }
    let data = load(&args.data)?;
    let (train, test) = split(&data, args.experiment.n_train, args.run.seed)?;
    let mut suite = CliSuite::new(&args.backends, &train, args.run.seed)?;
    let mut factory = eval_factory(&args.experiment, &args.backends);
    let rows = size_grid(
        &spec,
        &train,
        &test,
        &mut suite,
        factory.as_mut(),
        args.run.threads as usize,
    )
    .context("grid failed")?;
    write_rows(&rows, &args.experiment)?;
    Ok(Outcome::Done)
}

fn report_label(f: ReportFormat) -> &'static str {
    match f {
        ReportFormat::Csv => "CSV",
        ReportFormat::Markdown => "Markdown",
    }
}

fn probe(args: ProbeArgs) -> CmdResult {
    echo("probe", &args);
    check_backend_sources(&args.backends)?;
    if args.samples == 0 {
        return Err(Failure::Usage("--samples must be positive".into()));
    }
    if args.run.dry_run {
        println!(
            "plan: score {} unfiltered samples on {}",
            args.samples,
            args.data.data_root.display()
        );
        return Ok(Outcome::Done);
    }
    let data = load(&args.data)?;
    let suite = CliSuite::new(&args.backends, &data, args.run.seed)?;
    let (mut gen, mut det) = suite.pair(args.run.seed).map_err(anyhow::Error::from)?;
    let hist = acceptance_rate_probe(
        &mut gen,
        &mut det,
        args.samples,
        &data,
        args.backends.patch_size,
        args.run.seed.wrapping_add(1),
    )
    .context("probe failed")?;
    let mut text = String::from("bin_low,bin_high,count\n");
    for (i, c) in hist.bins.iter().enumerate() {
        text.push_str(&format!("{:.1},{:.1},{c}\n", i as f64 / 10.0, (i + 1) as f64 / 10.0));
    }
    write_text(args.out.as_deref(), &text)?;
    Ok(Outcome::Done)
}

fn write_text(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn hist(args: HistArgs) -> CmdResult {
    echo("hist", &args);
    let side = args.side.unwrap_or(args.patch_size as f64 / 2.0);
    if args.dry_run {
        println!(
            "plan: histogram of instance sizes in {} with {} px bins, coverage at {side} px",
            args.data.data_root.display(),
            args.bin_width
        );
        return Ok(Outcome::Done);
    }
    let data = load(&args.data)?;
    let h = instance_size_histogram(&data, args.bin_width).map_err(|e| match e {
        HarnessError::InvalidSpec(m) => Failure::Usage(m),
        other => Failure::Runtime(other.into()),
    })?;
    println!("size_low,size_high,count");
    for (i, c) in h.counts.iter().enumerate() {
        println!("{},{},{c}", i as f64 * h.bin_width, (i + 1) as f64 * h.bin_width);
    }
    println!("coverage({side}) = {:.4}", h.coverage(side));
    Ok(Outcome::Done)
}

fn fixture(args: FixtureArgs) -> CmdResult {
    echo("fixture", &args);
    if args.size < 96 {
        return Err(Failure::Usage("--size must be at least 96".into()));
    }
    if args.dry_run {
        println!("plan: write {} toy scenes to {}", args.images, args.out.display());
        return Ok(Outcome::Done);
    }
    let spec = WorldSpec {
        width: args.size,
        height: args.size,
        ..Default::default()
    };
    let data = toy_world(args.images, &spec, args.seed);
    save_dataset(&data, &args.out, args.format).context("writing fixture")?;
    println!(
        "wrote {} scenes with {} instances to {}",
        data.len(),
        data.instance_count(),
        args.out.display()
    );
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Harvest(a) => harvest(a),
        Command::Augment(a) => augment(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Grid(a) => grid(a),
        Command::Probe(a) => probe(a),
        Command::Hist(a) => hist(a),
        Command::Fixture(a) => fixture(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(3),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
