use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use genaug_core::dataset::{load_dataset, Format};
use genaug_core::engine::RunManifest;
use genaug_core::harness::report::parse_csv;
use genaug_core::metrics::{write_predictions, Predictions};
use genaug_core::{Detection, Provenance, RunStatus};
use tempfile::TempDir;

fn genaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genaug")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn make_fixture(images: usize, seed: u64) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let seed = seed.to_string();
    let n = images.to_string();
    let out = genaug(&["fixture", "--out", s(&data), "--images", &n, "--seed", &seed]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (dir, data)
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn augment(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "augment",
        "--data-root",
        s(data),
        "--out",
        s(out),
        "--calibration-samples",
        "300",
    ];
    args.extend_from_slice(extra);
    genaug(&args)
}

#[test]
fn toy_augmentation_reaches_its_target() {
    let (dir, data) = make_fixture(20, 1);
    let out = dir.path().join("aug");
    let run = augment(
        &data,
        &out,
        &["--threshold", "0.4", "--target", "10", "--toy-backends", "--seed", "7"],
    );
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout(&run).starts_with("accepted 10 of 10 target"));

    let manifest: RunManifest = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.status, RunStatus::Completed);
    assert_eq!(manifest.accepted.len(), 10);
    assert!(manifest.accepted.iter().all(|a| a.score > 0.4));
    assert_eq!(manifest.config.seed, 7);

    let before = load_dataset(&data, Format::VedaiLike).unwrap();
    let after = load_dataset(&out, Format::VedaiLike).unwrap();
    let synthetic = after
        .records()
        .iter()
        .flat_map(|r| r.annotations())
        .filter(|a| a.provenance == Provenance::Synthetic)
        .count();
    assert_eq!(synthetic, 10);
    assert_eq!(after.instance_count(), before.instance_count() + 10);
}

#[test]
fn same_seed_gives_identical_files() {
    let (dir, data) = make_fixture(12, 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let run = augment(
            &data,
            out,
            &["--target", "8", "--toy-backends", "--seed", "3", "--threads", "3"],
        );
        assert_eq!(code(&run), 0);
    }
    assert_eq!(files(&a), files(&b));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&genaug(&["augment", "--no-such-flag"])), 1);
    assert_eq!(code(&genaug(&["frobnicate"])), 1);
    assert_eq!(code(&genaug(&["--help"])), 0);
    let (dir, data) = make_fixture(3, 0);
    let out = dir.path().join("x");
    // neither a toy nor a command backend for the generator role
    assert_eq!(code(&augment(&data, &out, &["--detector-cmd", "true"])), 1);
    assert_eq!(
        code(&augment(&data, &out, &["--toy-backends", "--threshold", "1.5"])),
        1
    );
    assert_eq!(
        code(&augment(&data, &out, &["--toy-backends", "--patch-size", "90"])),
        1
    );
    assert!(!out.exists());
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = augment(&missing, &dir.path().join("o"), &["--toy-backends"]);
    assert_eq!(code(&out), 2);
    let (dir, data) = make_fixture(3, 0);
    let out = augment(
        &data,
        &dir.path().join("o"),
        &["--generator-cmd", "/nonexistent/gen", "--toy-backends"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn exhausted_budget_exits_with_three_and_keeps_the_partial_result() {
    let (dir, data) = make_fixture(6, 4);
    let out = dir.path().join("aug");
    // no score can exceed 1.0
    let run = augment(
        &data,
        &out,
        &[
            "--toy-backends",
            "--threshold",
            "1.0",
            "--target",
            "3",
            "--max-attempts",
            "2",
        ],
    );
    assert_eq!(code(&run), 3);
    let manifest: RunManifest = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.status, RunStatus::BudgetExhausted);
    assert_eq!(manifest.stats.attempts, 6);
    assert!(manifest.accepted.is_empty());
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&genaug(&["fixture", "--out", s(&data), "--dry-run"])), 0);
    assert!(!data.exists());
    let out = dir.path().join("aug");
    let run = genaug(&[
        "augment",
        "--data-root",
        s(&data),
        "--out",
        s(&out),
        "--toy-backends",
        "--dry-run",
    ]);
    assert_eq!(code(&run), 0);
    assert!(stdout(&run).starts_with("plan:"));
    assert!(!out.exists());
    let report = dir.path().join("r.csv");
    let sweep = genaug(&[
        "sweep",
        "--data-root",
        s(&data),
        "--toy-backends",
        "--out",
        s(&report),
        "--dry-run",
    ]);
    assert_eq!(code(&sweep), 0);
    assert!(!report.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn ground_truth_as_predictions_scores_one() {
    let (dir, data) = make_fixture(5, 9);
    let gt = load_dataset(&data, Format::VedaiLike).unwrap();
    let preds: Predictions = gt
        .records()
        .iter()
        .map(|r| {
            let dets = r
                .annotations()
                .iter()
                .map(|a| Detection::new(a.bbox, 1.0, "car"))
                .collect();
            (r.id().to_owned(), dets)
        })
        .collect();
    let path = dir.path().join("preds.txt");
    write_predictions(&path, &preds).unwrap();
    let out = genaug(&["evaluate", "--data-root", s(&data), "--predictions", s(&path)]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), "AP@0.2 1.00\nAP@0.5 1.00\nAP@0.7 1.00\nAP average 1.00\n");
}

#[test]
fn external_toy_backends_drive_augmentation() {
    let (dir, data) = make_fixture(10, 5);
    let out = dir.path().join("aug");
    let backend = env!("CARGO_BIN_EXE_genaug-toy-backend");
    let gen = format!("'{backend}' --role generator --seed 1");
    let det = format!("'{backend}' --role detector --calibration-samples 300");
    let run = augment(
        &data,
        &out,
        &[
            "--generator-cmd",
            &gen,
            "--detector-cmd",
            &det,
            "--target",
            "5",
            "--threshold",
            "0.3",
        ],
    );
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let manifest: RunManifest = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.accepted.len(), 5);
    assert!(manifest.accepted.iter().all(|a| a.score > 0.3));
}

#[test]
fn sweep_writes_a_parsable_report() {
    let (dir, data) = make_fixture(12, 6);
    let report = dir.path().join("sweep.csv");
    let run = genaug(&[
        "sweep",
        "--data-root",
        s(&data),
        "--toy-backends",
        "--threshold",
        "0,0.5",
        "--target",
        "8",
        "--n-train",
        "8",
        "--calibration-samples",
        "300",
        "--out",
        s(&report),
        "--threads",
        "2",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let rows = parse_csv(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].attempts, 8.0);
    assert!(rows[1].attempts >= 8.0);
    assert!(rows.iter().all(|r| r.n_images == 8 && r.ap.len() == 3));
}

#[test]
fn grid_prints_markdown() {
    let (_dir, data) = make_fixture(10, 6);
    let run = genaug(&[
        "grid",
        "--data-root",
        s(&data),
        "--toy-backends",
        "--sizes",
        "3,5",
        "--per-image",
        "0,1",
        "--n-train",
        "6",
        "--calibration-samples",
        "300",
        "--report",
        "md",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let text = stdout(&run);
    assert!(text.starts_with("| Threshold | Images |"));
    assert_eq!(text.lines().count(), 2 + 4);
    assert!(text.lines().nth(2).unwrap().starts_with("| - | 3 | 0 |"));
}

#[test]
fn probe_and_hist_report_counts() {
    let (dir, data) = make_fixture(6, 8);
    let csv = dir.path().join("probe.csv");
    let run = genaug(&[
        "probe",
        "--data-root",
        s(&data),
        "--toy-backends",
        "--samples",
        "200",
        "--calibration-samples",
        "300",
        "--out",
        s(&csv),
    ]);
    assert_eq!(code(&run), 0);
    let text = fs::read_to_string(&csv).unwrap();
    let total: u64 = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 200);
    assert_eq!(text.lines().count(), 11);

    let hist = genaug(&["hist", "--data-root", s(&data)]);
    assert_eq!(code(&hist), 0);
    // fixture boxes are at most 48 px
    assert!(stdout(&hist).ends_with("coverage(48) = 1.0000\n"), "{}", stdout(&hist));
}

#[test]
fn harvest_exports_one_patch_per_instance() {
    let (dir, data) = make_fixture(6, 10);
    let out = dir.path().join("patches");
    let run = genaug(&["harvest", "--data-root", s(&data), "--out", s(&out)]);
    assert_eq!(code(&run), 0);
    let n = load_dataset(&data, Format::VedaiLike).unwrap().instance_count();
    assert_eq!(load_dataset(&out, Format::VedaiLike).unwrap().len(), n);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn yolo_fixture_round_trips_through_augment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("yolo");
    assert_eq!(
        code(&genaug(&[
            "fixture",
            "--out",
            s(&data),
            "--images",
            "6",
            "--format",
            "yolo"
        ])),
        0
    );
    let out = dir.path().join("aug");
    let run = augment(
        &data,
        &out,
        &[
            "--format",
            "yolo",
            "--toy-backends",
            "--target",
            "3",
            "--threshold",
            "0.2",
        ],
    );
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(load_dataset(&out, Format::YoloTxt).unwrap().len(), 6);
}
