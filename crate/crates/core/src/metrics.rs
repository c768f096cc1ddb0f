//! IoU, greedy prediction matching, precision/recall curves and average precision.
//!
//! Matching is Pascal-VOC style: detections are visited in descending confidence
//! (ties keep input order) and each claims the unmatched ground truth with the
//! highest IoU at or above the threshold. AP integrates the all-points
//! interpolated precision envelope over recall.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BBox, Dataset};

/// IoU thresholds reported by default.
pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.2, 0.5, 0.7];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{predictions} predictions but no ground truth to recall")]
    ZeroGroundTruth { predictions: usize },
    #[error("predictions reference unknown image id {0:?}")]
    UnknownImageId(String),
    #[error("malformed prediction at {file}:{line}: {reason}")]
    MalformedPrediction { file: PathBuf, line: usize, reason: String },
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub label: String,
}

impl Detection {
    pub fn new(bbox: BBox, confidence: f64, label: impl Into<String>) -> Self {
        Self {
            bbox,
            confidence,
            label: label.into(),
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// TP/FP flags for detections in descending-confidence order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchOutcome {
    pub tp_flags: Vec<bool>,
    /// Confidences aligned with `tp_flags`.
    pub confidences: Vec<f64>,
    pub fn_count: usize,
}

impl MatchOutcome {
    pub fn true_positives(&self) -> usize {
        self.tp_flags.iter().filter(|&&t| t).count()
    }
}

/// Indices of `preds` by descending confidence, ties in input order.
fn confidence_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

pub fn match_detections(preds: &[Detection], gts: &[BBox], iou_threshold: f64) -> MatchOutcome {
    let mut matched = vec![false; gts.len()];
    let mut outcome = MatchOutcome::default();
    for idx in confidence_order(preds) {
        let det = &preds[idx];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let overlap = iou(&det.bbox, gt);
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
        }
        outcome.tp_flags.push(best.is_some());
        outcome.confidences.push(det.confidence);
    }
    outcome.fn_count = matched.iter().filter(|&&m| !m).count();
    outcome
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Cumulative precision/recall after each ranked detection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Cumulative true positives per point and the ground-truth total, kept so
    /// AP can be integrated without rounding.
    counts: Vec<u64>,
    total_gt: u64,
}

pub fn pr_curve(outcome: &MatchOutcome, total_gt: usize) -> Result<PrCurve, MetricsError> {
    if outcome.tp_flags.is_empty() {
        return Ok(PrCurve::default());
    }
    if total_gt == 0 {
        return Err(MetricsError::ZeroGroundTruth {
            predictions: outcome.tp_flags.len(),
        });
    }
    let mut tp = 0u64;
    let counts: Vec<u64> = outcome
        .tp_flags
        .iter()
        .map(|&is_tp| {
            tp += is_tp as u64;
            tp
        })
        .collect();
    let points = counts
        .iter()
        .enumerate()
        .map(|(i, &tp)| PrPoint {
            recall: tp as f64 / total_gt as f64,
            precision: tp as f64 / (i + 1) as f64,
        })
        .collect();
    Ok(PrCurve {
        points,
        counts,
        total_gt: total_gt as u64,
    })
}

/// Integrates the envelope in rationals; `None` on overflow.
fn exact_average_precision(counts: &[u64], total_gt: u64) -> Option<f64> {
    let mut sum = Ratio::<u64>::zero();
    let mut envelope = Ratio::<u64>::zero();
    for (i, &tp) in counts.iter().enumerate().rev() {
        envelope = envelope.max(Ratio::new(tp, i as u64 + 1));
        let prev = if i == 0 { 0 } else { counts[i - 1] };
        if tp > prev {
            sum = sum.checked_add(&envelope)?;
        }
    }
    sum.checked_div(&Ratio::from_integer(total_gt))?.to_f64()
}

/// Area under the precision envelope (max precision at any recall to the right).
///
/// Curves from [`pr_curve`] are integrated exactly and rounded once, so the
/// result is the nearest `f64` to the true area.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let pts = &curve.points;
    if pts.is_empty() {
        return 0.0;
    }
    if curve.counts.len() == pts.len() && curve.total_gt > 0 {
        if let Some(ap) = exact_average_precision(&curve.counts, curve.total_gt) {
            return ap;
        }
    }
    let mut envelope = vec![0.0; pts.len()];
    let mut running = 0.0f64;
    for i in (0..pts.len()).rev() {
        running = running.max(pts[i].precision);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (pt, &p) in pts.iter().zip(&envelope) {
        if pt.recall > prev_recall {
            ap += (pt.recall - prev_recall) * p;
            prev_recall = pt.recall;
        }
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouAp {
    pub iou_threshold: f64,
    pub ap: f64,
}

/// Predictions keyed by image id.
pub type Predictions = BTreeMap<String, Vec<Detection>>;

/// Single-class AP per IoU threshold, pooling detections over every image.
///
/// Labels are not consulted: every annotation is a ground truth and every
/// detection a candidate.
pub fn evaluate(
    dataset_gt: &Dataset,
    predictions: &Predictions,
    iou_thresholds: &[f64],
) -> Result<Vec<IouAp>, MetricsError> {
    let known: HashSet<&str> = dataset_gt.records().iter().map(|r| r.id()).collect();
    if let Some(unknown) = predictions.keys().find(|id| !known.contains(id.as_str())) {
        return Err(MetricsError::UnknownImageId(unknown.clone()));
    }
    let total_gt = dataset_gt.instance_count();
    let empty = Vec::new();

    iou_thresholds
        .iter()
        .map(|&threshold| {
            let mut pooled: Vec<(f64, bool)> = Vec::new();
            for record in dataset_gt.records() {
                let gts: Vec<BBox> = record.annotations().iter().map(|a| a.bbox).collect();
                let preds = predictions.get(record.id()).unwrap_or(&empty);
                let outcome = match_detections(preds, &gts, threshold);
                pooled.extend(outcome.confidences.into_iter().zip(outcome.tp_flags));
            }
            // stable: equal confidences keep image order, then in-image order
            pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
            let tp_flags: Vec<bool> = pooled.iter().map(|p| p.1).collect();
            let tp = tp_flags.iter().filter(|&&t| t).count();
            let outcome = MatchOutcome {
                confidences: pooled.iter().map(|p| p.0).collect(),
                fn_count: total_gt - tp,
                tp_flags,
            };
            let curve = pr_curve(&outcome, total_gt)?;
            Ok(IouAp {
                iou_threshold: threshold,
                ap: average_precision(&curve),
            })
        })
        .collect()
}

fn malformed(file: &Path, line: usize, reason: impl Into<String>) -> MetricsError {
    MetricsError::MalformedPrediction {
        file: file.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Reads `<image-id> <label> <confidence> <x_min> <y_min> <x_max> <y_max>` lines.
pub fn read_predictions(path: &Path) -> Result<Predictions, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Predictions::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 7 {
            return Err(malformed(
                path,
                line,
                format!("expected 7 fields, found {}", tokens.len()),
            ));
        }
        let mut nums = [0.0f64; 5];
        for (slot, tok) in nums.iter_mut().zip(&tokens[2..]) {
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(path, line, format!("not a finite number: {tok:?}")))?;
        }
        let [confidence, x0, y0, x1, y1] = nums;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(malformed(path, line, "confidence outside [0, 1]"));
        }
        let bbox = BBox::new(x0, y0, x1, y1).map_err(|e| malformed(path, line, e.to_string()))?;
        out.entry(tokens[0].to_owned())
            .or_default()
            .push(Detection::new(bbox, confidence, tokens[1]));
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, predictions: &Predictions) -> Result<(), MetricsError> {
    let io = |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    for (id, dets) in predictions {
        for d in dets {
            writeln!(
                file,
                "{} {} {} {} {} {} {}",
                id,
                d.label,
                d.confidence,
                d.bbox.x_min(),
                d.bbox.y_min(),
                d.bbox.x_max(),
                d.bbox.y_max()
            )
            .map_err(io)?;
        }
    }
    Ok(())
}
