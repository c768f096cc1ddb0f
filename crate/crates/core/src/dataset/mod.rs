//! Annotated image datasets: boxes, records, splits and persistence.
//!
//! Boxes use a half-open float pixel convention, `[x_min, x_max) x [y_min, y_max)`,
//! so two boxes that share an edge have zero intersection area.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

mod format;

pub use format::{load_dataset, save_dataset, Format};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("box coordinates must be finite")]
    NonFinite,
    #[error("box has non-positive area: ({0}, {1}, {2}, {3})")]
    Degenerate(f64, f64, f64, f64),
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = BoxError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BBox::new(raw.x_min, raw.y_min, raw.x_max, raw.y_max)
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, BoxError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(BoxError::NonFinite);
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(BoxError::Degenerate(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Square box from an integer origin and side length.
    pub fn square(x: u32, y: u32, side: u32) -> Result<Self, BoxError> {
        Self::new(x as f64, y as f64, x as f64 + side as f64, y as f64 + side as f64)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Area of the overlap with `other`; zero for disjoint or edge-touching boxes.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.intersection_area(other) > 0.0
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Clip to `[0, width) x [0, height)`; `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width),
            self.y_max.min(height),
        )
        .ok()
    }

    /// True when the box lies inside a `width x height` raster.
    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width as f64 && self.y_max <= height as f64
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// Where an instance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Synthetic,
}

impl Provenance {
    pub fn as_token(self) -> &'static str {
        match self {
            Provenance::Original => "orig",
            Provenance::Synthetic => "synth",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "orig" => Some(Provenance::Original),
            "synth" => Some(Provenance::Synthetic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub label: String,
    pub provenance: Provenance,
}

impl Annotation {
    pub fn new(bbox: BBox, label: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            bbox,
            label: label.into(),
            provenance,
        }
    }

    pub fn original(bbox: BBox, label: impl Into<String>) -> Self {
        Self::new(bbox, label, Provenance::Original)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing annotation file {0}")]
    MissingAnnotation(PathBuf),
    #[error("malformed annotation at {file}:{line}: {reason}")]
    MalformedAnnotation { file: PathBuf, line: usize, reason: String },
    #[error("unreadable image {file}: {source}")]
    UnreadableImage {
        file: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("box at {file}:{line} extends outside the image")]
    OutOfBoundsBox { file: PathBuf, line: usize },
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid split: n_train={n_train} with {total} records")]
    InvalidSplit { n_train: usize, total: usize },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("invalid record id {0:?}")]
    InvalidId(String),
    #[error("invalid label {0:?}")]
    InvalidLabel(String),
    #[error("label {0:?} is not in the dataset label set")]
    UnknownLabel(String),
    #[error("record {id:?}: box {bbox} lies outside the {width}x{height} image")]
    BoxOutsideImage {
        id: String,
        bbox: BBox,
        width: u32,
        height: u32,
    },
    #[error("record {id:?}: replacement image is {got:?}, expected {expected:?}")]
    ImageSizeMismatch {
        id: String,
        expected: (u32, u32),
        got: (u32, u32),
    },
}

fn valid_label(label: &str) -> bool {
    !label.is_empty() && !label.chars().any(char::is_whitespace)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "classes"
        && !id.starts_with('.')
        && !id.chars().any(|c| c == '/' || c == '\\' || c.is_whitespace())
}

/// One image and its annotations. Pixels are shared, so cloning is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    id: String,
    image: Arc<RgbImage>,
    annotations: Vec<Annotation>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, image: RgbImage, annotations: Vec<Annotation>) -> Result<Self, DatasetError> {
        Self::from_shared(id.into(), Arc::new(image), annotations)
    }

    fn from_shared(id: String, image: Arc<RgbImage>, annotations: Vec<Annotation>) -> Result<Self, DatasetError> {
        if !valid_id(&id) {
            return Err(DatasetError::InvalidId(id));
        }
        let (width, height) = image.dimensions();
        for ann in &annotations {
            if !valid_label(&ann.label) {
                return Err(DatasetError::InvalidLabel(ann.label.clone()));
            }
            if !ann.bbox.fits_within(width, height) {
                return Err(DatasetError::BoxOutsideImage {
                    id,
                    bbox: ann.bbox,
                    width,
                    height,
                });
            }
        }
        Ok(Self { id, image, annotations })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn with_annotations(&self, annotations: Vec<Annotation>) -> Result<Self, DatasetError> {
        Self::from_shared(self.id.clone(), Arc::clone(&self.image), annotations)
    }

    pub fn with_annotation(&self, annotation: Annotation) -> Result<Self, DatasetError> {
        let mut annotations = self.annotations.clone();
        annotations.push(annotation);
        self.with_annotations(annotations)
    }

    /// Same record with new pixels of identical dimensions.
    pub fn with_image(&self, image: RgbImage) -> Result<Self, DatasetError> {
        if image.dimensions() != self.image.dimensions() {
            return Err(DatasetError::ImageSizeMismatch {
                id: self.id.clone(),
                expected: self.image.dimensions(),
                got: image.dimensions(),
            });
        }
        Ok(Self {
            id: self.id.clone(),
            image: Arc::new(image),
            annotations: self.annotations.clone(),
        })
    }
}

/// Ordered records plus the set of class labels they may use.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<ImageRecord>,
    label_set: BTreeSet<String>,
}

impl Dataset {
    pub fn new(records: Vec<ImageRecord>, label_set: BTreeSet<String>) -> Result<Self, DatasetError> {
        if let Some(bad) = label_set.iter().find(|l| !valid_label(l)) {
            return Err(DatasetError::InvalidLabel(bad.clone()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for record in &records {
            if !seen.insert(record.id.as_str()) {
                return Err(DatasetError::DuplicateId(record.id.clone()));
            }
            for ann in &record.annotations {
                if !label_set.contains(&ann.label) {
                    return Err(DatasetError::UnknownLabel(ann.label.clone()));
                }
            }
        }
        Ok(Self { records, label_set })
    }

    /// Builds a dataset whose label set is exactly the labels in use.
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self, DatasetError> {
        let label_set = records
            .iter()
            .flat_map(|r| r.annotations.iter().map(|a| a.label.clone()))
            .collect();
        Self::new(records, label_set)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn label_set(&self) -> &BTreeSet<String> {
        &self.label_set
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn instance_count(&self) -> usize {
        self.records.iter().map(|r| r.annotations.len()).sum()
    }

    /// The first `n` records (or all of them), keeping the label set.
    pub fn prefix(&self, n: usize) -> Dataset {
        Dataset {
            records: self.records.iter().take(n).cloned().collect(),
            label_set: self.label_set.clone(),
        }
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }
}

/// Seeded random partition into `(train, test)` with `n_train` training records.
pub fn split_dataset(dataset: &Dataset, n_train: usize, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
    let total = dataset.len();
    if n_train == 0 || n_train >= total {
        return Err(DatasetError::InvalidSplit { n_train, total });
    }
    let order = shuffled_indices(total, seed);
    let pick = |idx: &[usize]| Dataset {
        records: idx.iter().map(|&i| dataset.records[i].clone()).collect(),
        label_set: dataset.label_set.clone(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// The dataset's records in a seed-determined order.
pub fn shuffle_dataset(dataset: &Dataset, seed: u64) -> Dataset {
    let order = shuffled_indices(dataset.len(), seed);
    Dataset {
        records: order.iter().map(|&i| dataset.records[i].clone()).collect(),
        label_set: dataset.label_set.clone(),
    }
}

pub(crate) fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

/// Drops every annotation wider or taller than `max_side`; images are kept.
pub fn filter_oversized(dataset: &Dataset, max_side: f64) -> (Dataset, usize) {
    let mut removed = 0;
    let records = dataset
        .records
        .iter()
        .map(|record| {
            let kept: Vec<Annotation> = record
                .annotations
                .iter()
                .filter(|a| a.bbox.width() <= max_side && a.bbox.height() <= max_side)
                .cloned()
                .collect();
            removed += record.annotations.len() - kept.len();
            ImageRecord {
                id: record.id.clone(),
                image: Arc::clone(&record.image),
                annotations: kept,
            }
        })
        .collect();
    (
        Dataset {
            records,
            label_set: dataset.label_set.clone(),
        },
        removed,
    )
}
