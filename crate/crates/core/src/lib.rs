//! Generative instance augmentation for aerial vehicle detection datasets.
//!
//! Instances are added to training images by masking the centre of a random
//! patch, letting a generator fill it, and keeping the result only when a
//! detector recognises a vehicle in the hole with enough confidence. The crate
//! covers dataset I/O, patch geometry, detection metrics, backend interfaces
//! (built-in toy backends and an external-process protocol), the augmentation
//! loop, and the experiment sweeps built on top of it.

pub mod backend;
pub mod dataset;
pub mod engine;
pub mod harness;
pub mod metrics;
pub mod patch;
pub mod sprite;
pub mod synth;

pub use dataset::{Annotation, BBox, Dataset, ImageRecord, Provenance};
pub use engine::{augment_dataset, AugmentationConfig, AugmentationRun, AugmentationStats, RunStatus};
pub use metrics::{evaluate, iou, Detection};
