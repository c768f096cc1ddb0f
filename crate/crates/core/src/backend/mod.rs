//! Generator and detector backends.
//!
//! A generator fills the hole of a [`MaskedPatch`]; a detector finds vehicles in
//! a raster. Built-in toy implementations live in [`toy`]; external processes
//! speaking the line-delimited JSON protocol are driven through [`protocol`].

use std::time::Duration;

use image::RgbImage;
use thiserror::Error;

use crate::metrics::{iou, Detection};
use crate::patch::{GenerationResult, MaskedPatch, PatchError};

mod ncc;
pub mod protocol;
pub mod toy;

/// Minimum IoU between a detection and the hole for the detection to count as
/// the generated instance.
pub const HOLE_IOU_GATE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("failed to spawn backend {command:?}: {source}")]
    SpawnFailure {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("handshake mismatch: {0}")]
    HandshakeMismatch(String),
    #[error("backend exited: {0}")]
    BackendCrashed(String),
    #[error("no response within {0:?}")]
    ResponseTimeout(Duration),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("backend reported an error: {0}")]
    Remote(String),
    #[error("invalid backend output: {0}")]
    InvalidOutput(String),
    #[error(transparent)]
    Patch(#[from] PatchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorCapabilities {
    /// `None` means any multiple of 4 is accepted.
    pub patch_size: Option<u32>,
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorCapabilities {
    /// Smallest raster side the detector can process.
    pub min_input: u32,
}

pub trait GeneratorBackend {
    fn capabilities(&self) -> GeneratorCapabilities;

    /// Completes `masked`. `seed` lets stochastic generators replay a draw;
    /// backends without a notion of seed ignore it.
    fn fill(&mut self, masked: &MaskedPatch, seed: u64) -> Result<GenerationResult, BackendError>;
}

pub trait DetectorBackend {
    fn capabilities(&self) -> DetectorCapabilities;

    fn detect(&mut self, image: &RgbImage) -> Result<Vec<Detection>, BackendError>;
}

impl<T: GeneratorBackend + ?Sized> GeneratorBackend for Box<T> {
    fn capabilities(&self) -> GeneratorCapabilities {
        (**self).capabilities()
    }

    fn fill(&mut self, masked: &MaskedPatch, seed: u64) -> Result<GenerationResult, BackendError> {
        (**self).fill(masked, seed)
    }
}

impl<T: DetectorBackend + ?Sized> DetectorBackend for Box<T> {
    fn capabilities(&self) -> DetectorCapabilities {
        (**self).capabilities()
    }

    fn detect(&mut self, image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        (**self).detect(image)
    }
}

impl<T: GeneratorBackend + ?Sized> GeneratorBackend for &mut T {
    fn capabilities(&self) -> GeneratorCapabilities {
        (**self).capabilities()
    }

    fn fill(&mut self, masked: &MaskedPatch, seed: u64) -> Result<GenerationResult, BackendError> {
        (**self).fill(masked, seed)
    }
}

impl<T: DetectorBackend + ?Sized> DetectorBackend for &mut T {
    fn capabilities(&self) -> DetectorCapabilities {
        (**self).capabilities()
    }

    fn detect(&mut self, image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        (**self).detect(image)
    }
}

pub type BoxedGenerator = Box<dyn GeneratorBackend + Send>;
pub type BoxedDetector = Box<dyn DetectorBackend + Send>;

/// Detector confidence for the generated instance: the highest confidence among
/// detections on the completed patch whose IoU with the hole is at least
/// [`HOLE_IOU_GATE`], or 0.0 when none qualifies.
pub fn score_generated<D: DetectorBackend + ?Sized>(
    detector: &mut D,
    result: &GenerationResult,
    masked: &MaskedPatch,
) -> Result<f64, BackendError> {
    let (w, h) = result.completed().dimensions();
    if (w, h) != (masked.size(), masked.size()) {
        return Err(BackendError::InvalidOutput(format!(
            "completed patch is {w}x{h}, expected {0}x{0}",
            masked.size()
        )));
    }
    let hole = masked.hole();
    let detections = detector.detect(result.completed())?;
    Ok(detections
        .iter()
        .filter(|d| iou(&d.bbox, &hole) >= HOLE_IOU_GATE)
        .map(|d| d.confidence)
        .fold(0.0, f64::max))
}

/// Checks the detector contract: confidences in `[0, 1]` and boxes inside the raster.
pub fn validate_detections(detections: &[Detection], width: u32, height: u32) -> Result<(), BackendError> {
    for d in detections {
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(BackendError::InvalidOutput(format!(
                "confidence {} outside [0, 1]",
                d.confidence
            )));
        }
        if !d.bbox.fits_within(width, height) {
            return Err(BackendError::InvalidOutput(format!(
                "box {} outside the {width}x{height} image",
                d.bbox
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BBox, ImageRecord};
    use crate::patch::{mask_center, Patch};

    struct Fixed(Vec<Detection>);

    impl DetectorBackend for Fixed {
        fn capabilities(&self) -> DetectorCapabilities {
            DetectorCapabilities { min_input: 1 }
        }

        fn detect(&mut self, _image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
            Ok(self.0.clone())
        }
    }

    fn fixture() -> (MaskedPatch, GenerationResult) {
        let img = ImageRecord::new("a", RgbImage::new(96, 96), vec![]).unwrap();
        let masked = mask_center(&Patch::extract(&img, (0, 0), 96).unwrap());
        let result = GenerationResult::from_completed(RgbImage::new(96, 96), 96).unwrap();
        (masked, result)
    }

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, c: f64) -> Detection {
        Detection::new(BBox::new(x0, y0, x1, y1).unwrap(), c, "car")
    }

    #[test]
    fn no_detections_scores_zero() {
        let (masked, result) = fixture();
        assert_eq!(score_generated(&mut Fixed(vec![]), &result, &masked).unwrap(), 0.0);
    }

    #[test]
    fn detection_on_hole_scores_its_confidence() {
        let (masked, result) = fixture();
        let mut d = Fixed(vec![det(24.0, 24.0, 72.0, 72.0, 0.8)]);
        assert_eq!(score_generated(&mut d, &result, &masked).unwrap(), 0.8);
    }

    #[test]
    fn far_detection_is_ignored() {
        // (0,0,20,20) touches the hole (24..72) nowhere: IoU 0
        // (48,48,96,96) overlaps 24x24=576 of union 2*2304-576 → IoU 1/7 < 0.25
        let (masked, result) = fixture();
        let mut d = Fixed(vec![det(0.0, 0.0, 20.0, 20.0, 0.99), det(48.0, 48.0, 96.0, 96.0, 0.95)]);
        assert_eq!(score_generated(&mut d, &result, &masked).unwrap(), 0.0);
    }

    #[test]
    fn best_qualifying_detection_wins() {
        // shift by 8: overlap 40x40=1600, union 3008 → IoU 0.53
        let (masked, result) = fixture();
        let mut d = Fixed(vec![
            det(24.0, 24.0, 72.0, 72.0, 0.4),
            det(32.0, 32.0, 80.0, 80.0, 0.7),
            det(0.0, 0.0, 10.0, 10.0, 0.9),
        ]);
        assert_eq!(score_generated(&mut d, &result, &masked).unwrap(), 0.7);
    }

    #[test]
    fn validate_detections_flags_contract_breaks() {
        assert!(validate_detections(&[det(0.0, 0.0, 10.0, 10.0, 1.2)], 20, 20).is_err());
        assert!(validate_detections(&[det(15.0, 0.0, 25.0, 10.0, 0.5)], 20, 20).is_err());
        assert!(validate_detections(&[det(0.0, 0.0, 20.0, 20.0, 0.5)], 20, 20).is_ok());
    }
}
