//! Deterministic, model-free stand-ins for the generator and detector.
//!
//! The toy generator paints a vehicle sprite into the hole over a background
//! interpolated from the hole border, with opacity `quality` and additive noise
//! scaled by `1 - quality`. The toy detector correlates a bank of luma templates
//! with the image and maps correlation to confidence through a monotone
//! [`ScoreMap`].
//!
//! [`calibrate_score_map`] fits that map to the empirical distribution of the
//! generator's scores, so that with `Quality::Uniform` the calibrated score of a
//! fresh sample is close to uniform on `[0, 1]`.

use std::f64::consts::PI;

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ncc::{correlate, CompiledTemplate, LumaRaster};
use super::{
    score_generated, BackendError, DetectorBackend, DetectorCapabilities, GeneratorBackend, GeneratorCapabilities,
};
use crate::dataset::{BBox, Dataset};
use crate::metrics::{iou, Detection};
use crate::patch::{sample_clear_patch, GenerationResult, MaskedPatch, PatchError};
use crate::sprite::{render_vehicle, vehicle_template, VehicleSprite, DEFAULT_PALETTE};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("template bank is empty or every template is flat")]
    NoTemplates,
    #[error("templates must be square and share one size")]
    TemplateShape,
    #[error("score map knots must be finite, strictly increasing in x and non-decreasing in y within [0, 1]")]
    InvalidScoreMap,
    #[error("invalid detector parameter: {0}")]
    InvalidParameter(String),
    #[error("no clear patch could be sampled from the background set")]
    NoBackground,
    #[error("training set has no instances to build templates from")]
    NoInstances,
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Mixes a base seed with a per-request seed.
pub(crate) fn mix_seed(base: u64, request: u64) -> u64 {
    let mut z = base ^ request.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Fixed(f64),
    /// Drawn uniformly from `[0, 1)` for every sample.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGeneratorParams {
    pub quality: Quality,
    pub palette: Vec<[u8; 3]>,
    /// Noise standard deviation at quality 0.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ToyGeneratorParams {
    fn default() -> Self {
        Self {
            quality: Quality::Uniform,
            palette: DEFAULT_PALETTE.to_vec(),
            noise_sigma: 8.0,
            seed: 0,
        }
    }
}

impl ToyGeneratorParams {
    pub fn validate(&self) -> Result<(), ToyError> {
        if let Quality::Fixed(q) = self.quality {
            if !(0.0..=1.0).contains(&q) {
                return Err(ToyError::InvalidParameter(format!("quality {q} outside [0, 1]")));
            }
        }
        if self.palette.is_empty() {
            return Err(ToyError::InvalidParameter("empty palette".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(ToyError::InvalidParameter("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Inverse-distance blend of the four context pixels facing each hole pixel.
fn fill_background(out: &mut RgbImage, offset: u32, side: u32) {
    let (lo, hi) = (offset, offset + side);
    let src = out.clone();
    for y in lo..hi {
        for x in lo..hi {
            let faces = [
                (src.get_pixel(lo - 1, y), (x - lo + 1) as f64),
                (src.get_pixel(hi, y), (hi - x) as f64),
                (src.get_pixel(x, lo - 1), (y - lo + 1) as f64),
                (src.get_pixel(x, hi), (hi - y) as f64),
            ];
            let total: f64 = faces.iter().map(|(_, d)| 1.0 / d).sum();
            let mut px = [0u8; 3];
            for (c, slot) in px.iter_mut().enumerate() {
                let v: f64 = faces.iter().map(|(p, d)| p[c] as f64 / d).sum::<f64>() / total;
                *slot = v.round() as u8;
            }
            out.put_pixel(x, y, Rgb(px));
        }
    }
}

/// Fills the hole of `masked`; pixels outside the hole are copied unchanged.
pub fn toy_generate<R: Rng + ?Sized>(
    masked: &MaskedPatch,
    params: &ToyGeneratorParams,
    rng: &mut R,
) -> GenerationResult {
    let size = masked.size();
    let (offset, side) = masked.hole_span();
    let mut out = masked.masked_pixels().clone();
    fill_background(&mut out, offset, side);

    let quality = match params.quality {
        Quality::Fixed(q) => q,
        Quality::Uniform => rng.random::<f64>(),
    };
    let centre = size as f64 / 2.0;
    let jitter = side as f64 / 16.0;
    let sprite = VehicleSprite {
        center: (
            centre + rng.random_range(-jitter..=jitter),
            centre + rng.random_range(-jitter..=jitter),
        ),
        side: side as f64,
        angle: rng.random_range(0.0..PI),
        color: params.palette[rng.random_range(0..params.palette.len())],
        length_scale: rng.random_range(0.9..=1.0),
    };
    let clip = (offset, offset, offset + side, offset + side);
    render_vehicle(&mut out, &sprite, quality, clip);

    let sigma = (1.0 - quality) * params.noise_sigma;
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        for y in offset..offset + side {
            for x in offset..offset + side {
                let px = out.get_pixel_mut(x, y);
                for c in 0..3 {
                    let v = px[c] as f64 + noise.sample(rng);
                    px[c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    GenerationResult::from_completed(out, size).expect("output keeps the patch geometry")
}

#[derive(Debug, Clone)]
pub struct ToyGenerator {
    params: ToyGeneratorParams,
}

impl ToyGenerator {
    pub fn new(params: ToyGeneratorParams) -> Result<Self, ToyError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &ToyGeneratorParams {
        &self.params
    }
}

impl GeneratorBackend for ToyGenerator {
    fn capabilities(&self) -> GeneratorCapabilities {
        GeneratorCapabilities {
            patch_size: None,
            deterministic: true,
        }
    }

    fn fill(&mut self, masked: &MaskedPatch, seed: u64) -> Result<GenerationResult, BackendError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.params.seed, seed));
        Ok(toy_generate(masked, &self.params, &mut rng))
    }
}

/// Monotone piecewise-linear map from correlation to confidence, constant
/// beyond the first and last knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct ScoreMap {
    knots: Vec<(f64, f64)>,
}

impl TryFrom<Vec<(f64, f64)>> for ScoreMap {
    type Error = ToyError;

    fn try_from(knots: Vec<(f64, f64)>) -> Result<Self, Self::Error> {
        ScoreMap::new(knots)
    }
}

impl From<ScoreMap> for Vec<(f64, f64)> {
    fn from(map: ScoreMap) -> Self {
        map.knots
    }
}

impl ScoreMap {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, ToyError> {
        if knots.is_empty() {
            return Err(ToyError::InvalidScoreMap);
        }
        let finite = knots.iter().all(|(x, y)| x.is_finite() && (0.0..=1.0).contains(y));
        let monotone = knots.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 >= w[0].1);
        if !finite || !monotone {
            return Err(ToyError::InvalidScoreMap);
        }
        Ok(Self { knots })
    }

    /// Linear rescale of correlation `[-1, 1]` onto `[0, 1]`.
    pub fn linear() -> Self {
        Self {
            knots: vec![(-1.0, 0.0), (1.0, 1.0)],
        }
    }

    /// Plotting-position CDF of `samples`: the i-th smallest of n maps to
    /// `(i + 1) / (n + 1)`, and perfect correlation maps to 1.
    pub fn from_samples(samples: &[f64]) -> Result<Self, ToyError> {
        let mut sorted: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            return Err(ToyError::InvalidScoreMap);
        }
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mut knots: Vec<(f64, f64)> = Vec::with_capacity(sorted.len() + 1);
        for (i, x) in sorted.into_iter().enumerate() {
            let p = (i + 1) as f64 / (n + 1.0);
            match knots.last_mut() {
                Some(last) if last.0 == x => last.1 = p,
                _ => knots.push((x, p)),
            }
        }
        if knots.last().is_some_and(|k| k.0 < 1.0) {
            knots.push((1.0, 1.0));
        }
        Self::new(knots)
    }

    /// Logistic curve sampled on `[-1, 1]`.
    pub fn logistic(midpoint: f64, scale: f64) -> Result<Self, ToyError> {
        if !(scale > 0.0 && midpoint.is_finite()) {
            return Err(ToyError::InvalidScoreMap);
        }
        let knots = (0..=200)
            .map(|i| {
                let x = -1.0 + i as f64 / 100.0;
                (x, 1.0 / (1.0 + (-(x - midpoint) / scale).exp()))
            })
            .collect();
        Self::new(knots)
    }

    pub fn apply(&self, x: f64) -> f64 {
        let k = &self.knots;
        let first = k[0];
        let last = k[k.len() - 1];
        if x <= first.0 {
            return first.1;
        }
        if x >= last.0 {
            return last.1;
        }
        let hi = k.partition_point(|p| p.0 <= x);
        let (x0, y0) = k[hi - 1];
        let (x1, y1) = k[hi];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }
}

/// Square luma template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub size: u32,
    pub pixels: Vec<u8>,
}

impl Template {
    pub fn from_rgb(img: &RgbImage) -> Result<Self, ToyError> {
        if img.width() != img.height() {
            return Err(ToyError::TemplateShape);
        }
        let raster = LumaRaster::from_rgb(img);
        Ok(Self {
            size: img.width(),
            pixels: raster.data.iter().map(|v| v.round() as u8).collect(),
        })
    }
}

/// Light vehicles on flat ground at four headings.
pub fn default_template_bank(side: u32) -> Vec<Template> {
    (0..4)
        .map(|k| Template {
            size: side,
            pixels: vehicle_template(side, k as f64 * PI / 4.0),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetectorParams {
    pub templates: Vec<Template>,
    pub score_map: ScoreMap,
    /// Minimum mapped confidence for a window to become a detection.
    pub detection_threshold: f64,
    /// Grid step of the sliding window, in pixels.
    pub stride: u32,
    /// Windows overlapping a stronger detection above this IoU are suppressed.
    pub nms_iou: f64,
    pub max_detections: usize,
    pub label: String,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl ToyDetectorParams {
    /// Uncalibrated acceptance detector for `patch_size` patches: templates as
    /// large as the hole, a grid that contains the hole position, every window
    /// reported.
    pub fn for_patches(patch_size: u32) -> Self {
        let side = patch_size / 2;
        Self {
            templates: default_template_bank(side),
            score_map: ScoreMap::linear(),
            detection_threshold: 0.0,
            stride: gcd(8, (patch_size / 4).max(1)),
            nms_iou: 0.45,
            max_detections: 100,
            label: "car".into(),
        }
    }

    pub fn template_size(&self) -> Option<u32> {
        self.templates.first().map(|t| t.size)
    }

    pub fn with_score_map(mut self, score_map: ScoreMap) -> Self {
        self.score_map = score_map;
        self
    }
}

pub struct ToyDetector {
    params: ToyDetectorParams,
    compiled: Vec<CompiledTemplate>,
}

impl ToyDetector {
    pub fn new(params: ToyDetectorParams) -> Result<Self, ToyError> {
        let size = params.template_size().ok_or(ToyError::NoTemplates)?;
        if params
            .templates
            .iter()
            .any(|t| t.size != size || t.pixels.len() != (size * size) as usize)
        {
            return Err(ToyError::TemplateShape);
        }
        if params.stride == 0 {
            return Err(ToyError::InvalidParameter("stride must be positive".into()));
        }
        if !(params.nms_iou > 0.0 && params.nms_iou <= 1.0) {
            return Err(ToyError::InvalidParameter("nms_iou must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&params.detection_threshold) {
            return Err(ToyError::InvalidParameter(
                "detection_threshold must be in [0, 1]".into(),
            ));
        }
        let compiled: Vec<CompiledTemplate> = params
            .templates
            .iter()
            .filter_map(|t| CompiledTemplate::new(t.size, &t.pixels))
            .collect();
        if compiled.is_empty() {
            return Err(ToyError::NoTemplates);
        }
        Ok(Self { params, compiled })
    }

    pub fn params(&self) -> &ToyDetectorParams {
        &self.params
    }

    pub fn detect_image(&self, image: &RgbImage) -> Vec<Detection> {
        let raster = LumaRaster::from_rgb(image);
        let side = self.compiled[0].size;
        let mut scored: Vec<(f64, f64, BBox)> = correlate(&raster, &self.compiled, self.params.stride)
            .into_iter()
            .map(|c| {
                let bbox = BBox::square(c.x, c.y, side).expect("template side is positive");
                (self.params.score_map.apply(c.ncc), c.ncc, bbox)
            })
            .filter(|(conf, _, _)| *conf >= self.params.detection_threshold)
            .collect();
        // raw correlation breaks ties left by flat stretches of the map
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));

        let mut kept: Vec<Detection> = Vec::new();
        for (conf, _, bbox) in scored {
            if kept.len() >= self.params.max_detections {
                break;
            }
            if kept.iter().all(|d| iou(&d.bbox, &bbox) <= self.params.nms_iou) {
                kept.push(Detection::new(bbox, conf, self.params.label.clone()));
            }
        }
        kept
    }
}

impl DetectorBackend for ToyDetector {
    fn capabilities(&self) -> DetectorCapabilities {
        DetectorCapabilities {
            min_input: self.compiled[0].size,
        }
    }

    fn detect(&mut self, image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        Ok(self.detect_image(image))
    }
}

pub fn toy_detect(image: &RgbImage, params: &ToyDetectorParams) -> Result<Vec<Detection>, ToyError> {
    Ok(ToyDetector::new(params.clone())?.detect_image(image))
}

/// Fits `detector`'s score map to the generator's output distribution.
///
/// Draws `n_samples` clear patches from `backgrounds`, generates into each,
/// records the hole score under a linear map, and returns the plotting-position
/// CDF of those correlations.
pub fn calibrate_score_map(
    generator: &ToyGeneratorParams,
    detector: &ToyDetectorParams,
    backgrounds: &Dataset,
    patch_size: u32,
    n_samples: usize,
    seed: u64,
) -> Result<ScoreMap, ToyError> {
    let raw = ToyDetectorParams {
        score_map: ScoreMap::linear(),
        detection_threshold: 0.0,
        ..detector.clone()
    };
    let mut raw = ToyDetector::new(raw)?;
    let mut gen = ToyGenerator::new(generator.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let masked = sample_clear_patch(backgrounds, patch_size, &mut rng, 1000)?.ok_or(ToyError::NoBackground)?;
        let result = gen.fill(&masked, rng.random())?;
        let linear = score_generated(&mut raw, &result, &masked)?;
        samples.push(2.0 * linear - 1.0);
    }
    ScoreMap::from_samples(&samples)
}

/// Knobs for [`train_toy_detector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub template_size: u32,
    pub max_templates: usize,
    pub stride: u32,
    pub negatives: usize,
    pub detection_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            template_size: 48,
            max_templates: 8,
            stride: 4,
            negatives: 200,
            detection_threshold: 0.05,
            nms_iou: 0.45,
            max_detections: 100,
        }
    }
}

fn centred_crop(img: &RgbImage, bbox: &BBox, side: u32) -> Option<RgbImage> {
    if img.width() < side || img.height() < side {
        return None;
    }
    let (cx, cy) = bbox.center();
    let half = side as f64 / 2.0;
    let x = (cx - half).round().clamp(0.0, (img.width() - side) as f64) as u32;
    let y = (cy - half).round().clamp(0.0, (img.height() - side) as f64) as u32;
    Some(imageops::crop_imm(img, x, y, side, side).to_image())
}

fn best_correlation(window: &RgbImage, compiled: &[CompiledTemplate]) -> Option<f64> {
    correlate(&LumaRaster::from_rgb(window), compiled, 1)
        .first()
        .map(|c| c.ncc)
}

fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let idx = ((values.len() - 1) as f64 * q).round() as usize;
    values[idx]
}

/// "Trains" an evaluation detector on a dataset: templates are crops around
/// evenly spaced instances, and the score map is a logistic curve placed
/// between instance and background correlation levels.
pub fn train_toy_detector(train: &Dataset, opts: &TrainOptions, seed: u64) -> Result<ToyDetectorParams, ToyError> {
    let side = opts.template_size;
    let instances: Vec<(&RgbImage, BBox)> = train
        .records()
        .iter()
        .flat_map(|r| r.annotations().iter().map(move |a| (r.image(), a.bbox)))
        .collect();
    if instances.is_empty() {
        return Err(ToyError::NoInstances);
    }
    let k = opts.max_templates.min(instances.len()).max(1);
    let mut templates = Vec::with_capacity(k);
    for i in 0..k {
        let (img, bbox) = instances[i * instances.len() / k];
        if let Some(crop) = centred_crop(img, &bbox, side) {
            templates.push(Template::from_rgb(&crop)?);
        }
    }
    let compiled: Vec<CompiledTemplate> = templates
        .iter()
        .filter_map(|t| CompiledTemplate::new(t.size, &t.pixels))
        .collect();
    if compiled.is_empty() {
        return Err(ToyError::NoTemplates);
    }

    let mut positives: Vec<f64> = instances
        .iter()
        .filter_map(|(img, bbox)| centred_crop(img, bbox, side))
        .filter_map(|w| best_correlation(&w, &compiled))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut negatives = Vec::with_capacity(opts.negatives);
    let eligible: Vec<_> = train
        .records()
        .iter()
        .filter(|r| r.width() >= side && r.height() >= side)
        .collect();
    let mut draws = 0;
    while negatives.len() < opts.negatives && draws < opts.negatives * 20 && !eligible.is_empty() {
        draws += 1;
        let r = eligible[rng.random_range(0..eligible.len())];
        let x = rng.random_range(0..=r.width() - side);
        let y = rng.random_range(0..=r.height() - side);
        let window = BBox::square(x, y, side).expect("side is positive");
        if r.annotations().iter().any(|a| window.intersects(&a.bbox)) {
            continue;
        }
        let crop = imageops::crop_imm(r.image(), x, y, side, side).to_image();
        if let Some(v) = best_correlation(&crop, &compiled) {
            negatives.push(v);
        }
    }

    let pos_mid = if positives.is_empty() {
        0.8
    } else {
        quantile(&mut positives, 0.5)
    };
    let neg_high = if negatives.is_empty() {
        0.2
    } else {
        quantile(&mut negatives, 0.95)
    };
    let (midpoint, scale) = if pos_mid > neg_high {
        ((pos_mid + neg_high) / 2.0, ((pos_mid - neg_high) / 4.0).max(0.02))
    } else {
        (neg_high, 0.05)
    };
    log::debug!(
        "toy detector: {} templates, positive median {pos_mid:.3}, negative q95 {neg_high:.3}",
        templates.len()
    );

    Ok(ToyDetectorParams {
        templates,
        score_map: ScoreMap::logistic(midpoint, scale)?,
        detection_threshold: opts.detection_threshold,
        stride: opts.stride,
        nms_iou: opts.nms_iou,
        max_detections: opts.max_detections,
        label: "car".into(),
    })
}
