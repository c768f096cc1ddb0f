//! Square patches cut from dataset images, central hole masking, and
//! compositing generated hole content back into the parent image.

use image::{imageops, GrayImage, Luma, RgbImage};
use rand::Rng;
use thiserror::Error;

use crate::dataset::{Annotation, BBox, ImageRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("patch size {0} must be a positive multiple of 4")]
    InvalidPatchSize(u32),
    #[error("image {width}x{height} is smaller than patch size {patch_size}")]
    ImageTooSmall { width: u32, height: u32, patch_size: u32 },
    #[error("instance {width}x{height} exceeds half the patch size ({limit})")]
    InstanceTooLarge { width: f64, height: f64, limit: f64 },
    #[error("patch at ({x}, {y}) of size {size} leaves the {width}x{height} image")]
    OutOfBounds {
        x: u32,
        y: u32,
        size: u32,
        width: u32,
        height: u32,
    },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
}

pub fn check_patch_size(size: u32) -> Result<(), PatchError> {
    if size == 0 || !size.is_multiple_of(4) {
        Err(PatchError::InvalidPatchSize(size))
    } else {
        Ok(())
    }
}

fn check_fits(image: &ImageRecord, size: u32) -> Result<(), PatchError> {
    if image.width() < size || image.height() < size {
        return Err(PatchError::ImageTooSmall {
            width: image.width(),
            height: image.height(),
            patch_size: size,
        });
    }
    Ok(())
}

/// A `size x size` crop of a parent image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    origin: (u32, u32),
    size: u32,
    pixels: RgbImage,
    parent_id: String,
    instance: Option<BBox>,
}

impl Patch {
    /// Crops the patch whose top-left corner is `origin`.
    pub fn extract(image: &ImageRecord, origin: (u32, u32), size: u32) -> Result<Self, PatchError> {
        check_patch_size(size)?;
        check_fits(image, size)?;
        let (x, y) = origin;
        if x + size > image.width() || y + size > image.height() {
            return Err(PatchError::OutOfBounds {
                x,
                y,
                size,
                width: image.width(),
                height: image.height(),
            });
        }
        Ok(Self {
            origin,
            size,
            pixels: imageops::crop_imm(image.image(), x, y, size, size).to_image(),
            parent_id: image.id().to_owned(),
            instance: None,
        })
    }

    /// A patch that is not attached to a dataset image, e.g. one received over
    /// the backend protocol.
    pub fn detached(pixels: RgbImage) -> Result<Self, PatchError> {
        let (w, h) = pixels.dimensions();
        if w != h {
            return Err(PatchError::GeometryMismatch(format!(
                "patch raster must be square, got {w}x{h}"
            )));
        }
        check_patch_size(w)?;
        Ok(Self {
            origin: (0, 0),
            size: w,
            pixels,
            parent_id: String::new(),
            instance: None,
        })
    }

    pub fn origin(&self) -> (u32, u32) {
        self.origin
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn parent_id(&self) -> &str {
        &self.parent_id
    }

    /// The harvested instance in patch-local coordinates, if any.
    pub fn instance(&self) -> Option<&BBox> {
        self.instance.as_ref()
    }

    /// Patch-local rectangle covering the whole patch.
    pub fn local_rect(&self) -> BBox {
        BBox::square(0, 0, self.size).expect("patch size is positive")
    }

    /// Patch extent in parent-image coordinates.
    pub fn global_rect(&self) -> BBox {
        BBox::square(self.origin.0, self.origin.1, self.size).expect("patch size is positive")
    }
}

/// Cuts a patch centred on `annotation`, shifted as needed to stay inside the image.
pub fn harvest_instance_patch(
    image: &ImageRecord,
    annotation: &Annotation,
    patch_size: u32,
) -> Result<Patch, PatchError> {
    check_patch_size(patch_size)?;
    let limit = patch_size as f64 / 2.0;
    let bbox = annotation.bbox;
    if bbox.width() > limit || bbox.height() > limit {
        return Err(PatchError::InstanceTooLarge {
            width: bbox.width(),
            height: bbox.height(),
            limit,
        });
    }
    check_fits(image, patch_size)?;
    let (cx, cy) = bbox.center();
    let half = patch_size as f64 / 2.0;
    let clamp = |c: f64, extent: u32| -> u32 {
        let max = (extent - patch_size) as f64;
        (c - half).floor().clamp(0.0, max) as u32
    };
    let origin = (clamp(cx, image.width()), clamp(cy, image.height()));
    let mut patch = Patch::extract(image, origin, patch_size)?;
    patch.instance = Some(bbox.translate(-(origin.0 as f64), -(origin.1 as f64)));
    Ok(patch)
}

/// Uniform random top-left corner for a `patch_size` patch inside `image`.
pub fn sample_patch_origin<R: Rng + ?Sized>(
    image: &ImageRecord,
    patch_size: u32,
    rng: &mut R,
) -> Result<(u32, u32), PatchError> {
    check_fits(image, patch_size)?;
    let x = rng.random_range(0..=image.width() - patch_size);
    let y = rng.random_range(0..=image.height() - patch_size);
    Ok((x, y))
}

/// A patch with its central `size/2 x size/2` square blanked out.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPatch {
    base: Patch,
    hole: BBox,
    mask: GrayImage,
    masked: RgbImage,
}

impl MaskedPatch {
    /// The untouched patch the hole was cut from.
    pub fn base(&self) -> &Patch {
        &self.base
    }

    /// Hole rectangle in patch-local coordinates.
    pub fn hole(&self) -> BBox {
        self.hole
    }

    /// 255 inside the hole, 0 elsewhere.
    pub fn mask(&self) -> &GrayImage {
        &self.mask
    }

    /// The patch pixels with the hole zeroed; this is what a generator sees.
    pub fn masked_pixels(&self) -> &RgbImage {
        &self.masked
    }

    pub fn size(&self) -> u32 {
        self.base.size
    }

    /// `(offset, side)` of the hole along either axis.
    pub fn hole_span(&self) -> (u32, u32) {
        hole_span(self.base.size)
    }
}

pub(crate) fn hole_span(size: u32) -> (u32, u32) {
    (size / 4, size / 2)
}

pub fn mask_center(patch: &Patch) -> MaskedPatch {
    let size = patch.size;
    let (offset, side) = hole_span(size);
    let hole = BBox::square(offset, offset, side).expect("hole side is positive");
    let mut mask = GrayImage::new(size, size);
    let mut masked = patch.pixels.clone();
    for y in offset..offset + side {
        for x in offset..offset + side {
            mask.put_pixel(x, y, Luma([255]));
            masked.put_pixel(x, y, image::Rgb([0, 0, 0]));
        }
    }
    MaskedPatch {
        base: patch.clone(),
        hole,
        mask,
        masked,
    }
}

/// The hole rectangle in parent-image coordinates.
pub fn hole_rect_global(masked: &MaskedPatch) -> BBox {
    let (x, y) = masked.base.origin;
    masked.hole.translate(x as f64, y as f64)
}

/// True iff `rect` overlaps some annotation with strictly positive area.
pub fn intersects_any(rect: &BBox, annotations: &[Annotation]) -> bool {
    annotations.iter().any(|a| rect.intersects(&a.bbox))
}

/// Draws random records and origins until the masked hole overlaps no
/// annotation. Gives up after `max_draws` tries.
pub fn sample_clear_patch<R: Rng + ?Sized>(
    dataset: &crate::dataset::Dataset,
    patch_size: u32,
    rng: &mut R,
    max_draws: usize,
) -> Result<Option<MaskedPatch>, PatchError> {
    check_patch_size(patch_size)?;
    if dataset.is_empty() {
        return Ok(None);
    }
    for _ in 0..max_draws {
        let record = &dataset.records()[rng.random_range(0..dataset.len())];
        let origin = sample_patch_origin(record, patch_size, rng)?;
        let masked = mask_center(&Patch::extract(record, origin, patch_size)?);
        if !intersects_any(&hole_rect_global(&masked), record.annotations()) {
            return Ok(Some(masked));
        }
    }
    Ok(None)
}

/// Output of a generator for one masked patch.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    completed: RgbImage,
    hole_content: RgbImage,
}

impl GenerationResult {
    pub fn from_completed(completed: RgbImage, patch_size: u32) -> Result<Self, PatchError> {
        if completed.dimensions() != (patch_size, patch_size) {
            return Err(PatchError::GeometryMismatch(format!(
                "completed raster is {:?}, expected {patch_size}x{patch_size}",
                completed.dimensions()
            )));
        }
        check_patch_size(patch_size)?;
        let (offset, side) = hole_span(patch_size);
        let hole_content = imageops::crop_imm(&completed, offset, offset, side, side).to_image();
        Ok(Self {
            completed,
            hole_content,
        })
    }

    pub fn completed(&self) -> &RgbImage {
        &self.completed
    }

    pub fn hole_content(&self) -> &RgbImage {
        &self.hole_content
    }
}

/// Pastes the generated hole content into a copy of `image` at the hole location.
pub fn composite_hole(
    image: &ImageRecord,
    masked: &MaskedPatch,
    result: &GenerationResult,
) -> Result<ImageRecord, PatchError> {
    if masked.base.parent_id != image.id() {
        return Err(PatchError::GeometryMismatch(format!(
            "patch belongs to {:?}, not {:?}",
            masked.base.parent_id,
            image.id()
        )));
    }
    let (_, side) = masked.hole_span();
    if result.hole_content.dimensions() != (side, side) {
        return Err(PatchError::GeometryMismatch(format!(
            "hole content is {:?}, expected {side}x{side}",
            result.hole_content.dimensions()
        )));
    }
    let global = hole_rect_global(masked);
    if !global.fits_within(image.width(), image.height()) {
        return Err(PatchError::GeometryMismatch(format!(
            "hole {global} leaves the {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let mut pixels = image.image().clone();
    imageops::replace(
        &mut pixels,
        &result.hole_content,
        global.x_min() as i64,
        global.y_min() as i64,
    );
    image
        .with_image(pixels)
        .map_err(|e| PatchError::GeometryMismatch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 7) as u8])
        })
    }

    fn record(w: u32, h: u32) -> ImageRecord {
        ImageRecord::new("img", gradient(w, h), vec![]).unwrap()
    }

    fn car(x0: f64, y0: f64, x1: f64, y1: f64) -> Annotation {
        Annotation::original(BBox::new(x0, y0, x1, y1).unwrap(), "car")
    }

    #[test]
    fn harvest_centres_on_instance() {
        let img = record(1024, 1024);
        let patch = harvest_instance_patch(&img, &car(488.0, 488.0, 536.0, 536.0), 96).unwrap();
        assert_eq!(patch.origin(), (464, 464));
        assert_eq!(
            patch.instance().copied(),
            Some(BBox::new(24.0, 24.0, 72.0, 72.0).unwrap())
        );
        assert_eq!(patch.pixels().get_pixel(0, 0), img.image().get_pixel(464, 464));
    }

    #[test]
    fn harvest_clamps_at_border() {
        let img = record(1024, 1024);
        let patch = harvest_instance_patch(&img, &car(5.0, 5.0, 15.0, 15.0), 96).unwrap();
        assert_eq!(patch.origin(), (0, 0));
        let patch = harvest_instance_patch(&img, &car(1010.0, 1000.0, 1020.0, 1024.0), 96).unwrap();
        assert_eq!(patch.origin(), (928, 928));
    }

    #[test]
    fn harvest_rejects_large_instances_and_small_images() {
        let img = record(1024, 1024);
        assert!(matches!(
            harvest_instance_patch(&img, &car(0.0, 0.0, 49.0, 10.0), 96),
            Err(PatchError::InstanceTooLarge { .. })
        ));
        let tiny = record(80, 200);
        assert!(matches!(
            harvest_instance_patch(&tiny, &car(0.0, 0.0, 10.0, 10.0), 96),
            Err(PatchError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn sample_origin_is_forced_when_image_equals_patch() {
        let img = record(96, 96);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sample_patch_origin(&img, 96, &mut rng).unwrap(), (0, 0));
        }
    }

    #[test]
    fn sample_origin_stays_in_range() {
        let img = record(1024, 1024);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let (x, y) = sample_patch_origin(&img, 96, &mut rng).unwrap();
            assert!(x <= 928 && y <= 928);
        }
        assert!(matches!(
            sample_patch_origin(&record(50, 50), 96, &mut rng),
            Err(PatchError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn mask_center_geometry() {
        let img = record(200, 200);
        let masked = mask_center(&Patch::extract(&img, (0, 0), 96).unwrap());
        assert_eq!(masked.hole(), BBox::new(24.0, 24.0, 72.0, 72.0).unwrap());
        let masked_count = masked.mask().pixels().filter(|p| p[0] != 0).count();
        assert_eq!(masked_count, 48 * 48);

        let small = mask_center(&Patch::extract(&img, (0, 0), 4).unwrap());
        assert_eq!(small.hole(), BBox::new(1.0, 1.0, 3.0, 3.0).unwrap());
        assert_eq!(small.mask().pixels().filter(|p| p[0] != 0).count(), 4);
    }

    #[test]
    fn mask_center_leaves_input_untouched() {
        let img = record(128, 128);
        let patch = Patch::extract(&img, (10, 20), 96).unwrap();
        let before = patch.clone();
        let masked = mask_center(&patch);
        assert_eq!(patch, before);
        assert_eq!(masked.base(), &before);
        assert_eq!(masked.masked_pixels().get_pixel(30, 30), &Rgb([0, 0, 0]));
        assert_eq!(masked.masked_pixels().get_pixel(5, 5), patch.pixels().get_pixel(5, 5));
    }

    #[test]
    fn patch_size_must_be_multiple_of_four() {
        let img = record(128, 128);
        assert_eq!(
            Patch::extract(&img, (0, 0), 6).unwrap_err(),
            PatchError::InvalidPatchSize(6)
        );
        assert_eq!(
            Patch::extract(&img, (0, 0), 0).unwrap_err(),
            PatchError::InvalidPatchSize(0)
        );
    }

    #[test]
    fn hole_rect_translates_by_origin() {
        let img = record(400, 400);
        let masked = mask_center(&Patch::extract(&img, (100, 200), 96).unwrap());
        assert_eq!(
            hole_rect_global(&masked),
            BBox::new(124.0, 224.0, 172.0, 272.0).unwrap()
        );
        let masked = mask_center(&Patch::extract(&img, (0, 0), 96).unwrap());
        assert_eq!(hole_rect_global(&masked), BBox::new(24.0, 24.0, 72.0, 72.0).unwrap());
    }

    #[test]
    fn intersection_cases() {
        let hole = BBox::new(24.0, 24.0, 72.0, 72.0).unwrap();
        assert!(intersects_any(&hole, &[car(30.0, 30.0, 40.0, 40.0)]));
        assert!(!intersects_any(&hole, &[car(0.0, 30.0, 24.0, 40.0)]));
        assert!(!intersects_any(&hole, &[]));
    }

    fn generated(size: u32, fill: u8) -> GenerationResult {
        GenerationResult::from_completed(RgbImage::from_pixel(size, size, Rgb([fill, fill, fill])), size).unwrap()
    }

    #[test]
    fn composite_replaces_only_the_hole() {
        let img = record(256, 256);
        let masked = mask_center(&Patch::extract(&img, (50, 60), 96).unwrap());
        let result = generated(96, 200);
        let out = composite_hole(&img, &masked, &result).unwrap();
        for (x, y, px) in out.image().enumerate_pixels() {
            let inside = (74..122).contains(&x) && (84..132).contains(&y);
            if inside {
                assert_eq!(px, &Rgb([200, 200, 200]));
            } else {
                assert_eq!(px, img.image().get_pixel(x, y));
            }
        }
        // input untouched
        assert_eq!(img.image(), &gradient(256, 256));
    }

    #[test]
    fn composite_at_disjoint_holes_commutes() {
        let img = record(300, 300);
        let a = mask_center(&Patch::extract(&img, (0, 0), 96).unwrap());
        let b = mask_center(&Patch::extract(&img, (150, 150), 96).unwrap());
        let (ra, rb) = (generated(96, 10), generated(96, 250));
        let ab = composite_hole(&composite_hole(&img, &a, &ra).unwrap(), &b, &rb).unwrap();
        let ba = composite_hole(&composite_hole(&img, &b, &rb).unwrap(), &a, &ra).unwrap();
        assert_eq!(ab.image(), ba.image());
        assert_eq!(ab.image().get_pixel(30, 30), &Rgb([10, 10, 10]));
        assert_eq!(ab.image().get_pixel(180, 180), &Rgb([250, 250, 250]));
    }

    #[test]
    fn composite_rejects_mismatched_geometry() {
        let img = record(256, 256);
        let masked = mask_center(&Patch::extract(&img, (0, 0), 96).unwrap());
        let wrong = generated(64, 1);
        assert!(matches!(
            composite_hole(&img, &masked, &wrong),
            Err(PatchError::GeometryMismatch(_))
        ));
        let other = ImageRecord::new("other", gradient(256, 256), vec![]).unwrap();
        assert!(matches!(
            composite_hole(&other, &masked, &generated(96, 1)),
            Err(PatchError::GeometryMismatch(_))
        ));
    }

    #[test]
    fn generation_result_hole_is_central_crop() {
        let completed = gradient(96, 96);
        let result = GenerationResult::from_completed(completed.clone(), 96).unwrap();
        assert_eq!(result.hole_content().dimensions(), (48, 48));
        assert_eq!(result.hole_content().get_pixel(0, 0), completed.get_pixel(24, 24));
        assert_eq!(result.hole_content().get_pixel(47, 47), completed.get_pixel(71, 71));
    }
}
