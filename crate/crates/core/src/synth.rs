//! Synthetic aerial scenes for demos and tests: textured ground with a few
//! vehicle sprites and their boxes.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, BBox, Dataset, ImageRecord};
use crate::sprite::{render_vehicle, VehicleSprite, DEFAULT_PALETTE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub width: u32,
    pub height: u32,
    /// Inclusive range of vehicles per image.
    pub vehicles: (u32, u32),
    /// Inclusive range of box sides in pixels.
    pub sides: (u32, u32),
    pub label: String,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            vehicles: (1, 3),
            sides: (36, 48),
            label: "car".into(),
        }
    }
}

/// Mid-tone ground with a soft gradient and per-pixel grain.
pub fn ground_texture<R: Rng + ?Sized>(width: u32, height: u32, rng: &mut R) -> RgbImage {
    let base = rng.random_range(78.0..102.0);
    let tint: [f64; 3] = [
        rng.random_range(-6.0..6.0),
        rng.random_range(0.0..8.0),
        rng.random_range(-6.0..2.0),
    ];
    let gx = rng.random_range(-0.04..0.04);
    let gy = rng.random_range(-0.04..0.04);
    RgbImage::from_fn(width, height, |x, y| {
        let shade = base + gx * x as f64 + gy * y as f64 + rng.random_range(-10.0..10.0);
        Rgb(tint.map(|t| (shade + t).round().clamp(0.0, 255.0) as u8))
    })
}

/// `n` scenes named `scene_0000`, `scene_0001`, ... Vehicles never overlap and
/// each box is an integer square around its sprite.
pub fn toy_world(n: usize, spec: &WorldSpec, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let mut img = ground_texture(spec.width, spec.height, &mut rng);
            let wanted = rng.random_range(spec.vehicles.0..=spec.vehicles.1);
            let mut boxes: Vec<BBox> = Vec::new();
            let mut tries = 0;
            while (boxes.len() as u32) < wanted && tries < 200 {
                tries += 1;
                let side = rng.random_range(spec.sides.0..=spec.sides.1);
                let x = rng.random_range(0..=spec.width - side);
                let y = rng.random_range(0..=spec.height - side);
                let bbox = BBox::square(x, y, side).expect("positive side");
                // keep a small gap so boxes do not touch
                let grown = BBox::new(
                    bbox.x_min() - 4.0,
                    bbox.y_min() - 4.0,
                    bbox.x_max() + 4.0,
                    bbox.y_max() + 4.0,
                )
                .expect("grown box is valid");
                if boxes.iter().any(|b| b.intersects(&grown)) {
                    continue;
                }
                let sprite = VehicleSprite {
                    center: bbox.center(),
                    side: side as f64,
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                    color: DEFAULT_PALETTE[rng.random_range(0..DEFAULT_PALETTE.len())],
                    length_scale: rng.random_range(0.9..=1.0),
                };
                render_vehicle(&mut img, &sprite, 1.0, (x, y, x + side, y + side));
                boxes.push(bbox);
            }
            let annotations = boxes
                .into_iter()
                .map(|b| Annotation::original(b, spec.label.clone()))
                .collect();
            ImageRecord::new(format!("scene_{i:04}"), img, annotations).expect("generated record is valid")
        })
        .collect();
    let labels = std::iter::once(spec.label.clone()).collect();
    Dataset::new(records, labels).expect("generated dataset is valid")
}

/// Plain textured scenes without vehicles.
pub fn empty_world(n: usize, width: u32, height: u32, seed: u64) -> Dataset {
    let spec = WorldSpec {
        width,
        height,
        vehicles: (0, 0),
        ..Default::default()
    };
    toy_world(n, &spec, seed)
}
