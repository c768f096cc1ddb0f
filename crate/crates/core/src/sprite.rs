//! Top-down vehicle sprite: a rotated rounded rectangle with windshield and
//! rear-window bands, anti-aliased by signed distance.

use image::{Rgb, RgbImage};

/// Light colours that stand out against mid-tone ground.
pub const DEFAULT_PALETTE: [[u8; 3]; 6] = [
    [235, 235, 235],
    [200, 200, 205],
    [235, 90, 80],
    [240, 200, 60],
    [120, 160, 230],
    [250, 250, 250],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleSprite {
    pub center: (f64, f64),
    /// Side of the square the vehicle is designed to fill.
    pub side: f64,
    /// Heading in radians.
    pub angle: f64,
    pub color: [u8; 3],
    /// Body length multiplier, nominally in `[0.9, 1.0]`.
    pub length_scale: f64,
}

impl VehicleSprite {
    pub fn new(center: (f64, f64), side: f64, angle: f64, color: [u8; 3]) -> Self {
        Self {
            center,
            side,
            angle,
            color,
            length_scale: 1.0,
        }
    }

    fn half_extent(&self) -> f64 {
        0.4 * self.side * self.length_scale + 1.0
    }
}

fn rounded_rect_distance(u: f64, v: f64, half_len: f64, half_wid: f64, radius: f64) -> f64 {
    let qx = u.abs() - (half_len - radius);
    let qy = v.abs() - (half_wid - radius);
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0) - radius
}

/// Blends the sprite into `img` with opacity `alpha`, touching only pixels in
/// the half-open rectangle `clip = (x0, y0, x1, y1)`.
pub fn render_vehicle(img: &mut RgbImage, sprite: &VehicleSprite, alpha: f64, clip: (u32, u32, u32, u32)) {
    let alpha = alpha.clamp(0.0, 1.0);
    if alpha == 0.0 {
        return;
    }
    let s = sprite.side;
    let half_len = 0.4 * s * sprite.length_scale;
    let half_wid = 0.21 * s;
    let radius = 0.12 * s;
    let (sin, cos) = sprite.angle.sin_cos();
    let reach = sprite.half_extent();
    let (cx, cy) = sprite.center;

    let x0 = clip.0.max((cx - reach).floor().max(0.0) as u32);
    let y0 = clip.1.max((cy - reach).floor().max(0.0) as u32);
    let x1 = clip.2.min(img.width()).min((cx + reach).ceil().max(0.0) as u32);
    let y1 = clip.3.min(img.height()).min((cy + reach).ceil().max(0.0) as u32);

    let body = sprite.color.map(|c| c as f64);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let coverage = (0.5 - rounded_rect_distance(u, v, half_len, half_wid, radius)).clamp(0.0, 1.0);
            if coverage <= 0.0 {
                continue;
            }
            let inner = v.abs() < half_wid - 0.06 * s;
            let shade = if inner && u > 0.2 * half_len && u < 0.52 * half_len {
                0.35
            } else if inner && u < -0.56 * half_len && u > -0.76 * half_len {
                0.5
            } else {
                1.0
            };
            let a = alpha * coverage;
            let px = img.get_pixel_mut(x, y);
            for c in 0..3 {
                let target = body[c] * shade;
                px[c] = (px[c] as f64 * (1.0 - a) + target * a).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

/// A `side x side` luma template of a vehicle heading `angle`, centred on flat ground.
pub fn vehicle_template(side: u32, angle: f64) -> Vec<u8> {
    let mut img = RgbImage::from_pixel(side, side, Rgb([96, 104, 96]));
    let c = side as f64 / 2.0;
    let sprite = VehicleSprite::new((c, c), side as f64, angle, [235, 235, 235]);
    render_vehicle(&mut img, &sprite, 1.0, (0, 0, side, side));
    img.pixels()
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sprite_stays_inside_clip() {
        let mut img = RgbImage::new(64, 64);
        let sprite = VehicleSprite::new((32.0, 32.0), 48.0, 0.3, [255, 255, 255]);
        render_vehicle(&mut img, &sprite, 1.0, (20, 20, 44, 44));
        for (x, y, p) in img.enumerate_pixels() {
            if !(20..44).contains(&x) || !(20..44).contains(&y) {
                assert_eq!(p, &Rgb([0, 0, 0]));
            }
        }
        assert_ne!(img.get_pixel(32, 32), &Rgb([0, 0, 0]));
    }

    #[test]
    fn zero_alpha_draws_nothing() {
        let mut img = RgbImage::from_pixel(16, 16, Rgb([9, 9, 9]));
        let sprite = VehicleSprite::new((8.0, 8.0), 12.0, 0.0, [255, 0, 0]);
        render_vehicle(&mut img, &sprite, 0.0, (0, 0, 16, 16));
        assert!(img.pixels().all(|p| p == &Rgb([9, 9, 9])));
    }

    #[test]
    fn template_has_contrast() {
        let t = vehicle_template(48, 0.0);
        assert_eq!(t.len(), 48 * 48);
        let max = *t.iter().max().unwrap();
        let min = *t.iter().min().unwrap();
        assert!(max > 200 && min < 110);
    }
}
