//! Normalized cross-correlation of square templates over a luma raster.

use image::RgbImage;

pub(crate) struct LumaRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl LumaRaster {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let data = img
            .pixels()
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect();
        Self {
            width: img.width(),
            height: img.height(),
            data,
        }
    }

    #[cfg(test)]
    pub fn from_luma(width: u32, height: u32, pixels: &[u8]) -> Self {
        Self {
            width,
            height,
            data: pixels.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Zero-mean, unit-norm template weights.
pub(crate) struct CompiledTemplate {
    pub size: u32,
    weights: Vec<f32>,
}

impl CompiledTemplate {
    /// `None` for a flat template, which correlates with nothing.
    pub fn new(size: u32, pixels: &[u8]) -> Option<Self> {
        let n = pixels.len() as f64;
        let mean = pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let centred: Vec<f64> = pixels.iter().map(|&v| v as f64 - mean).collect();
        let norm = centred.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return None;
        }
        Some(Self {
            size,
            weights: centred.iter().map(|v| (v / norm) as f32).collect(),
        })
    }
}

/// Summed-area tables for window mean and energy.
struct Integral {
    stride: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(raster: &LumaRaster) -> Self {
        let (w, h) = (raster.width as usize, raster.height as usize);
        let stride = w + 1;
        let mut sum = vec![0.0; stride * (h + 1)];
        let mut sq = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut row_sum = 0.0;
            let mut row_sq = 0.0;
            for x in 0..w {
                let v = raster.data[y * w + x] as f64;
                row_sum += v;
                row_sq += v * v;
                sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + row_sum;
                sq[(y + 1) * stride + x + 1] = sq[y * stride + x + 1] + row_sq;
            }
        }
        Self { stride, sum, sq }
    }

    fn window(&self, x: usize, y: usize, side: usize) -> (f64, f64) {
        let s = self.stride;
        let at = |t: &[f64], xx: usize, yy: usize| t[yy * s + xx];
        let rect = |t: &[f64]| at(t, x + side, y + side) - at(t, x, y + side) - at(t, x + side, y) + at(t, x, y);
        (rect(&self.sum), rect(&self.sq))
    }
}

/// Best correlation over all templates at one window position.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Candidate {
    pub x: u32,
    pub y: u32,
    pub ncc: f64,
}

/// Slides every template over the raster on a `stride` grid. Windows with no
/// intensity variation are skipped.
pub(crate) fn correlate(raster: &LumaRaster, templates: &[CompiledTemplate], stride: u32) -> Vec<Candidate> {
    let Some(side) = templates.first().map(|t| t.size) else {
        return Vec::new();
    };
    if raster.width < side || raster.height < side {
        return Vec::new();
    }
    let integral = Integral::new(raster);
    let n = (side * side) as f64;
    let side_us = side as usize;
    let width = raster.width as usize;
    let mut out = Vec::new();
    for y in (0..=raster.height - side).step_by(stride as usize) {
        for x in (0..=raster.width - side).step_by(stride as usize) {
            let (sum, sq) = integral.window(x as usize, y as usize, side_us);
            let energy = sq - sum * sum / n;
            if energy < 1e-3 * n {
                continue;
            }
            let norm = energy.sqrt();
            let mut best = f64::NEG_INFINITY;
            for t in templates {
                let mut dot = 0.0f32;
                for row in 0..side_us {
                    let start = (y as usize + row) * width + x as usize;
                    let window_row = &raster.data[start..start + side_us];
                    let weight_row = &t.weights[row * side_us..(row + 1) * side_us];
                    dot += window_row.iter().zip(weight_row).map(|(a, b)| a * b).sum::<f32>();
                }
                best = best.max(dot as f64 / norm);
            }
            out.push(Candidate {
                x,
                y,
                ncc: best.clamp(-1.0, 1.0),
            });
        }
    }
    out
}
