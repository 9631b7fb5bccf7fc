//! RGB float raster with the handful of drawing and resampling primitives
//! the generator needs.

use crate::error::{Error, Result};

/// Row-major interleaved RGB, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Raster { height, width, data }
    }

    pub fn get(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Left/right mirror.
    pub fn flipped(&self) -> Raster {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, c, self.get(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamped to the border.
    pub fn sample(&self, y: f64, x: f64) -> [f32; 3] {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let (a, b, c, d) = (self.get(y0, x0), self.get(y0, x1), self.get(y1, x0), self.get(y1, x1));
        std::array::from_fn(|k| {
            let top = a[k] * (1.0 - fx) + b[k] * fx;
            let bottom = c[k] * (1.0 - fx) + d[k] * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    /// Resamples the window `[top, top + h) x [left, left + w)` to a full
    /// `height x width` raster.
    pub fn crop_resize(&self, top: f64, left: f64, h: f64, w: f64, height: usize, width: usize) -> Raster {
        let mut out = Raster::filled(height, width, [0.0; 3]);
        for r in 0..height {
            let y = top + (r as f64 + 0.5) * h / height as f64 - 0.5;
            for c in 0..width {
                let x = left + (c as f64 + 0.5) * w / width as f64 - 0.5;
                out.set(r, c, self.sample(y, x));
            }
        }
        out
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Raster> {
        if bytes.len() != height * width * 3 {
            return Err(Error::shape(format!("{}x{} RGB image needs {} bytes, got {}", height, width, height * width * 3, bytes.len())));
        }
        Ok(Raster { height, width, data: bytes.iter().map(|&b| b as f32 / 255.0).collect() })
    }

    /// Planar `[3, H, W]` copy, the layout the backbone consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for k in 0..3 {
                out[k * hw + p] = self.data[p * 3 + k];
            }
        }
        out
    }
}

/// Distance from point `(y, x)` to segment `a-b`.
pub(crate) fn segment_distance(y: f64, x: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 { 0.0 } else { (((y - a.0) * dy + (x - a.1) * dx) / len2).clamp(0.0, 1.0) };
    let (py, px) = (a.0 + t * dy, a.1 + t * dx);
    ((y - py).powi(2) + (x - px).powi(2)).sqrt()
}
