//! Hardware baselines: a low-resolution sensor and a defocused lens.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::iqa::gaussian_1d;
use super::plane::{from_planes, planes, Plane};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

fn area_downsample(p: &Plane, factor: usize) -> Plane {
    let (h, w) = (p.height.div_ceil(factor), p.width.div_ceil(factor));
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    // replicate padding past the border
                    let sy = (y * factor + dy).min(p.height - 1);
                    let sx = (x * factor + dx).min(p.width - 1);
                    s += p.at(sy, sx);
                }
            }
            out.push(s / (factor * factor) as f64);
        }
    }
    Plane::new(h, w, out)
}

/// Half-pixel-centered bilinear resize with edge clamping.
fn bilinear(p: &Plane, height: usize, width: usize) -> Plane {
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, p.height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, p.width);
            let top = p.at(y0, x0) * (1.0 - fx) + p.at(y0, x1) * fx;
            let bottom = p.at(y1, x0) * (1.0 - fx) + p.at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Plane::new(height, width, out)
}

/// Area-average downsampling by `factor` (replicate-padded to a multiple),
/// then bilinear upsampling back to the input size. Works on any
/// `(B, C, H, W)` tensor.
pub fn low_resolution_tensor(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::config("factor", "must be at least 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let out: Vec<Plane> = planes(x)?
        .iter()
        .map(|p| bilinear(&area_downsample(p, factor), p.height, p.width))
        .collect();
    from_planes(&out, x)
}

pub fn low_resolution(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    ImageTensor::new(low_resolution_tensor(img.values(), factor)?, img.domain())
}

/// Reflection without repeating the edge sample, folded for any offset.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

fn blur(p: &Plane, k: &[f64]) -> Plane {
    let r = (k.len() / 2) as i64;
    let (h, w) = (p.height, p.width);
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * p.at(y, reflect(x as i64 + i as i64 - r, w)))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[reflect(y as i64 + i as i64 - r, h) * w + x])
                .sum();
        }
    }
    Plane::new(h, w, out)
}

/// Per-channel normalized Gaussian blur with reflect padding.
pub fn defocus_tensor(x: &Tensor, kernel_size: usize, sigma: f64) -> Result<Tensor> {
    if kernel_size % 2 == 0 {
        return Err(Error::config("kernel_size", format!("must be odd, got {kernel_size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::config("sigma", format!("must be > 0, got {sigma}")));
    }
    if kernel_size == 1 {
        return Ok(x.clone());
    }
    let k = gaussian_1d(kernel_size, sigma);
    let out: Vec<Plane> = planes(x)?.iter().map(|p| blur(p, &k)).collect();
    from_planes(&out, x)
}

pub fn defocus(img: &ImageTensor, kernel_size: usize, sigma: f64) -> Result<ImageTensor> {
    ImageTensor::new(defocus_tensor(img.values(), kernel_size, sigma)?, img.domain())
}

/// A degradation applied in place of the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Baseline {
    Raw,
    LowResolution { factor: usize },
    Defocus { kernel_size: usize, sigma: f64 },
}

impl Baseline {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match *self {
            Baseline::Raw => Ok(x.clone()),
            Baseline::LowResolution { factor } => low_resolution_tensor(x, factor),
            Baseline::Defocus { kernel_size, sigma } => defocus_tensor(x, kernel_size, sigma),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Baseline::Raw => "raw",
            Baseline::LowResolution { .. } => "low-resolution",
            Baseline::Defocus { .. } => "defocus",
        }
    }

    pub fn parameter(&self) -> String {
        match self {
            Baseline::Raw => String::new(),
            Baseline::LowResolution { factor } => factor.to_string(),
            Baseline::Defocus { kernel_size, sigma } => format!("{kernel_size}/{sigma}"),
        }
    }

    /// The three settings per method used for the hardware comparison.
    pub fn ladder() -> Vec<Baseline> {
        let mut v: Vec<Baseline> = [4, 8, 16]
            .into_iter()
            .map(|factor| Baseline::LowResolution { factor })
            .collect();
        v.extend([(9, 3.0), (13, 5.0), (15, 7.0)].into_iter().map(|(kernel_size, sigma)| {
            Baseline::Defocus { kernel_size, sigma }
        }));
        v
    }
}
