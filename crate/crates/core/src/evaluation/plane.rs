use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// One image channel in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Plane::new(self.height, self.width, data)
    }

    /// 2x2 average pooling; an odd trailing row or column is dropped, a side
    /// of 1 is kept.
    pub fn pool2(&self) -> Plane {
        let (h, w) = ((self.height / 2).max(1), (self.width / 2).max(1));
        let (sy, sx) = (usize::from(self.height > 1) + 1, usize::from(self.width > 1) + 1);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in 0..sy {
                    for dx in 0..sx {
                        s += self.at(y * sy + dy, x * sx + dx);
                    }
                }
                out.push(s / (sy * sx) as f64);
            }
        }
        Plane::new(h, w, out)
    }
}

/// Splits a `(B, C, H, W)` tensor into `B * C` planes.
pub(crate) fn planes(t: &Tensor) -> Result<Vec<Plane>> {
    let (b, c, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b * c)
        .map(|i| Plane::new(h, w, v[i * h * w..(i + 1) * h * w].to_vec()))
        .collect())
}

/// Inverse of [`planes`], in the dtype of `like`.
pub(crate) fn from_planes(p: &[Plane], like: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = like.dims4()?;
    let (h, w) = (p[0].height, p[0].width);
    let data: Vec<f64> = p.iter().flat_map(|p| p.data.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (b, c, h, w), &Device::Cpu)?.to_dtype(like.dtype())?)
}
