//! Batched RGB images backed by tensors, tagged with their transfer domain.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether pixel values are gamma-encoded (as stored in ordinary image files)
/// or linear in scene radiance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Srgb,
    Linear,
}

/// A `batch x 3 x height x width` tensor with every value in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    values: Tensor,
    domain: Domain,
}

impl ImageTensor {
    /// Wraps a tensor after checking its shape and value range.
    pub fn new(values: Tensor, domain: Domain) -> Result<Self> {
        let (_, c, _, _) = values.dims4()?;
        if c != 3 {
            return Err(Error::Contract(format!("expected 3 channels, got {c}")));
        }
        let flat = values.flatten_all()?;
        if flat.elem_count() > 0 {
            let lo = flat.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let hi = flat.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !(lo >= 0.0 && hi <= 1.0) {
                let value = if lo < 0.0 || lo.is_nan() { lo } else { hi };
                return Err(Error::OutOfRange {
                    value,
                    min: 0.0,
                    max: 1.0,
                });
            }
        }
        Ok(Self { values, domain })
    }

    /// Wraps a tensor the caller already knows to be in range.
    pub(crate) fn from_trusted(values: Tensor, domain: Domain) -> Self {
        Self { values, domain }
    }

    pub fn from_vec(
        data: Vec<f32>,
        (batch, height, width): (usize, usize, usize),
        domain: Domain,
    ) -> Result<Self> {
        let t = Tensor::from_vec(data, (batch, 3, height, width), &Device::Cpu)?;
        Self::new(t, domain)
    }

    pub fn from_vec_f64(
        data: Vec<f64>,
        (batch, height, width): (usize, usize, usize),
        domain: Domain,
    ) -> Result<Self> {
        let t = Tensor::from_vec(data, (batch, 3, height, width), &Device::Cpu)?;
        Self::new(t, domain)
    }

    pub fn uniform(
        (batch, height, width): (usize, usize, usize),
        value: f64,
        dtype: DType,
        domain: Domain,
    ) -> Result<Self> {
        let t = (Tensor::ones((batch, 3, height, width), dtype, &Device::Cpu)? * value)?;
        Self::new(t, domain)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// `(batch, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.values.dims();
        (d[0], d[2], d[3])
    }

    pub fn batch_size(&self) -> usize {
        self.values.dims()[0]
    }

    pub(crate) fn expect_domain(&self, expected: Domain) -> Result<()> {
        if self.domain != expected {
            return Err(Error::Domain {
                expected,
                found: self.domain,
            });
        }
        Ok(())
    }

    /// All values in `batch, channel, row, column` order.
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self
            .values
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }

    pub fn get(&self, index: usize) -> Result<Self> {
        Ok(Self::from_trusted(
            self.values.narrow(0, index, 1)?,
            self.domain,
        ))
    }

    pub fn concat(images: &[ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Contract("cannot concatenate zero images".into()))?;
        let domain = first.domain;
        if let Some(bad) = images.iter().find(|i| i.domain != domain) {
            return Err(Error::Domain {
                expected: domain,
                found: bad.domain,
            });
        }
        let parts: Vec<&Tensor> = images.iter().map(|i| &i.values).collect();
        Ok(Self::from_trusted(Tensor::cat(&parts, 0)?, domain))
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self::from_trusted(self.values.to_dtype(dtype)?, self.domain))
    }

    /// Decodes an 8-bit PNG or JPEG into a single-image sRGB batch.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![0f32; 3 * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                data[c * w * h + y * w + x] = px.0[c] as f32 / 255.0;
            }
        }
        Self::from_vec(data, (1, h, w), Domain::Srgb)
    }

    /// Encodes image `index` as 8-bit RGB; format follows the file extension.
    pub fn save(&self, index: usize, path: impl AsRef<Path>) -> Result<()> {
        let (_, h, w) = self.dims();
        let data = self
            .values
            .narrow(0, index, 1)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let mut out = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    let value = data[c * w * h + y * w + x];
                    *v = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                out.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        out.save(path.as_ref())?;
        Ok(())
    }
}
