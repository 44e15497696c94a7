//! Full-reference image quality: RMSE, PSNR, SSIM and MS-SSIM.

use serde::{Deserialize, Serialize};

use super::plane::{planes, Plane};
use crate::enhancer::FaceMask;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqaReport {
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn check_pair(test: &ImageTensor, reference: &ImageTensor) -> Result<()> {
    if test.dims() != reference.dims() {
        return Err(Error::Contract(format!(
            "test {:?} and reference {:?} differ in shape",
            test.dims(),
            reference.dims()
        )));
    }
    Ok(())
}

/// Metrics over a batch: RMSE and PSNR from the pooled squared error, SSIM
/// and MS-SSIM averaged per image over the three channels.
pub fn iqa(test: &ImageTensor, reference: &ImageTensor) -> Result<IqaReport> {
    check_pair(test, reference)?;
    let a = planes(test.values())?;
    let b = planes(reference.values())?;
    let (mut se, mut n) = (0.0, 0usize);
    let (mut ssim_sum, mut ms_sum) = (0.0, 0.0);
    for (pa, pb) in a.iter().zip(&b) {
        se += pa.data.iter().zip(&pb.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        n += pa.data.len();
        ssim_sum += ssim_plane(pa, pb).0;
        ms_sum += ms_ssim_plane(pa, pb);
    }
    let mse = se / n.max(1) as f64;
    let count = a.len().max(1) as f64;
    Ok(IqaReport {
        rmse: mse.sqrt(),
        psnr: psnr_from_mse(mse),
        ssim: ssim_sum / count,
        ms_ssim: ms_sum / count,
    })
}

/// PSNR restricted to pixels where the mask is 1 (one mask per image).
pub fn masked_psnr(test: &ImageTensor, reference: &ImageTensor, masks: &[FaceMask]) -> Result<f64> {
    check_pair(test, reference)?;
    let (batch, h, w) = test.dims();
    if masks.len() != batch || masks.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::Contract("one mask of the image size per image is required".into()));
    }
    let a = test.to_vec()?;
    let b = reference.to_vec()?;
    let (mut se, mut n) = (0.0, 0usize);
    for (i, mask) in masks.iter().enumerate() {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) == 1 {
                        let k = ((i * 3 + c) * h + y) * w + x;
                        se += (a[k] - b[k]).powi(2);
                        n += 1;
                    }
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("mask selects no pixels".into()));
    }
    Ok(psnr_from_mse(se / n as f64))
}

/// Mean value over pixels where the mask is 0.
pub fn masked_out_mean(images: &ImageTensor, masks: &[FaceMask]) -> Result<f64> {
    let (batch, h, w) = images.dims();
    if masks.len() != batch {
        return Err(Error::Contract("one mask per image is required".into()));
    }
    let v = images.to_vec()?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, mask) in masks.iter().enumerate() {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) == 0 {
                        sum += v[((i * 3 + c) * h + y) * w + x];
                        n += 1;
                    }
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("mask has no zero pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Normalized 1-D Gaussian of odd length `len`.
pub(crate) fn gaussian_1d(len: usize, sigma: f64) -> Vec<f64> {
    let r = (len / 2) as f64;
    let k: Vec<f64> = (0..len)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (h, w) = (p.height, p.width);
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p.data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    Plane::new(oh, ow, out)
}

/// Mean SSIM and mean contrast-structure term. Planes smaller than the
/// 11-pixel window use a window as large as the smaller side (odd).
pub(crate) fn ssim_plane(a: &Plane, b: &Plane) -> (f64, f64) {
    let side = a.height.min(a.width).min(WINDOW);
    let len = if side % 2 == 0 { side - 1 } else { side }.max(1);
    let k = gaussian_1d(len, SIGMA);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&a.zip(a, |x, y| x * y), &k);
    let bb = filter_valid(&b.zip(b, |x, y| x * y), &k);
    let ab = filter_valid(&a.zip(b, |x, y| x * y), &k);
    let n = mu_a.data.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        ssim += l * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

/// Five-scale MS-SSIM with 2x2 average pooling between scales; negative
/// intermediate terms are clamped to zero.
pub(crate) fn ms_ssim_plane(a: &Plane, b: &Plane) -> f64 {
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut value = 1.0;
    for (scale, w) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_plane(&a, &b);
        if scale + 1 == MS_SSIM_WEIGHTS.len() {
            value *= ssim.max(0.0).powf(*w);
        } else {
            value *= cs.max(0.0).powf(*w);
            a = a.pool2();
            b = b.pool2();
        }
    }
    value
}
