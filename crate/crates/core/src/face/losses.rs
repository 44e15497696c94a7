use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};

/// Floor on `1 - p_y` inside the non-saturated loss.
pub const NS_EPSILON: f64 = 1e-12;

/// `-log softmax(logits)[label]`, computed with the log-sum-exp shift.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[label]).max(0.0))
}

/// `-log(1 - p_y)` with `1 - p_y` floored at [`NS_EPSILON`].
pub fn ns_loss(probabilities: &[f64], label: usize) -> Result<f64> {
    let p = probabilities.get(label).ok_or_else(|| {
        Error::Contract(format!(
            "label {label} out of range for {} classes",
            probabilities.len()
        ))
    })?;
    Ok(-(1.0 - p).max(NS_EPSILON).ln())
}

fn label_mask(labels: &[u32], classes: usize, dtype: DType) -> Result<Tensor> {
    let n = labels.len();
    let mut mask = vec![0f32; n * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= classes {
            return Err(Error::Contract(format!("label {y} out of range")));
        }
        mask[i * classes + y as usize] = 1.0;
    }
    Ok(Tensor::from_vec(mask, (n, classes), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Batch-mean cross-entropy over `(B, C)` logits.
pub fn ce_loss_tensor(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (_, classes) = logits.dims2()?;
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let mask = label_mask(labels, classes, logits.dtype())?;
    Ok((log_p.mul(&mask)?.sum(D::Minus1)?.mean_all()? * -1.0)?)
}

/// Batch-mean non-saturated loss `-log(1 - p_y)` over `(B, C)` logits.
///
/// `1 - p_y` is evaluated as the softmax mass of the other classes so it
/// keeps precision when `p_y` is close to one.
pub fn ns_loss_tensor(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (_, classes) = logits.dims2()?;
    let p = candle_nn::ops::softmax(logits, D::Minus1)?;
    let mask = label_mask(labels, classes, logits.dtype())?;
    let others = p.mul(&mask.affine(-1.0, 1.0)?)?.sum(D::Minus1)?;
    Ok((others.maximum(NS_EPSILON)?.log()?.mean_all()? * -1.0)?)
}

fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(1e-12)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Additive angular margin logits: `s cos(theta_j)` for non-target classes and
/// `s cos(theta_y + m)` for the target, where `theta_j` is the angle between
/// the feature and class weight `j`. `weight` is `(classes, dim)`.
pub fn arcface_logits(
    features: &Tensor,
    weight: &Tensor,
    labels: &[u32],
    scale: f64,
    margin: f64,
) -> Result<Tensor> {
    let cos = l2_normalize_rows(features)?.matmul(&l2_normalize_rows(weight)?.t()?)?;
    let cos = cos.clamp(-1f64, 1f64)?;
    let (_, classes) = cos.dims2()?;
    if margin == 0.0 {
        return Ok((cos * scale)?);
    }
    let sin = cos.sqr()?.affine(-1.0, 1.0)?.maximum(1e-7)?.sqrt()?;
    let shifted = ((&cos * margin.cos())? - (sin * margin.sin())?)?;
    let mask = label_mask(labels, classes, cos.dtype())?;
    let logits = (&cos + mask.mul(&(shifted - &cos)?)?)?;
    Ok((logits * scale)?)
}
