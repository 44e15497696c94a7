use candle_core::{DType, Device, Tensor, Var};

use super::{ColorMatrix, GammaCurve, IspParams};
use crate::error::{Error, Result};

pub const DEGAMMA_EXPONENT: f64 = 2.2;

pub(crate) fn matrix_tensor(ccm: &ColorMatrix, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(ccm.row_major().to_vec(), (3, 3), &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn vector_tensor(values: &[f64], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(values, values.len(), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn degamma_tensor(x: &Tensor) -> Result<Tensor> {
    Ok(x.powf(DEGAMMA_EXPONENT)?)
}

/// `clip(M p)` for every pixel of a `(B, 3, H, W)` tensor; `ccm` is `(3, 3)`.
/// The clip passes gradient through inside `[0, 1]` and blocks it outside.
pub fn ccm_tensor(x: &Tensor, ccm: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    // batched matmul misbehaves on a stride-0 broadcast operand
    let mixed = ccm.broadcast_left(b)?.contiguous()?.matmul(&flat)?;
    Ok(mixed.reshape((b, c, h, w))?.clamp(0f64, 1f64)?)
}

/// Piecewise-linear interpolation of every element of `x` through the knots
/// `(grid[i], y[i])`. Differentiable in `y` (interpolation weights) and in
/// `x` (segment slope).
pub fn gamma_tensor(x: &Tensor, grid: &[f64], y: &Tensor) -> Result<Tensor> {
    if y.elem_count() != grid.len() {
        return Err(Error::InvalidParams(format!(
            "{} knot outputs for a grid of {}",
            y.elem_count(),
            grid.len()
        )));
    }
    let shape = x.shape().clone();
    let dtype = x.dtype();
    let flat = x.flatten_all()?;
    let host = flat.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let n = host.len();
    let mut lo_idx = Vec::with_capacity(n);
    let mut hi_idx = Vec::with_capacity(n);
    let mut lo_x = Vec::with_capacity(n);
    let mut span = Vec::with_capacity(n);
    for v in &host {
        let (i, _) = GammaCurve::locate(grid, *v);
        lo_idx.push(i as u32);
        hi_idx.push(i as u32 + 1);
        lo_x.push(grid[i]);
        span.push(grid[i + 1] - grid[i]);
    }
    let dev = Device::Cpu;
    let lo_idx = Tensor::from_vec(lo_idx, n, &dev)?;
    let hi_idx = Tensor::from_vec(hi_idx, n, &dev)?;
    let lo_x = Tensor::from_vec(lo_x, n, &dev)?.to_dtype(dtype)?;
    let span = Tensor::from_vec(span, n, &dev)?.to_dtype(dtype)?;
    let y = y.flatten_all()?.to_dtype(dtype)?;
    let t = flat.sub(&lo_x)?.div(&span)?;
    let y_lo = y.index_select(&lo_idx, 0)?;
    let y_hi = y.index_select(&hi_idx, 0)?;
    // (1 - t) y_lo + t y_hi keeps knot values exact at t = 0 and t = 1.
    let one_minus_t = t.affine(-1.0, 1.0)?;
    let out = y_lo.mul(&one_minus_t)?.add(&y_hi.mul(&t)?)?;
    Ok(out.reshape(shape)?)
}

pub fn capture_tensor(x: &Tensor, ccm: &Tensor, grid: &[f64], y: &Tensor) -> Result<Tensor> {
    let lin = degamma_tensor(x)?;
    let mixed = ccm_tensor(&lin, ccm)?;
    gamma_tensor(&mixed, grid, y)
}

/// ISP parameters held as trainable variables.
#[derive(Debug, Clone)]
pub struct IspVars {
    ccm: Var,
    gamma: Var,
    grid: Vec<f64>,
}

impl IspVars {
    pub fn new(params: &IspParams, dtype: DType) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            ccm: Var::from_tensor(&matrix_tensor(&params.ccm, dtype)?)?,
            gamma: Var::from_tensor(&vector_tensor(params.gamma.outputs(), dtype)?)?,
            grid: params.gamma.inputs().to_vec(),
        })
    }

    pub fn ccm(&self) -> &Var {
        &self.ccm
    }

    pub fn gamma(&self) -> &Var {
        &self.gamma
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.ccm.clone(), self.gamma.clone()]
    }

    /// Differentiable capture of a `(B, 3, H, W)` sRGB batch.
    pub fn capture(&self, x: &Tensor) -> Result<Tensor> {
        let ccm = self.ccm.as_tensor().to_dtype(x.dtype())?;
        let gamma = self.gamma.as_tensor().to_dtype(x.dtype())?;
        capture_tensor(x, &ccm, &self.grid, &gamma)
    }

    /// Clamps knot outputs back into `[0, 1]`.
    pub fn project(&self) -> Result<()> {
        let clamped = self.gamma.as_tensor().clamp(0f64, 1f64)?;
        self.gamma.set(&clamped)?;
        Ok(())
    }

    pub fn set_params(&self, params: &IspParams) -> Result<()> {
        params.validate()?;
        let dtype = self.ccm.dtype();
        self.ccm.set(&matrix_tensor(&params.ccm, dtype)?)?;
        self.gamma.set(&vector_tensor(params.gamma.outputs(), dtype)?)?;
        Ok(())
    }

    pub fn params(&self) -> Result<IspParams> {
        let ccm = self
            .ccm
            .as_tensor()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let y = self
            .gamma
            .as_tensor()
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        Ok(IspParams {
            ccm: ColorMatrix::from_row_major(&ccm)?,
            gamma: GammaCurve::with_grid(self.grid.clone(), y)?,
        })
    }
}
