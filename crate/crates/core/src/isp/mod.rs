//! Tunable ISP stages (color correction matrix and gamma look-up table) and
//! the virtual imaging pipeline that re-simulates them on sRGB images.

mod deploy;
mod file;
mod pipeline;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Domain, ImageTensor};

pub use deploy::{compose_deployment, interpolate_dynamic_ccm, CalibratedCcmSet};
pub use file::{export_params, import_params, params_from_json, params_to_json, CONVENTION};
pub use pipeline::{
    capture_tensor, ccm_tensor, degamma_tensor, gamma_tensor, IspVars, DEGAMMA_EXPONENT,
};

/// Default number of configurable gamma knots.
pub const DEFAULT_KNOTS: usize = 32;

/// 3x3 color correction matrix. Row `i` produces output channel `i`; pixels
/// are column vectors multiplied on the right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorMatrix(pub [[f64; 3]; 3]);

impl ColorMatrix {
    pub const IDENTITY: ColorMatrix =
        ColorMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn new(entries: [[f64; 3]; 3]) -> Result<Self> {
        let m = ColorMatrix(entries);
        m.validate()?;
        Ok(m)
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 9 {
            return Err(Error::InvalidParams(format!(
                "color matrix needs 9 entries, got {}",
                values.len()
            )));
        }
        let mut e = [[0.0; 3]; 3];
        for (i, v) in values.iter().enumerate() {
            e[i / 3][i % 3] = *v;
        }
        Self::new(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParams("color matrix has non-finite entries".into()))
        }
    }

    pub fn row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for (i, v) in self.0.iter().flatten().enumerate() {
            out[i] = *v;
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut e = self.0;
        e.iter_mut().flatten().for_each(|v| *v *= s);
        ColorMatrix(e)
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut e = self.0;
        for (r, row) in e.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += other.0[r][c];
            }
        }
        ColorMatrix(e)
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Self {
        let mut e = [[0.0; 3]; 3];
        for (r, row) in e.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[r][k] * rhs.0[k][c]).sum();
            }
        }
        ColorMatrix(e)
    }

    /// `clip(M p)` for one pixel.
    pub fn apply_pixel(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            let v: f64 = (0..3).map(|k| self.0[r][k] * p[k]).sum();
            *o = v.clamp(0.0, 1.0);
        }
        out
    }
}

impl Default for ColorMatrix {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Piecewise-linear tone curve through `k` knots. Knot inputs are fixed and
/// evenly spaced on `[0, 1]` including both ends; knot outputs are tunable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaCurve {
    inputs: Vec<f64>,
    outputs: Vec<f64>,
}

impl GammaCurve {
    pub fn knot_grid(k: usize) -> Vec<f64> {
        let last = (k - 1) as f64;
        (0..k).map(|i| i as f64 / last).collect()
    }

    /// Curve on the standard even grid.
    pub fn new(outputs: Vec<f64>) -> Result<Self> {
        if outputs.len() < 2 {
            return Err(Error::InvalidParams(
                "gamma curve needs at least 2 knots".into(),
            ));
        }
        Self::with_grid(Self::knot_grid(outputs.len()), outputs)
    }

    pub fn with_grid(inputs: Vec<f64>, outputs: Vec<f64>) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::InvalidParams(format!(
                "{} knot inputs but {} knot outputs",
                inputs.len(),
                outputs.len()
            )));
        }
        if inputs.len() < 2 {
            return Err(Error::InvalidParams(
                "gamma curve needs at least 2 knots".into(),
            ));
        }
        if inputs[0] != 0.0 || inputs[inputs.len() - 1] != 1.0 {
            return Err(Error::InvalidParams(
                "knot inputs must start at 0 and end at 1".into(),
            ));
        }
        if inputs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParams(
                "knot inputs must be strictly increasing".into(),
            ));
        }
        if let Some((i, y)) = outputs
            .iter()
            .enumerate()
            .find(|(_, y)| !(**y >= 0.0 && **y <= 1.0))
        {
            return Err(Error::InvalidParams(format!(
                "knot output {i} = {y} outside [0, 1]"
            )));
        }
        Ok(Self { inputs, outputs })
    }

    pub fn identity(k: usize) -> Self {
        let grid = Self::knot_grid(k);
        Self {
            inputs: grid.clone(),
            outputs: grid,
        }
    }

    /// Knots sampled from `x^exponent`.
    pub fn power(k: usize, exponent: f64) -> Self {
        let grid = Self::knot_grid(k);
        let outputs = grid.iter().map(|x| x.powf(exponent)).collect();
        Self {
            inputs: grid,
            outputs,
        }
    }

    /// `x -> 1 - x`.
    pub fn inversion(k: usize) -> Self {
        let grid = Self::knot_grid(k);
        let outputs = grid.iter().map(|x| 1.0 - x).collect();
        Self {
            inputs: grid,
            outputs,
        }
    }

    pub fn constant(k: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; k])
    }

    pub fn knots(&self) -> usize {
        self.inputs.len()
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Segment index `i` and position `t` in `[0, 1]` such that `x` lies
    /// between knots `i` and `i + 1`. Exact knots land at `t = 0` (or `t = 1`
    /// for the final knot).
    pub fn locate(grid: &[f64], x: f64) -> (usize, f64) {
        let segments = grid.len() - 1;
        let x = x.clamp(0.0, 1.0);
        let mut i = ((x * segments as f64).floor() as usize).min(segments - 1);
        while i > 0 && x < grid[i] {
            i -= 1;
        }
        while i + 1 < segments && x >= grid[i + 1] {
            i += 1;
        }
        let t = (x - grid[i]) / (grid[i + 1] - grid[i]);
        (i, t)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (i, t) = Self::locate(&self.inputs, x);
        self.outputs[i] * (1.0 - t) + self.outputs[i + 1] * t
    }
}

/// The protector's optimization variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IspParams {
    pub ccm: ColorMatrix,
    pub gamma: GammaCurve,
}

impl IspParams {
    /// Unmodified camera: identity matrix and identity tone curve.
    pub fn identity(k: usize) -> Self {
        Self {
            ccm: ColorMatrix::IDENTITY,
            gamma: GammaCurve::identity(k),
        }
    }

    /// Identity matrix and the tone curve that undoes the de-gamma prior,
    /// so that capture reproduces its input up to knot interpolation.
    pub fn neutral(k: usize) -> Self {
        Self {
            ccm: ColorMatrix::IDENTITY,
            gamma: GammaCurve::power(k, 1.0 / DEGAMMA_EXPONENT),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ccm.validate()?;
        GammaCurve::with_grid(self.gamma.inputs.clone(), self.gamma.outputs.clone())?;
        Ok(())
    }

    /// Per-pixel reference evaluation of the full pipeline.
    pub fn capture_pixel(&self, p: [f64; 3]) -> [f64; 3] {
        let lin = p.map(|v| v.powf(DEGAMMA_EXPONENT));
        self.ccm.apply_pixel(lin).map(|v| self.gamma.eval(v))
    }
}

impl IspParams {
    /// Capture of a raw `(B, 3, H, W)` sRGB tensor, in the tensor's dtype.
    pub fn capture(&self, x: &Tensor) -> Result<Tensor> {
        let dtype = x.dtype();
        let m = pipeline::matrix_tensor(&self.ccm, dtype)?;
        let y = pipeline::vector_tensor(self.gamma.outputs(), dtype)?;
        capture_tensor(x, &m, self.gamma.inputs(), &y)
    }
}

impl Default for IspParams {
    fn default() -> Self {
        Self::identity(DEFAULT_KNOTS)
    }
}

/// `x -> x^2.2`, undoing a nominal display gamma.
pub fn degamma(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect_domain(Domain::Srgb)?;
    Ok(ImageTensor::from_trusted(
        degamma_tensor(img.values())?,
        Domain::Linear,
    ))
}

pub fn apply_ccm(img: &ImageTensor, ccm: &ColorMatrix) -> Result<ImageTensor> {
    ccm.validate()?;
    img.expect_domain(Domain::Linear)?;
    let m = pipeline::matrix_tensor(ccm, img.values().dtype())?;
    Ok(ImageTensor::from_trusted(
        ccm_tensor(img.values(), &m)?,
        Domain::Linear,
    ))
}

/// Applies the tone curve to every channel. The result is gamma-encoded.
pub fn apply_gamma(img: &ImageTensor, curve: &GammaCurve) -> Result<ImageTensor> {
    let y = pipeline::vector_tensor(curve.outputs(), img.values().dtype())?;
    Ok(ImageTensor::from_trusted(
        gamma_tensor(img.values(), curve.inputs(), &y)?,
        Domain::Srgb,
    ))
}

/// De-gamma, color matrix, then tone curve.
pub fn virtual_capture(img: &ImageTensor, params: &IspParams) -> Result<ImageTensor> {
    let lin = degamma(img)?;
    let mixed = apply_ccm(&lin, &params.ccm)?;
    apply_gamma(&mixed, &params.gamma)
}
