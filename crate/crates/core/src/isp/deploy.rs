//! Folding optimized parameters into a real camera's color pipeline.

use serde::{Deserialize, Serialize};

use super::ColorMatrix;
use crate::error::{Error, Result};

/// Single matrix equivalent to applying `ccm_orig` and then `ccm_opt` to
/// column-vector pixels, i.e. `ccm_opt * ccm_orig`.
pub fn compose_deployment(ccm_orig: &ColorMatrix, ccm_opt: &ColorMatrix) -> ColorMatrix {
    ccm_opt.matmul(ccm_orig)
}

/// Color matrices calibrated at fixed color temperatures (kelvin), ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedCcmSet {
    entries: Vec<(f64, ColorMatrix)>,
}

impl CalibratedCcmSet {
    pub fn new(entries: Vec<(f64, ColorMatrix)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidParams("calibrated CCM set is empty".into()));
        }
        if entries.iter().any(|(t, _)| !t.is_finite()) {
            return Err(Error::InvalidParams(
                "color temperatures must be finite".into(),
            ));
        }
        if entries.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidParams(
                "color temperatures must be strictly ascending".into(),
            ));
        }
        for (_, m) in &entries {
            m.validate()?;
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, ColorMatrix)] {
        &self.entries
    }

    /// Replaces every calibrated matrix with its composition with `ccm_opt`.
    pub fn deploy(&self, ccm_opt: &ColorMatrix) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(t, m)| (*t, compose_deployment(m, ccm_opt)))
                .collect(),
        }
    }
}

/// Linear interpolation between the two calibrated matrices bracketing `t_e`.
pub fn interpolate_dynamic_ccm(calibrated: &CalibratedCcmSet, t_e: f64) -> Result<ColorMatrix> {
    let entries = calibrated.entries();
    let (t_min, t_max) = (entries[0].0, entries[entries.len() - 1].0);
    if !(t_e >= t_min && t_e <= t_max) {
        return Err(Error::OutOfRange {
            value: t_e,
            min: t_min,
            max: t_max,
        });
    }
    if let Some((_, m)) = entries.iter().find(|(t, _)| *t == t_e) {
        return Ok(*m);
    }
    let i = entries
        .windows(2)
        .position(|w| w[0].0 < t_e && t_e < w[1].0)
        .expect("t_e lies strictly inside some bracket");
    let (t_lo, m_lo) = entries[i];
    let (t_hi, m_hi) = entries[i + 1];
    let span = t_hi - t_lo;
    Ok(m_hi
        .scale((t_e - t_lo) / span)
        .add(&m_lo.scale((t_hi - t_e) / span)))
}
