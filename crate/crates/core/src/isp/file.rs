//! Parameter file: one JSON document holding the matrix (row-major), the
//! knot grid and knot outputs, plus the vector convention.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ColorMatrix, GammaCurve, IspParams};
use crate::error::{Error, Result};

pub const CONVENTION: &str = "column-vector-left-multiply";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDocument {
    convention: String,
    k: usize,
    ccm: Vec<f64>,
    gamma_x: Vec<f64>,
    gamma_y: Vec<f64>,
}

pub fn params_to_json(params: &IspParams) -> Result<String> {
    let doc = ParamsDocument {
        convention: CONVENTION.to_string(),
        k: params.gamma.knots(),
        ccm: params.ccm.row_major().to_vec(),
        gamma_x: params.gamma.inputs().to_vec(),
        gamma_y: params.gamma.outputs().to_vec(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse {
        location: "<serialize>".into(),
        message: e.to_string(),
    })
}

pub fn params_from_json(text: &str) -> Result<IspParams> {
    let doc: ParamsDocument = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    if doc.convention != CONVENTION {
        return Err(Error::Parse {
            location: "convention".into(),
            message: format!("unsupported convention `{}`", doc.convention),
        });
    }
    if doc.ccm.len() != 9 {
        return Err(Error::Parse {
            location: "ccm".into(),
            message: format!("expected 9 entries, found {}", doc.ccm.len()),
        });
    }
    for (field, len) in [("gamma_x", doc.gamma_x.len()), ("gamma_y", doc.gamma_y.len())] {
        if len != doc.k {
            return Err(Error::Parse {
                location: field.into(),
                message: format!("expected k = {} values, found {len}", doc.k),
            });
        }
    }
    Ok(IspParams {
        ccm: ColorMatrix::from_row_major(&doc.ccm)?,
        gamma: GammaCurve::with_grid(doc.gamma_x, doc.gamma_y)?,
    })
}

pub fn export_params(params: &IspParams, destination: impl AsRef<Path>) -> Result<()> {
    params.validate()?;
    let path = destination.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, params_to_json(params)?).map_err(|e| Error::io(path, e))
}

pub fn import_params(source: impl AsRef<Path>) -> Result<IspParams> {
    let path = source.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    params_from_json(&text)
}
