//! Feature dumps for offline embedding plots.

use std::path::Path;

use crate::error::{Error, Result};
use crate::face::{extract_features, FaceDataset, FeatureExtractor, FeatureVector};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub image_id: String,
    pub identity: String,
    pub feature: FeatureVector,
}

/// Writes `image_id, identity, f0 .. f{d-1}`, one row per image. Values use
/// the shortest representation that reads back to the same `f64`.
pub fn export_features(
    extractor: &dyn FeatureExtractor,
    data: &FaceDataset,
    transform: &dyn Fn(&candle_core::Tensor) -> Result<candle_core::Tensor>,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["image_id".to_string(), "identity".to_string()];
    header.extend((0..extractor.feature_dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for chunk in indices.chunks(128) {
        let (images, _) = data.batch(chunk)?;
        let feats = extract_features(extractor, &transform(&images)?)?;
        for (&i, f) in chunk.iter().zip(&feats) {
            let s = &data.samples()[i];
            let mut row = vec![s.source.clone(), data.identity_names()[s.identity].clone()];
            row.extend(f.values().iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(data.len())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |v: &str| {
            v.parse::<f64>().map_err(|e| Error::Parse {
                location: format!("{}:{}", path.display(), line + 2),
                message: e.to_string(),
            })
        };
        let feature = rec.iter().skip(2).map(parse).collect::<Result<Vec<_>>>()?;
        rows.push(FeatureRow {
            image_id: rec.get(0).unwrap_or_default().to_string(),
            identity: rec.get(1).unwrap_or_default().to_string(),
            feature: FeatureVector::new(feature),
        });
    }
    Ok(rows)
}
