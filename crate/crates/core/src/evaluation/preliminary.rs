//! Color inversion as a naive in-camera transform: how far it moves face
//! features and how many people a detector stops finding.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::detection::{detect_all, DetectionDataset, DetectorModel, OPERATING_CONFIDENCE};
use crate::error::{Error, Result};
use crate::face::{cosine_similarity, extract_features, FaceDataset, FeatureExtractor};

/// Default 1:1 face verification threshold on cosine similarity.
pub const VERIFICATION_THRESHOLD: f64 = 0.409;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub mean_similarity: f64,
    /// Fraction of original/inverted pairs above the verification threshold.
    pub same_identity_rate: f64,
    /// Fraction of original detections with no counterpart on the inverted
    /// image (per-image count deficit).
    pub miss_rate: f64,
    pub faces: usize,
    pub original_detections: usize,
    pub inverted_detections: usize,
}

/// `x -> 1 - x`.
pub fn invert(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(-1.0, 1.0)?)
}

pub fn preliminary_inversion_analysis(
    faces: &FaceDataset,
    extractor: &dyn FeatureExtractor,
    detector: &dyn DetectorModel,
    scenes: &DetectionDataset,
) -> Result<InversionReport> {
    if faces.is_empty() {
        return Err(Error::Contract("no faces to compare".into()));
    }
    let indices: Vec<usize> = (0..faces.len()).collect();
    let (images, _) = faces.batch(&indices)?;
    let original = extract_features(extractor, &images)?;
    let inverted = extract_features(extractor, &invert(&images)?)?;
    let mut sims = Vec::with_capacity(original.len());
    for (a, b) in original.iter().zip(&inverted) {
        sims.push(cosine_similarity(a, b)?);
    }
    let n = sims.len() as f64;
    let mean_similarity = sims.iter().sum::<f64>() / n;
    let same = sims.iter().filter(|s| **s > VERIFICATION_THRESHOLD).count();

    let count = |dets: Vec<Vec<crate::detection::BoundingBox>>| -> Vec<usize> {
        dets.iter()
            .map(|d| d.iter().filter(|b| b.confidence >= OPERATING_CONFIDENCE).count())
            .collect()
    };
    let before = count(detect_all(detector, scenes, &|x| Ok(x.clone()))?);
    let after = count(detect_all(detector, scenes, &invert)?);
    let original_detections: usize = before.iter().sum();
    let missed: usize = before.iter().zip(&after).map(|(b, a)| b.saturating_sub(*a)).sum();
    Ok(InversionReport {
        mean_similarity,
        same_identity_rate: same as f64 / n,
        miss_rate: if original_detections == 0 {
            0.0
        } else {
            missed as f64 / original_detections as f64
        },
        faces: sims.len(),
        original_detections,
        inverted_detections: after.iter().sum(),
    })
}
