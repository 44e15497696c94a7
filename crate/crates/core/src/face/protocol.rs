//! Closed-set identification: one gallery template and one distinct query
//! per identity, top-1 accuracy averaged over independent runs.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{train_linear_classifier, LinearClassifierConfig};
use super::dataset::FaceDataset;
use super::extractor::FeatureExtractor;
use super::features::{nearest_neighbor_identify, FeatureVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Nearest,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub classifier: ClassifierKind,
    pub runs: usize,
    pub seed: u64,
    /// Identities with fewer images are excluded.
    pub min_images: usize,
    pub linear: LinearClassifierConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierKind::Nearest,
            runs: 10,
            seed: 0,
            min_images: 2,
            linear: LinearClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub mean_accuracy: f64,
    pub per_run: Vec<f64>,
    pub identities: usize,
    pub excluded: usize,
}

impl ProtocolReport {
    /// Binomial standard deviation of the mean accuracy at success rate `p`.
    pub fn binomial_std(&self, p: f64) -> f64 {
        let trials = (self.identities * self.per_run.len()).max(1) as f64;
        (p * (1.0 - p) / trials).sqrt()
    }
}

pub fn extract_features(
    extractor: &dyn FeatureExtractor,
    images: &Tensor,
) -> Result<Vec<FeatureVector>> {
    let n = images.dims()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = (n - start).min(128);
        let feats = extractor
            .forward(&images.narrow(0, start, len)?)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        out.extend(feats.into_iter().map(FeatureVector::new));
        start += len;
    }
    Ok(out)
}

fn apply_chunked(
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    images: &Tensor,
) -> Result<Tensor> {
    let n = images.dims()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = (n - start).min(128);
        parts.push(f(&images.narrow(0, start, len)?)?);
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Baseline protocol: unprotected gallery, queries passed through `protect`.
pub fn closed_set_protocol(
    dataset: &FaceDataset,
    extractor: &dyn FeatureExtractor,
    protect: &dyn Fn(&Tensor) -> Result<Tensor>,
    config: &ProtocolConfig,
) -> Result<ProtocolReport> {
    closed_set_protocol_with_gallery(dataset, extractor, &|x| Ok(x.clone()), protect, config)
}

/// Protocol with an explicit gallery transform (re-enrollment attacks pass
/// the capture function here).
pub fn closed_set_protocol_with_gallery(
    dataset: &FaceDataset,
    extractor: &dyn FeatureExtractor,
    gallery_transform: &dyn Fn(&Tensor) -> Result<Tensor>,
    protect: &dyn Fn(&Tensor) -> Result<Tensor>,
    config: &ProtocolConfig,
) -> Result<ProtocolReport> {
    if config.runs == 0 {
        return Err(Error::Protocol("at least one run is required".into()));
    }
    let groups = dataset.by_identity();
    let (identities, excluded) = dataset.eligible_identities(config.min_images.max(2));
    if identities.is_empty() {
        return Err(Error::Protocol(
            "no identity has enough images for a gallery and a query".into(),
        ));
    }
    let mut per_run = Vec::with_capacity(config.runs);
    for run in 0..config.runs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(run as u64 + 1);
        let mut gallery_idx = Vec::with_capacity(identities.len());
        let mut query_idx = Vec::with_capacity(identities.len());
        for &id in &identities {
            let picks: Vec<usize> = groups[id].choose_multiple(&mut rng, 2).copied().collect();
            gallery_idx.push(picks[0]);
            query_idx.push(picks[1]);
        }
        let (g_images, _) = dataset.batch(&gallery_idx)?;
        let (q_images, _) = dataset.batch(&query_idx)?;
        let g_feats = extract_features(extractor, &apply_chunked(gallery_transform, &g_images)?)?;
        let q_feats = extract_features(extractor, &apply_chunked(protect, &q_images)?)?;

        let correct = match config.classifier {
            ClassifierKind::Nearest => {
                let gallery: Vec<(usize, FeatureVector)> = g_feats.into_iter().enumerate().collect();
                let mut correct = 0;
                for (truth, q) in q_feats.iter().enumerate() {
                    if nearest_neighbor_identify(q, &gallery)? == truth {
                        correct += 1;
                    }
                }
                correct
            }
            ClassifierKind::Linear => {
                let g_norm = g_feats
                    .iter()
                    .map(|f| f.normalize())
                    .collect::<Result<Vec<_>>>()?;
                let labels: Vec<usize> = (0..g_norm.len()).collect();
                let clf =
                    train_linear_classifier(&g_norm, &labels, g_norm.len(), &config.linear)?;
                let mut correct = 0;
                for (truth, q) in q_feats.iter().enumerate() {
                    if clf.classify(&q.normalize()?) == truth {
                        correct += 1;
                    }
                }
                correct
            }
        };
        per_run.push(correct as f64 / identities.len() as f64);
    }
    let mean_accuracy = per_run.iter().sum::<f64>() / per_run.len() as f64;
    Ok(ProtocolReport {
        mean_accuracy,
        per_run,
        identities: identities.len(),
        excluded,
    })
}
