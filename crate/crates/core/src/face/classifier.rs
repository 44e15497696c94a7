use serde::{Deserialize, Serialize};

use super::features::FeatureVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for LinearClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.1,
        }
    }
}

/// Softmax-regression classifier `logits = W f + b`.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(feature).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect()
    }

    /// Highest-logit class, lowest index on ties.
    pub fn classify(&self, feature: &FeatureVector) -> usize {
        let logits = self.logits(feature.values());
        let mut best = 0;
        for (i, z) in logits.iter().enumerate() {
            if *z > logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }
}

/// Full-batch gradient descent on mean softmax cross-entropy from zero
/// weights, for a fixed number of epochs.
pub fn train_linear_classifier(
    features: &[FeatureVector],
    labels: &[usize],
    num_classes: usize,
    config: &LinearClassifierConfig,
) -> Result<LinearClassifier> {
    if features.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        *counts.get_mut(y).ok_or_else(|| {
            Error::Protocol(format!("label {y} out of range for {num_classes} classes"))
        })? += 1;
    }
    if let Some(empty) = counts.iter().position(|c| *c == 0) {
        return Err(Error::Protocol(format!("class {empty} has no samples")));
    }
    let dim = features[0].dim();
    if features.iter().any(|f| f.dim() != dim) {
        return Err(Error::Contract("inconsistent feature dimensions".into()));
    }
    let mut model = LinearClassifier {
        weights: vec![vec![0.0; dim]; num_classes],
        bias: vec![0.0; num_classes],
    };
    let n = features.len() as f64;
    for _ in 0..config.epochs {
        let mut gw = vec![vec![0.0; dim]; num_classes];
        let mut gb = vec![0.0; num_classes];
        for (f, &y) in features.iter().zip(labels) {
            let logits = model.logits(f.values());
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            for c in 0..num_classes {
                let delta = exp[c] / z - if c == y { 1.0 } else { 0.0 };
                gb[c] += delta / n;
                for (g, x) in gw[c].iter_mut().zip(f.values()) {
                    *g += delta * x / n;
                }
            }
        }
        for c in 0..num_classes {
            model.bias[c] -= config.learning_rate * gb[c];
            for (w, g) in model.weights[c].iter_mut().zip(&gw[c]) {
                *w -= config.learning_rate * g;
            }
        }
    }
    Ok(model)
}
