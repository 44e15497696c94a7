use std::sync::Mutex;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Linear};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::FaceDataset;
use super::losses::{arcface_logits, ce_loss_tensor};
use crate::error::{Error, Result};
use crate::nn::{conv2d, linear, max_pool2, scalar, Init, MomentumSgd, ParamStore};

/// Maps a `(B, 3, H, W)` image batch to `(B, feature_dim)` features.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn forward(&self, images: &Tensor) -> Result<Tensor>;
    /// Trainable parameters, for extractors that can be optimized.
    fn trainable(&self) -> Option<&ParamStore> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyExtractorConfig {
    pub input_size: usize,
    pub width: usize,
    pub feature_dim: usize,
}

impl Default for TinyExtractorConfig {
    fn default() -> Self {
        Self {
            input_size: 16,
            width: 16,
            feature_dim: 128,
        }
    }
}

/// Three-conv embedding network for square crops whose side is a multiple
/// of 4.
pub struct TinyExtractor {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    fc: Linear,
    store: ParamStore,
    config: TinyExtractorConfig,
}

impl TinyExtractor {
    pub fn new(config: TinyExtractorConfig, seed: u64) -> Result<Self> {
        if config.input_size % 4 != 0 || config.input_size == 0 {
            return Err(Error::Contract(format!(
                "extractor input size {} is not a positive multiple of 4",
                config.input_size
            )));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let w = config.width;
        let conv1 = conv2d(&mut store, &mut init, "conv1", (3, w, 3), 1)?;
        let conv2 = conv2d(&mut store, &mut init, "conv2", (w, 2 * w, 3), 1)?;
        let conv3 = conv2d(&mut store, &mut init, "conv3", (2 * w, 2 * w, 3), 1)?;
        let side = config.input_size / 4;
        let fc = linear(
            &mut store,
            &mut init,
            "fc",
            (2 * w * side * side, config.feature_dim),
            true,
        )?;
        Ok(Self {
            conv1,
            conv2,
            conv3,
            fc,
            store,
            config,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> TinyExtractorConfig {
        self.config
    }
}

impl FeatureExtractor for TinyExtractor {
    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let x = images.to_dtype(DType::F32)?.affine(2.0, -1.0)?;
        let x = self.conv1.forward(&x)?.relu()?;
        let x = max_pool2(&x)?;
        let x = self.conv2.forward(&x)?.relu()?;
        let x = max_pool2(&x)?;
        let x = self.conv3.forward(&x)?.relu()?;
        Ok(self.fc.forward(&x.flatten_from(1)?)?)
    }

    fn trainable(&self) -> Option<&ParamStore> {
        Some(&self.store)
    }
}

/// Linear classifier over a fixed identity set, stacked on an extractor to
/// make identification trainable.
pub struct ProxyHead {
    linear: Linear,
    store: ParamStore,
    num_identities: usize,
}

impl ProxyHead {
    pub fn new(feature_dim: usize, num_identities: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let linear = linear(
            &mut store,
            &mut init,
            "head",
            (feature_dim, num_identities),
            false,
        )?;
        Ok(Self {
            linear,
            store,
            num_identities,
        })
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.linear.forward(features)?)
    }

    /// `(num_identities, feature_dim)`.
    pub fn weight(&self) -> &Tensor {
        self.linear.weight()
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }
}

/// Returns an independent random unit vector for every image on every call.
pub struct RandomExtractor {
    dim: usize,
    rng: Mutex<ChaCha8Rng>,
}

impl RandomExtractor {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl FeatureExtractor for RandomExtractor {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dims()[0];
        let mut rng = self.rng.lock().expect("rng poisoned");
        let mut data = Vec::with_capacity(b * self.dim);
        for _ in 0..b {
            let v: Vec<f32> = (0..self.dim)
                .map(|_| {
                    // Box-Muller gives an isotropic direction once normalized.
                    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
                    let u2: f32 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
                })
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
            data.extend(v.iter().map(|x| x / n));
        }
        Ok(Tensor::from_vec(data, (b, self.dim), &Device::Cpu)?)
    }
}

/// Emits the one-hot vector of whatever class `key` assigns to each image.
pub struct OneHotExtractor<F> {
    dim: usize,
    key: F,
}

impl<F: Fn(&Tensor) -> Result<usize>> OneHotExtractor<F> {
    pub fn new(dim: usize, key: F) -> Self {
        Self { dim, key }
    }
}

impl<F: Fn(&Tensor) -> Result<usize>> FeatureExtractor for OneHotExtractor<F> {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dims()[0];
        let mut data = vec![0f32; b * self.dim];
        for i in 0..b {
            let k = (self.key)(&images.get(i)?)?;
            if k >= self.dim {
                return Err(Error::Contract(format!("one-hot index {k} >= {}", self.dim)));
            }
            data[i * self.dim + k] = 1.0;
        }
        Ok(Tensor::from_vec(data, (b, self.dim), &Device::Cpu)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum HeadLoss {
    Softmax,
    ArcFace { scale: f64, margin: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch after which the learning rate switches to `decayed_learning_rate`.
    pub decay_after_epoch: Option<usize>,
    pub decayed_learning_rate: f64,
    pub loss: HeadLoss,
    pub seed: u64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_after_epoch: None,
            decayed_learning_rate: 0.001,
            loss: HeadLoss::Softmax,
            seed: 0,
        }
    }
}

/// Supervised classification training of `extractor` + `head` on `data`;
/// labels index the head's identities. Returns the mean loss of every epoch.
/// `on_epoch` runs after each epoch with its index and mean loss.
pub fn train_extractor(
    extractor: &dyn FeatureExtractor,
    head: &ProxyHead,
    data: &FaceDataset,
    config: &ExtractorTrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    if data.num_identities() > head.num_identities() {
        return Err(Error::Contract(format!(
            "{} identities for a head of {}",
            data.num_identities(),
            head.num_identities()
        )));
    }
    let mut vars = extractor
        .trainable()
        .ok_or_else(|| Error::Contract("extractor has no trainable parameters".into()))?
        .vars();
    vars.extend(head.params().vars());
    let mut opt = MomentumSgd::new(
        vars,
        config.learning_rate,
        config.momentum,
        config.weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.decay_after_epoch.is_some_and(|e| epoch >= e) {
            opt.set_learning_rate(config.decayed_learning_rate);
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let (images, labels) = data.batch(chunk)?;
            let features = extractor.forward(&images)?;
            let logits = match config.loss {
                HeadLoss::Softmax => head.logits(&features)?,
                HeadLoss::ArcFace { scale, margin } => {
                    arcface_logits(&features, head.weight(), &labels, scale, margin)?
                }
            };
            let loss = ce_loss_tensor(&logits, &labels)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    round: epoch,
                    step: batches,
                    detail: "non-finite classification loss".into(),
                });
            }
            opt.step(&loss.backward()?)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        history.push(mean);
        on_epoch(epoch, mean)?;
    }
    Ok(history)
}

/// Top-1 accuracy of `head(extractor(x))` on a labeled set.
pub fn head_accuracy(
    extractor: &dyn FeatureExtractor,
    head: &ProxyHead,
    data: &FaceDataset,
    transform: &dyn Fn(&Tensor) -> Result<Tensor>,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(128) {
        let (images, labels) = data.batch(chunk)?;
        let logits = head.logits(&extractor.forward(&transform(&images)?)?)?;
        let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
        correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
