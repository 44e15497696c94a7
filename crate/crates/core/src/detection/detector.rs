use candle_core::{DType, Module, Tensor};
#[cfg(test)]
use candle_core::Device;
use candle_nn::Conv2d;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ap::{detection_metrics, DetectionMetrics};
use super::boxes::{nms, BoundingBox, DetectionDataset, DetectionSample, PERSON};
use crate::error::{Error, Result};
use crate::nn::{conv2d, max_pool2, scalar, Adam, Init, ParamStore};

const SCORE_FLOOR: f64 = 0.05;
const NMS_IOU: f64 = 0.5;
const MAX_DETECTIONS: usize = 100;
const PSEUDO_CONFIDENCE: f64 = 0.5;

/// A person detector whose loss is differentiable in both its parameters
/// and its input pixels.
pub trait DetectorModel {
    /// Post-processed detections for each image of a `(B, 3, H, W)` batch.
    fn detect(&self, images: &Tensor) -> Result<Vec<Vec<BoundingBox>>>;
    /// `(L_cls, L_box)` as scalar tensors attached to the autodiff graph.
    fn loss(&self, images: &Tensor, ground_truth: &[Vec<BoundingBox>]) -> Result<(Tensor, Tensor)>;
    fn params(&self) -> &ParamStore;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyDetectorConfig {
    pub width: usize,
}

impl Default for TinyDetectorConfig {
    fn default() -> Self {
        Self { width: 16 }
    }
}

/// Anchor-free single-class detector with output stride 4. Each output cell
/// carries a center logit and a box `(dx, dy, w, h)` squashed to `[0, 1]`:
/// the center offset inside the cell and the size relative to the image.
pub struct TinyDetector {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    head: Conv2d,
    store: ParamStore,
    dtype: DType,
    config: TinyDetectorConfig,
}

impl TinyDetector {
    pub fn new(config: TinyDetectorConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: TinyDetectorConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::with_dtype(seed, dtype);
        let w = config.width;
        let conv1 = conv2d(&mut store, &mut init, "conv1", (3, w, 3), 1)?;
        let conv2 = conv2d(&mut store, &mut init, "conv2", (w, 2 * w, 3), 1)?;
        let conv3 = conv2d(&mut store, &mut init, "conv3", (2 * w, 2 * w, 3), 1)?;
        let head = conv2d(&mut store, &mut init, "head", (2 * w, 5, 1), 1)?;
        Ok(Self {
            conv1,
            conv2,
            conv3,
            head,
            store,
            dtype,
            config,
        })
    }

    pub fn config(&self) -> TinyDetectorConfig {
        self.config
    }

    /// `(B, 5, H/4, W/4)`: channel 0 is the center logit, channels 1..5 the
    /// box after a sigmoid.
    pub fn outputs(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Contract(format!(
                "detector input {h}x{w} is not a multiple of 4"
            )));
        }
        let x = images.to_dtype(self.dtype)?.affine(2.0, -1.0)?;
        let x = self.conv1.forward(&x)?.relu()?;
        let x = max_pool2(&x)?;
        let x = self.conv2.forward(&x)?.relu()?;
        let x = max_pool2(&x)?;
        let x = self.conv3.forward(&x)?.relu()?;
        let raw = self.head.forward(&x)?;
        let heat = raw.narrow(1, 0, 1)?;
        let boxes = candle_nn::ops::sigmoid(&raw.narrow(1, 1, 4)?)?;
        Ok(Tensor::cat(&[&heat, &boxes], 1)?)
    }
}

impl DetectorModel for TinyDetector {
    fn detect(&self, images: &Tensor) -> Result<Vec<Vec<BoundingBox>>> {
        decode(&self.outputs(images)?)
    }

    fn loss(&self, images: &Tensor, ground_truth: &[Vec<BoundingBox>]) -> Result<(Tensor, Tensor)> {
        detection_loss_from_outputs(&self.outputs(images)?, ground_truth)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}

fn assign_cell(b: &BoundingBox, gh: usize, gw: usize) -> (usize, usize, f64, f64) {
    let fx = (b.cx.clamp(0.0, 1.0 - 1e-9)) * gw as f64;
    let fy = (b.cy.clamp(0.0, 1.0 - 1e-9)) * gh as f64;
    let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
    (iy, ix, fx - ix as f64, fy - iy as f64)
}

/// `L_cls` is binary cross-entropy of the center map summed over cells and
/// `L_box` the L1 box error summed over positive cells, both divided by the
/// number of ground-truth centers (at least 1).
pub fn detection_loss_from_outputs(
    outputs: &Tensor,
    ground_truth: &[Vec<BoundingBox>],
) -> Result<(Tensor, Tensor)> {
    let (b, c, gh, gw) = outputs.dims4()?;
    if c != 5 || b != ground_truth.len() {
        return Err(Error::Contract(format!(
            "outputs {:?} do not match {} ground-truth lists",
            outputs.dims(),
            ground_truth.len()
        )));
    }
    let cells = gh * gw;
    let mut heat = vec![0f64; b * cells];
    let mut mask = vec![0f64; b * cells];
    let mut target = vec![0f64; b * 4 * cells];
    let mut positives = 0usize;
    for (n, boxes) in ground_truth.iter().enumerate() {
        for gt in boxes {
            let (iy, ix, dx, dy) = assign_cell(gt, gh, gw);
            let cell = iy * gw + ix;
            if heat[n * cells + cell] > 0.0 {
                continue;
            }
            heat[n * cells + cell] = 1.0;
            mask[n * cells + cell] = 1.0;
            for (k, v) in [dx, dy, gt.w.min(1.0), gt.h.min(1.0)].into_iter().enumerate() {
                target[(n * 4 + k) * cells + cell] = v;
            }
            positives += 1;
        }
    }
    let dtype = outputs.dtype();
    let dev = outputs.device();
    let norm = positives.max(1) as f64;
    let heat = Tensor::from_vec(heat, (b, 1, gh, gw), dev)?.to_dtype(dtype)?;
    let mask = Tensor::from_vec(mask, (b, 1, gh, gw), dev)?.to_dtype(dtype)?;
    let target = Tensor::from_vec(target, (b, 4, gh, gw), dev)?.to_dtype(dtype)?;

    // stable BCE with logits: max(z, 0) - z t + log(1 + exp(-|z|))
    let z = outputs.narrow(1, 0, 1)?;
    let bce = ((z.relu()? - (&z * &heat)?)? + (z.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let l_cls = (bce.sum_all()? / norm)?;

    let pred = outputs.narrow(1, 1, 4)?;
    let l1 = (pred - target)?.abs()?.broadcast_mul(&mask)?;
    let l_box = (l1.sum_all()? / norm)?;
    Ok((l_cls, l_box))
}

pub fn detection_loss(
    model: &dyn DetectorModel,
    images: &Tensor,
    ground_truth: &[Vec<BoundingBox>],
) -> Result<(Tensor, Tensor)> {
    model.loss(images, ground_truth)
}

/// Local maxima of the center map above the score floor, followed by NMS.
fn decode(outputs: &Tensor) -> Result<Vec<Vec<BoundingBox>>> {
    let (b, _, gh, gw) = outputs.dims4()?;
    let out = outputs.to_dtype(DType::F64)?;
    let mut result = Vec::with_capacity(b);
    for n in 0..b {
        let o = out.get(n)?.to_vec3::<f64>()?;
        let score = |y: usize, x: usize| 1.0 / (1.0 + (-o[0][y][x]).exp());
        let mut dets = Vec::new();
        for y in 0..gh {
            for x in 0..gw {
                let s = score(y, x);
                if s <= SCORE_FLOOR {
                    continue;
                }
                let mut peak = true;
                for (ny, nx) in neighbors(y, x, gh, gw) {
                    let t = score(ny, nx);
                    // ties go to the earlier cell in raster order
                    if t > s || (t == s && (ny, nx) < (y, x)) {
                        peak = false;
                        break;
                    }
                }
                if !peak {
                    continue;
                }
                let w = o[3][y][x].max(1e-6);
                let h = o[4][y][x].max(1e-6);
                dets.push(BoundingBox {
                    cx: (x as f64 + o[1][y][x]) / gw as f64,
                    cy: (y as f64 + o[2][y][x]) / gh as f64,
                    w,
                    h,
                    confidence: s,
                    class: PERSON,
                });
            }
        }
        result.push(nms(dets, NMS_IOU, MAX_DETECTIONS));
    }
    Ok(result)
}

fn neighbors(y: usize, x: usize, gh: usize, gw: usize) -> impl Iterator<Item = (usize, usize)> {
    let ys = y.saturating_sub(1)..=(y + 1).min(gh - 1);
    ys.flat_map(move |ny| {
        let xs = x.saturating_sub(1)..=(x + 1).min(gw - 1);
        xs.map(move |nx| (ny, nx))
    })
    .filter(move |&p| p != (y, x))
}

/// Runs `model` on `protect(image)` for every sample and scores the
/// detections against the sample boxes.
pub fn evaluate_detection(
    model: &dyn DetectorModel,
    data: &DetectionDataset,
    protect: &dyn Fn(&Tensor) -> Result<Tensor>,
) -> Result<DetectionMetrics> {
    if data.is_empty() {
        return Err(Error::Contract("no detection samples to evaluate".into()));
    }
    let preds = detect_all(model, data, protect)?;
    Ok(detection_metrics(&preds, &data.ground_truth()))
}

/// Detections of `model` on `protect(image)` for every sample.
pub fn detect_all(
    model: &dyn DetectorModel,
    data: &DetectionDataset,
    protect: &dyn Fn(&Tensor) -> Result<Tensor>,
) -> Result<Vec<Vec<BoundingBox>>> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in indices.chunks(64) {
        let (images, _) = data.batch(chunk)?;
        preds.extend(model.detect(&protect(&images)?)?);
    }
    Ok(preds)
}

fn confident(dets: &[BoundingBox]) -> Vec<BoundingBox> {
    dets.iter()
        .filter(|b| b.confidence > PSEUDO_CONFIDENCE)
        .copied()
        .collect()
}

/// Replaces the ground truth of every sample by the model's own detections
/// with confidence strictly above 0.5 on the given images.
pub fn pseudo_ground_truth(
    model: &dyn DetectorModel,
    data: &DetectionDataset,
) -> Result<DetectionDataset> {
    let preds = detect_all(model, data, &|x| Ok(x.clone()))?;
    let samples = data
        .samples
        .iter()
        .zip(preds)
        .map(|(s, p)| DetectionSample {
            image: s.image.clone(),
            boxes: confident(&p),
            source: s.source.clone(),
        })
        .collect();
    Ok(DetectionDataset { samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Supervised training with Adam; returns the mean `L_cls + L_box` of every
/// epoch.
pub fn train_detector(
    detector: &dyn DetectorModel,
    data: &DetectionDataset,
    config: &DetectorTrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(detector.params().vars(), config.learning_rate, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let (images, gt) = data.batch(chunk)?;
            let (l_cls, l_box) = detector.loss(&images, &gt)?;
            let loss = (l_cls + l_box)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    round: epoch,
                    step: batches,
                    detail: "non-finite detection loss".into(),
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
