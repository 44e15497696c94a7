//! Adaptive attacks on protected captures: gallery re-enrollment, white-box
//! re-training of the extractor, and learned restoration.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::enhancer::{train_enhancer, EnhancerModel, EnhancerTrainConfig, FaceMask};
use crate::error::{Error, Result};
use crate::face::{
    closed_set_protocol, closed_set_protocol_with_gallery, train_extractor, ExtractorTrainConfig,
    FaceDataset, FeatureExtractor, HeadLoss, ProtocolConfig, ProtocolReport, ProxyHead,
    TinyExtractor,
};

/// Closed-set protocol with gallery templates captured by the same camera
/// as the queries.
pub fn reenroll_gallery(
    dataset: &FaceDataset,
    extractor: &dyn FeatureExtractor,
    capture: &dyn Fn(&Tensor) -> Result<Tensor>,
    protocol: &ProtocolConfig,
) -> Result<ProtocolReport> {
    closed_set_protocol_with_gallery(dataset, extractor, capture, capture, protocol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    Finetune,
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainLoss {
    Softmax,
    Arcface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub mode: RetrainMode,
    pub loss: RetrainLoss,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decayed_learning_rate: f64,
    /// Epochs completed before the learning rate decays.
    pub decay_after_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scale: f64,
    pub margin: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            mode: RetrainMode::Finetune,
            loss: RetrainLoss::Softmax,
            epochs: 20,
            learning_rate: 0.01,
            decayed_learning_rate: 0.001,
            decay_after_epoch: 15,
            momentum: 0.9,
            weight_decay: 5e-4,
            scale: 64.0,
            margin: 0.5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl RetrainConfig {
    /// Learning-rate schedule for full-size networks with normalization
    /// layers; the desk defaults are ten times lower.
    pub fn paper_scale() -> Self {
        Self {
            learning_rate: 0.1,
            decayed_learning_rate: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::config("margin", "must be >= 0"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("scale", "must be > 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        Ok(())
    }

    fn training(&self) -> ExtractorTrainConfig {
        ExtractorTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_after_epoch: Some(self.decay_after_epoch),
            decayed_learning_rate: self.decayed_learning_rate,
            loss: match self.loss {
                RetrainLoss::Softmax => HeadLoss::Softmax,
                RetrainLoss::Arcface => HeadLoss::ArcFace {
                    scale: self.scale,
                    margin: self.margin,
                },
            },
            seed: self.seed,
        }
    }
}

pub struct RetrainOutcome {
    pub extractor: TinyExtractor,
    pub report: ProtocolReport,
    pub epoch_losses: Vec<f64>,
    /// Protocol accuracy after every epoch.
    pub epoch_accuracies: Vec<f64>,
}

/// Re-trains an extractor on protected training faces and evaluates it with
/// the closed-set protocol on `eval` (already protected; both gallery and
/// queries pass through unchanged). Finetuning starts from `base`, scratch
/// training from a fresh initialization.
pub fn retrain_fr(
    base: &TinyExtractor,
    train: &FaceDataset,
    eval: &FaceDataset,
    config: &RetrainConfig,
    protocol: &ProtocolConfig,
) -> Result<RetrainOutcome> {
    let extractor = TinyExtractor::new(base.config(), config.seed.wrapping_add(1000))?;
    if config.mode == RetrainMode::Finetune {
        extractor.params().copy_from(base.params())?;
    }
    let head = ProxyHead::new(
        base.config().feature_dim,
        train.num_identities(),
        config.seed.wrapping_add(2000),
    )?;
    let identity = |x: &Tensor| Ok(x.clone());
    let mut epoch_accuracies = Vec::with_capacity(config.epochs);
    let epoch_losses = train_extractor(
        &extractor,
        &head,
        train,
        &config.training(),
        &mut |epoch, loss| {
            let acc = closed_set_protocol(eval, &extractor, &identity, protocol)?.mean_accuracy;
            log::debug!("retrain epoch {epoch}: loss {loss:.4}, accuracy {acc:.3}");
            epoch_accuracies.push(acc);
            Ok(())
        },
    )?;
    let report = closed_set_protocol(eval, &extractor, &identity, protocol)?;
    Ok(RetrainOutcome {
        extractor,
        report,
        epoch_losses,
        epoch_accuracies,
    })
}

pub struct RestorationOutcome {
    pub epoch_losses: Vec<f64>,
    pub report: ProtocolReport,
}

/// Trains `restorer` to map captured faces back to raw ones with plain MAE
/// (an all-ones mask), then runs the protocol with unprotected gallery and
/// restored captured queries.
pub fn train_restorer(
    restorer: &dyn EnhancerModel,
    train: &FaceDataset,
    eval: &FaceDataset,
    extractor: &dyn FeatureExtractor,
    capture: &dyn Fn(&Tensor) -> Result<Tensor>,
    config: &EnhancerTrainConfig,
    protocol: &ProtocolConfig,
) -> Result<RestorationOutcome> {
    let images: Vec<Tensor> = train.samples().iter().map(|s| s.image.clone()).collect();
    let masks: Vec<FaceMask> = images
        .iter()
        .map(|im| {
            let (_, h, w) = im.dims3()?;
            Ok(FaceMask::ones(h, w))
        })
        .collect::<Result<_>>()?;
    let epoch_losses = train_enhancer(restorer, &images, capture, &masks, config, &mut |_, _| Ok(()))?;
    let restore = |x: &Tensor| restorer.enhance(&capture(x)?);
    let report = closed_set_protocol(eval, extractor, &restore, protocol)?;
    Ok(RestorationOutcome {
        epoch_losses,
        report,
    })
}

/// One row per attacked model, one column per attack family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub model: String,
    pub finetune_softmax: Option<f64>,
    pub finetune_arcface: Option<f64>,
    pub scratch_softmax: Option<f64>,
    pub scratch_arcface: Option<f64>,
    pub restoration: Option<f64>,
}

impl AttackReport {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            finetune_softmax: None,
            finetune_arcface: None,
            scratch_softmax: None,
            scratch_arcface: None,
            restoration: None,
        }
    }

    pub fn set(&mut self, mode: RetrainMode, loss: RetrainLoss, accuracy: f64) {
        let slot = match (mode, loss) {
            (RetrainMode::Finetune, RetrainLoss::Softmax) => &mut self.finetune_softmax,
            (RetrainMode::Finetune, RetrainLoss::Arcface) => &mut self.finetune_arcface,
            (RetrainMode::Scratch, RetrainLoss::Softmax) => &mut self.scratch_softmax,
            (RetrainMode::Scratch, RetrainLoss::Arcface) => &mut self.scratch_arcface,
        };
        *slot = Some(accuracy);
    }

    /// Best accuracy over the re-training columns.
    pub fn best_retrain(&self) -> Option<f64> {
        [
            self.finetune_softmax,
            self.finetune_arcface,
            self.scratch_softmax,
            self.scratch_arcface,
        ]
        .into_iter()
        .flatten()
        .reduce(f64::max)
    }
}

pub fn write_attack_csv(rows: &[AttackReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model",
        "finetune-softmax",
        "finetune-arcface",
        "scratch-softmax",
        "scratch-arcface",
        "restoration",
    ])?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.model.clone(),
            cell(r.finetune_softmax),
            cell(r.finetune_arcface),
            cell(r.scratch_softmax),
            cell(r.scratch_arcface),
            cell(r.restoration),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
