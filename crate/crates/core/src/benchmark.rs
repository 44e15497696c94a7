//! A complete evaluation setting: face and scene corpora, a clean-trained
//! extractor standing in for a deployed FR system, and a detector pretrained
//! on raw scenes. Built from the synthetic generator or from ingested data.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attacks::{reenroll_gallery, retrain_fr, RetrainConfig, RetrainOutcome};
use crate::detection::{
    evaluate_detection, pseudo_ground_truth, train_detector, DetectionDataset, DetectionMetrics,
    DetectorModel, DetectorTrainConfig, TinyDetector, TinyDetectorConfig,
};
use crate::enhancer::{build_mask, FaceMask};
use crate::error::Result;
use crate::face::{
    closed_set_protocol, train_extractor, ExtractorTrainConfig, FaceDataset, ProtocolConfig,
    ProtocolReport, ProxyHead, TinyExtractor, TinyExtractorConfig,
};
use crate::isp::IspParams;
use crate::synth::{synth_scenes, FaceGenerator, FaceSynthConfig, SceneSet, SceneSynthConfig};
use crate::trainer::{run, RunOutput, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub faces: FaceSynthConfig,
    pub test_images_per_identity: usize,
    pub train_scenes: SceneSynthConfig,
    pub test_scenes: SceneSynthConfig,
    pub extractor: TinyExtractorConfig,
    pub extractor_training: ExtractorTrainConfig,
    pub detector: TinyDetectorConfig,
    pub detector_training: DetectorTrainConfig,
    /// Detector adaptation to a transformed camera before utility scoring.
    pub detector_finetune: DetectorTrainConfig,
    pub protocol: ProtocolConfig,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            faces: FaceSynthConfig::default(),
            test_images_per_identity: 10,
            train_scenes: SceneSynthConfig {
                scenes: 640,
                ..Default::default()
            },
            test_scenes: SceneSynthConfig {
                scenes: 160,
                seed: 1,
                ..Default::default()
            },
            extractor: TinyExtractorConfig::default(),
            extractor_training: ExtractorTrainConfig::default(),
            detector: TinyDetectorConfig::default(),
            detector_training: DetectorTrainConfig {
                epochs: 30,
                ..Default::default()
            },
            detector_finetune: DetectorTrainConfig {
                epochs: 5,
                learning_rate: 1e-3,
                ..Default::default()
            },
            protocol: ProtocolConfig::default(),
            seed: 0,
        }
    }
}

/// Scenes with one face mask per image.
#[derive(Debug, Clone)]
pub struct SceneCorpus {
    pub detection: DetectionDataset,
    pub masks: Vec<FaceMask>,
}

impl From<SceneSet> for SceneCorpus {
    fn from(set: SceneSet) -> Self {
        let masks = set
            .detection
            .samples
            .iter()
            .zip(&set.face_boxes)
            .map(|(s, faces)| {
                let (_, h, w) = s.image.dims3().expect("scene images are 3-D");
                build_mask(h, w, faces)
            })
            .collect();
        Self {
            detection: set.detection,
            masks,
        }
    }
}

/// Face and scene data of a benchmark, before any model is trained.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub faces_train: FaceDataset,
    pub faces_test: FaceDataset,
    pub train_scenes: SceneCorpus,
    pub test_scenes: SceneCorpus,
}

impl Corpora {
    pub fn synthetic(config: &BenchmarkConfig) -> Result<Self> {
        let generator = FaceGenerator::new(config.faces.clone())?;
        Ok(Self {
            faces_train: generator.dataset(config.faces.images_per_identity, config.seed)?,
            faces_test: generator
                .dataset(config.test_images_per_identity, config.seed.wrapping_add(1))?,
            train_scenes: synth_scenes(&config.train_scenes)?.into(),
            test_scenes: synth_scenes(&config.test_scenes)?.into(),
        })
    }
}

pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub faces_train: FaceDataset,
    pub faces_test: FaceDataset,
    pub train_scenes: SceneCorpus,
    pub test_scenes: SceneCorpus,
    pub extractor: TinyExtractor,
    pub detector: TinyDetector,
    /// Training scenes labeled by the pretrained detector on raw images.
    pub pseudo_scenes: DetectionDataset,
    pub clean_accuracy: ProtocolReport,
    pub clean_detection: DetectionMetrics,
}

fn identity(x: &Tensor) -> Result<Tensor> {
    Ok(x.clone())
}

impl Benchmark {
    /// Everything generated from the synthetic corpora in `config`.
    pub fn synthetic(config: BenchmarkConfig) -> Result<Self> {
        let corpora = Corpora::synthetic(&config)?;
        Self::from_corpora(config, corpora)
    }

    /// Trains the clean extractor and the detector on the given corpora.
    pub fn from_corpora(config: BenchmarkConfig, corpora: Corpora) -> Result<Self> {
        let Corpora {
            faces_train,
            faces_test,
            train_scenes,
            test_scenes,
        } = corpora;
        let extractor = TinyExtractor::new(config.extractor, config.seed.wrapping_add(10))?;
        let head = ProxyHead::new(
            config.extractor.feature_dim,
            faces_train.num_identities(),
            config.seed.wrapping_add(11),
        )?;
        train_extractor(
            &extractor,
            &head,
            &faces_train,
            &config.extractor_training,
            &mut |_, _| Ok(()),
        )?;
        let detector = TinyDetector::new(config.detector, config.seed.wrapping_add(12))?;
        train_detector(
            &detector,
            &train_scenes.detection,
            &config.detector_training,
            &mut |_, _| Ok(()),
        )?;
        let pseudo_scenes = pseudo_ground_truth(&detector, &train_scenes.detection)?;
        let clean_accuracy =
            closed_set_protocol(&faces_test, &extractor, &identity, &config.protocol)?;
        let clean_detection = evaluate_detection(&detector, &test_scenes.detection, &identity)?;
        log::info!(
            "benchmark ready: clean accuracy {:.3}, clean AP {:.3}",
            clean_accuracy.mean_accuracy,
            clean_detection.ap
        );
        Ok(Self {
            config,
            faces_train,
            faces_test,
            train_scenes,
            test_scenes,
            extractor,
            detector,
            pseudo_scenes,
            clean_accuracy,
            clean_detection,
        })
    }

    /// A copy of the pretrained detector.
    pub fn detector_copy(&self, seed: u64) -> Result<TinyDetector> {
        let detector = TinyDetector::new(self.config.detector, seed)?;
        detector.params().copy_from(self.detector.params())?;
        Ok(detector)
    }

    /// Adversarial ISP training with a fresh attacker and a copy of the
    /// pretrained detector, which is returned finetuned.
    pub fn train_isp(&self, train: &TrainConfig) -> Result<(RunOutput, TinyDetector)> {
        let extractor = TinyExtractor::new(self.config.extractor, train.seed.wrapping_add(20))?;
        let head = ProxyHead::new(
            self.config.extractor.feature_dim,
            self.faces_train.num_identities(),
            train.seed.wrapping_add(21),
        )?;
        let detector = self.detector_copy(train.seed.wrapping_add(22))?;
        let out = run(
            train,
            &self.faces_train,
            &self.pseudo_scenes,
            &extractor,
            &head,
            &detector,
        )?;
        Ok((out, detector))
    }

    /// Raw gallery, transformed queries, clean-trained extractor.
    pub fn privacy(&self, transform: &dyn Fn(&Tensor) -> Result<Tensor>) -> Result<ProtocolReport> {
        closed_set_protocol(&self.faces_test, &self.extractor, transform, &self.config.protocol)
    }

    pub fn protected_accuracy(&self, params: &IspParams) -> Result<ProtocolReport> {
        self.privacy(&|x| params.capture(x))
    }

    /// `detector` on transformed test scenes against their true boxes.
    pub fn detection(
        &self,
        detector: &dyn DetectorModel,
        transform: &dyn Fn(&Tensor) -> Result<Tensor>,
    ) -> Result<DetectionMetrics> {
        evaluate_detection(detector, &self.test_scenes.detection, transform)
    }

    pub fn protected_detection(
        &self,
        detector: &dyn DetectorModel,
        params: &IspParams,
    ) -> Result<DetectionMetrics> {
        self.detection(detector, &|x| params.capture(x))
    }

    /// Finetunes a copy of the pretrained detector on transformed training
    /// scenes (pseudo labels) and scores it on transformed test scenes.
    pub fn adapted_detection(
        &self,
        transform: &dyn Fn(&Tensor) -> Result<Tensor>,
    ) -> Result<DetectionMetrics> {
        let detector = self.detector_copy(self.config.seed.wrapping_add(30))?;
        let train = self.pseudo_scenes.map_images(transform)?;
        train_detector(&detector, &train, &self.config.detector_finetune, &mut |_, _| Ok(()))?;
        self.detection(&detector, transform)
    }

    pub fn reenroll(&self, params: &IspParams) -> Result<ProtocolReport> {
        reenroll_gallery(
            &self.faces_test,
            &self.extractor,
            &|x| params.capture(x),
            &self.config.protocol,
        )
    }

    /// White-box re-training on captured training faces, scored on captured
    /// test faces.
    pub fn retrain(&self, params: &IspParams, config: &RetrainConfig) -> Result<RetrainOutcome> {
        let capture = |x: &Tensor| params.capture(x);
        let train = self.faces_train.map_images(&capture)?;
        let test = self.faces_test.map_images(&capture)?;
        retrain_fr(&self.extractor, &train, &test, config, &self.config.protocol)
    }
}
