//! Alternating three-player optimization of the ISP parameters against an
//! adaptive face-identification attacker, jointly with a person detector.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{BoundingBox, DetectionDataset, DetectorModel};
use crate::error::{Error, Result};
use crate::face::{ce_loss_tensor, ns_loss_tensor, FaceDataset, FeatureExtractor, ProxyHead};
use crate::isp::{params_from_json, params_to_json, IspParams, IspVars, DEFAULT_KNOTS};
use crate::nn::{scalar, Adam, MomentumSgd, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    ProtectorOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Attacker steps per round.
    pub m: usize,
    /// Protector steps per round.
    pub n: usize,
    /// Epochs; each is one pass over the faces in rounds of `m` attacker
    /// and `n` protector steps.
    pub maxiters: usize,
    pub omega: f64,
    pub lr_isp: f64,
    pub lr_extractor: f64,
    pub lr_detector: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_accuracy_threshold: f64,
    pub warmup_max_epochs: usize,
    /// Every `holdout_every`-th image of an identity is held out for the
    /// warmup accuracy check.
    pub holdout_every: usize,
    pub face_batch: usize,
    pub detection_batch: usize,
    pub knots: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    /// Desk-scale defaults sized for the synthetic benchmark on one CPU core.
    fn default() -> Self {
        Self {
            m: 1,
            n: 1,
            maxiters: 40,
            omega: 0.2,
            lr_isp: 1e-2,
            lr_extractor: 0.01,
            lr_detector: 1e-3,
            lr_head: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_accuracy_threshold: 0.9,
            warmup_max_epochs: 100,
            holdout_every: 5,
            face_batch: 32,
            detection_batch: 16,
            knots: DEFAULT_KNOTS,
            seed: 0,
            mode: TrainMode::Full,
        }
    }
}

impl TrainConfig {
    /// Learning rates, loss weight and duration used for full-size corpora
    /// and pretrained models.
    pub fn paper_scale() -> Self {
        Self {
            maxiters: 500,
            lr_isp: 1e-3,
            lr_extractor: 1e-1,
            lr_head: 1e-1,
            lr_detector: 1e-4,
            omega: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(key, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("m", self.m)?;
        positive("n", self.n)?;
        positive("face_batch", self.face_batch)?;
        positive("detection_batch", self.detection_batch)?;
        positive("holdout_every", self.holdout_every)?;
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::config("omega", format!("must be >= 0, got {}", self.omega)));
        }
        for (key, lr) in [
            ("lr_isp", self.lr_isp),
            ("lr_extractor", self.lr_extractor),
            ("lr_detector", self.lr_detector),
            ("lr_head", self.lr_head),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(key, format!("must be > 0, got {lr}")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_accuracy_threshold) {
            return Err(Error::config(
                "warmup_accuracy_threshold",
                "must lie in [0, 1]",
            ));
        }
        if self.knots < 2 {
            return Err(Error::config("knots", "need at least 2 knots"));
        }
        Ok(())
    }
}

/// Losses of one step; attacker steps fill `l_ce`, protector steps the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub round: usize,
    pub step: usize,
    pub l_ce: Option<f64>,
    pub l_ns: Option<f64>,
    pub l_cls: Option<f64>,
    pub l_box: Option<f64>,
}

pub fn write_history_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "step", "L_ce", "L_ns", "L_cls", "L_box"])?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in history {
        w.write_record([
            r.round.to_string(),
            r.step.to_string(),
            cell(r.l_ce),
            cell(r.l_ns),
            cell(r.l_cls),
            cell(r.l_box),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Endless reshuffled pass over `0..len`.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n.min(self.order.len()) {
            if self.pos >= self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// All trainable players plus optimizer state and the loss history.
pub struct TrainState<'a> {
    pub isp: IspVars,
    pub extractor: &'a dyn FeatureExtractor,
    pub head: &'a ProxyHead,
    pub detector: &'a dyn DetectorModel,
    pub round: usize,
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    pub warmed_up: bool,
    config: TrainConfig,
    opt_isp: Adam,
    opt_extractor: MomentumSgd,
    opt_head: MomentumSgd,
    opt_detector: MomentumSgd,
    rng: ChaCha8Rng,
    attack_faces: Sampler,
    protect_faces: Sampler,
    protect_scenes: Sampler,
}

fn extractor_params(extractor: &dyn FeatureExtractor) -> Result<&ParamStore> {
    extractor
        .trainable()
        .ok_or_else(|| Error::Contract("the attacker's extractor must be trainable".into()))
}

impl<'a> TrainState<'a> {
    /// Starts from the unmodified camera (identity CCM, tone curve inverting
    /// the de-gamma). The ISP
    /// parameters are held in double precision and cast per batch.
    pub fn new(
        config: &TrainConfig,
        extractor: &'a dyn FeatureExtractor,
        head: &'a ProxyHead,
        detector: &'a dyn DetectorModel,
        face_count: usize,
        scene_count: usize,
    ) -> Result<Self> {
        let isp = IspVars::new(&IspParams::neutral(config.knots), DType::F64)?;
        let f = extractor_params(extractor)?;
        Ok(Self {
            opt_isp: Adam::new(isp.vars(), config.lr_isp, 0.0)?,
            opt_extractor: MomentumSgd::new(
                f.vars(),
                config.lr_extractor,
                config.momentum,
                config.weight_decay,
            ),
            opt_head: MomentumSgd::new(
                head.params().vars(),
                config.lr_head,
                config.momentum,
                config.weight_decay,
            ),
            opt_detector: MomentumSgd::new(
                detector.params().vars(),
                config.lr_detector,
                config.momentum,
                0.0,
            ),
            isp,
            extractor,
            head,
            detector,
            round: 0,
            epoch: 0,
            history: Vec::new(),
            warmed_up: false,
            config: config.clone(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            attack_faces: Sampler::new(face_count),
            protect_faces: Sampler::new(face_count),
            protect_scenes: Sampler::new(scene_count),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> Result<IspParams> {
        self.isp.params()
    }

    fn head_logits(&self, images: &Tensor) -> Result<Tensor> {
        self.head.logits(&self.extractor.forward(images)?)
    }

    fn guard(&self, step: usize, name: &str, value: f64) -> Result<f64> {
        if value.is_finite() {
            return Ok(value);
        }
        let params = self
            .isp
            .params()
            .and_then(|p| params_to_json(&p))
            .unwrap_or_else(|e| format!("<unavailable: {e}>"));
        let last = self.history.last();
        Err(Error::Divergence {
            round: self.round,
            step,
            detail: format!("{name} = {value}; last losses {last:?}; isp params {params}"),
        })
    }

    /// Clean-image cross-entropy epochs over `train` until the proxy
    /// accuracy on `heldout` reaches the threshold. Returns the accuracy of
    /// every epoch.
    pub fn warmup(&mut self, train: &FaceDataset, heldout: &FaceDataset) -> Result<Vec<f64>> {
        let mut accuracies = Vec::new();
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..self.config.warmup_max_epochs.max(1) {
            order.shuffle(&mut self.rng);
            for (step, chunk) in order.chunks(self.config.face_batch).enumerate() {
                let (images, labels) = train.batch(chunk)?;
                let loss = ce_loss_tensor(&self.head_logits(&images)?, &labels)?;
                self.guard(step, "warmup L_ce", scalar(&loss)?)?;
                let grads = loss.backward()?;
                self.opt_extractor.step(&grads)?;
                self.opt_head.step(&grads)?;
            }
            let acc = crate::face::head_accuracy(self.extractor, self.head, heldout, &|x| {
                Ok(x.clone())
            })?;
            log::debug!("warmup epoch {epoch}: held-out accuracy {acc:.3}");
            accuracies.push(acc);
            if acc >= self.config.warmup_accuracy_threshold {
                self.warmed_up = true;
                return Ok(accuracies);
            }
        }
        Err(Error::WarmupFailed {
            threshold: self.config.warmup_accuracy_threshold,
            best: accuracies.iter().copied().fold(0.0, f64::max),
        })
    }

    /// One update of the extractor and head on captured faces; the ISP
    /// parameters only enter through a detached capture.
    pub fn attacker_step(&mut self, images: &Tensor, labels: &[u32]) -> Result<f64> {
        let captured = self.isp.capture(images)?.detach();
        let loss = ce_loss_tensor(&self.head_logits(&captured)?, labels)?;
        let step = self.history.len();
        let value = self.guard(step, "L_ce", scalar(&loss)?)?;
        let grads = loss.backward()?;
        self.opt_extractor.step(&grads)?;
        self.opt_head.step(&grads)?;
        self.history.push(LossRecord {
            round: self.round,
            step,
            l_ce: Some(value),
            l_ns: None,
            l_cls: None,
            l_box: None,
        });
        Ok(value)
    }

    fn protector_losses(
        &self,
        faces: (&Tensor, &[u32]),
        scenes: (&Tensor, &[Vec<BoundingBox>]),
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let logits = self.head_logits(&self.isp.capture(faces.0)?)?;
        let l_ns = ns_loss_tensor(&logits, faces.1)?;
        let (l_cls, l_box) = self.detector.loss(&self.isp.capture(scenes.0)?, scenes.1)?;
        Ok((l_ns, l_cls, l_box))
    }

    /// Gradient of `L_ns + omega * L_det` with respect to the CCM (row-major)
    /// and the knot outputs.
    pub fn isp_gradient(
        &self,
        faces: (&Tensor, &[u32]),
        scenes: (&Tensor, &[Vec<BoundingBox>]),
        omega: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (l_ns, l_cls, l_box) = self.protector_losses(faces, scenes)?;
        let total = (l_ns + ((l_cls + l_box)? * omega)?)?;
        let grads = total.backward()?;
        let flat = |v: &candle_core::Var| -> Result<Vec<f64>> {
            match grads.get(v) {
                Some(g) => Ok(g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?),
                None => Ok(vec![0.0; v.elem_count()]),
            }
        };
        Ok((flat(self.isp.ccm())?, flat(self.isp.gamma())?))
    }

    /// Updates the ISP parameters on `L_ns + omega * L_det` and the detector
    /// on `L_det`, then projects the knot outputs into `[0, 1]`.
    pub fn protector_step(
        &mut self,
        faces: (&Tensor, &[u32]),
        scenes: (&Tensor, &[Vec<BoundingBox>]),
        omega: f64,
    ) -> Result<(f64, f64, f64)> {
        let (l_ns, l_cls, l_box) = self.protector_losses(faces, scenes)?;
        let step = self.history.len();
        let ns = self.guard(step, "L_ns", scalar(&l_ns)?)?;
        let cls = self.guard(step, "L_cls", scalar(&l_cls)?)?;
        let bx = self.guard(step, "L_box", scalar(&l_box)?)?;
        let l_det = (l_cls + l_box)?;
        let total = (&l_ns + (&l_det * omega)?)?;
        let isp_grads = total.backward()?;
        let det_grads = l_det.backward()?;
        self.opt_isp.step(&isp_grads)?;
        self.opt_detector.step(&det_grads)?;
        self.isp.project()?;
        self.history.push(LossRecord {
            round: self.round,
            step,
            l_ce: None,
            l_ns: Some(ns),
            l_cls: Some(cls),
            l_box: Some(bx),
        });
        Ok((ns, cls, bx))
    }

    /// One round: `m` attacker steps (skipped in protector-only mode) then
    /// `n` protector steps, each on independently sampled batches.
    pub fn round(&mut self, faces: &FaceDataset, scenes: &DetectionDataset) -> Result<()> {
        if self.config.mode == TrainMode::Full {
            for _ in 0..self.config.m {
                let idx = self.attack_faces.next(self.config.face_batch, &mut self.rng);
                let (x, y) = faces.batch(&idx)?;
                self.attacker_step(&x, &y)?;
            }
        }
        for _ in 0..self.config.n {
            let fi = self.protect_faces.next(self.config.face_batch, &mut self.rng);
            let si = self.protect_scenes.next(self.config.detection_batch, &mut self.rng);
            let (fx, fy) = faces.batch(&fi)?;
            let (sx, sy) = scenes.batch(&si)?;
            self.protector_step((&fx, &fy), (&sx, &sy), self.config.omega)?;
        }
        self.round += 1;
        Ok(())
    }

    /// One pass over the faces: as many rounds as there are face batches.
    pub fn epoch(&mut self, faces: &FaceDataset, scenes: &DetectionDataset) -> Result<()> {
        for _ in 0..faces.len().div_ceil(self.config.face_batch) {
            self.round(faces, scenes)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Writes ISP parameters, every model's weights and the counters.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::isp::export_params(&self.isp.params()?, dir.join("isp.json"))?;
        extractor_params(self.extractor)?.save(dir.join("extractor.safetensors"))?;
        self.head.params().save(dir.join("head.safetensors"))?;
        self.detector.params().save(dir.join("detector.safetensors"))?;
        let meta = Checkpoint {
            round: self.round,
            epoch: self.epoch,
            warmed_up: self.warmed_up,
            config: self.config.clone(),
        };
        let text = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Contract(format!("checkpoint metadata: {e}")))?;
        let path = dir.join("state.json");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Restores a checkpoint written by [`save_checkpoint`](Self::save_checkpoint).
    /// Optimizer moments are not stored and restart from zero.
    pub fn load_checkpoint(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let path = dir.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        let isp_path = dir.join("isp.json");
        let isp_text = fs::read_to_string(&isp_path).map_err(|e| Error::io(&isp_path, e))?;
        self.isp.set_params(&params_from_json(&isp_text)?)?;
        extractor_params(self.extractor)?.load(dir.join("extractor.safetensors"))?;
        self.head.params().load(dir.join("head.safetensors"))?;
        self.detector.params().load(dir.join("detector.safetensors"))?;
        self.round = meta.round;
        self.epoch = meta.epoch;
        self.warmed_up = meta.warmed_up;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    round: usize,
    epoch: usize,
    warmed_up: bool,
    config: TrainConfig,
}

/// Splits off every `every`-th image of each identity (at least one image
/// stays in training).
pub fn split_holdout(data: &FaceDataset, every: usize) -> Result<(FaceDataset, FaceDataset)> {
    let mut rank = vec![0usize; data.len()];
    for group in data.by_identity() {
        for (r, &i) in group.iter().enumerate() {
            rank[i] = r;
        }
    }
    let every = every.max(2);
    let held = |i: usize| rank[i] % every == every - 1;
    let train = data.filter(|i, _| !held(i))?;
    let heldout = data.filter(|i, _| held(i))?;
    Ok((train, heldout))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: IspParams,
    pub history: Vec<LossRecord>,
    pub warmup_accuracies: Vec<f64>,
}

/// Warmup followed by `maxiters` epochs. The extractor, head and detector
/// are trained in place.
pub fn run(
    config: &TrainConfig,
    faces: &FaceDataset,
    scenes: &DetectionDataset,
    extractor: &dyn FeatureExtractor,
    head: &ProxyHead,
    detector: &dyn DetectorModel,
) -> Result<RunOutput> {
    config.validate()?;
    let (train, heldout) = split_holdout(faces, config.holdout_every)?;
    let mut state = TrainState::new(config, extractor, head, detector, faces.len(), scenes.len())?;
    let warmup_accuracies = state.warmup(&train, &heldout)?;
    for _ in 0..config.maxiters {
        state.epoch(faces, scenes)?;
        if let Some(r) = state.history.last() {
            log::debug!("epoch {}: last losses {:?}", state.epoch, r);
        }
    }
    Ok(RunOutput {
        params: state.params()?,
        history: state.history,
        warmup_accuracies,
    })
}
