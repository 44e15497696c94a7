use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, ExperimentKind};
use super::ingest::{ingest_detection_manifest, ingest_face_dataset};
use super::results::{append_results, ResultsRow};
use crate::attacks::{train_restorer, write_attack_csv, AttackReport, RetrainConfig, RetrainLoss, RetrainMode};
use crate::benchmark::{Benchmark, Corpora, SceneCorpus};
use crate::detection::{DetectionMetrics, DetectorModel, TinyDetector};
use crate::enhancer::{train_enhancer, EnhancerModel, UNet};
use crate::error::{Error, Result};
use crate::evaluation::{
    export_features, iqa, masked_out_mean, masked_psnr, mark_pareto, preliminary_inversion_analysis,
    tradeoff_sweep, write_sweep_csv, write_sweep_svg, IqaReport, SweepPoint,
};
use crate::image::{Domain, ImageTensor};
use crate::isp::{export_params, import_params, IspParams};
use crate::synth::{synth_scenes, FaceGenerator};
use crate::trainer::write_history_csv;

/// What a finished run left on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub config_sha256: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub versions: Vec<(String, String)>,
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<String>,
}

pub struct RunSummary {
    pub output: PathBuf,
    pub manifest: RunManifest,
    pub rows: Vec<ResultsRow>,
}

/// Held while an experiment writes into its output directory.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Contract(format!(
                    "{} is in use by another experiment (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                )),
                _ => Error::io(&path, e),
            })?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn module_versions() -> Vec<(String, String)> {
    let v = env!("CARGO_PKG_VERSION");
    [
        "isp",
        "face",
        "detection",
        "trainer",
        "enhancer",
        "evaluation",
        "attacks",
        "workbench",
    ]
    .iter()
    .map(|m| (m.to_string(), v.to_string()))
    .collect()
}

/// Accumulates rows sharing the experiment id and timestamp.
struct Rows {
    id: String,
    timestamp: String,
    dataset: String,
    model: String,
    rows: Vec<ResultsRow>,
}

impl Rows {
    fn push(&mut self, metric: &str, value: f64, method: &str) {
        self.rows.push(ResultsRow {
            experiment_id: self.id.clone(),
            timestamp: self.timestamp.clone(),
            metric: metric.to_string(),
            value,
            method: method.to_string(),
            dataset: self.dataset.clone(),
            model: self.model.clone(),
        });
    }

    fn iqa(&mut self, r: &IqaReport, method: &str) {
        self.push("rmse", r.rmse, method);
        self.push("psnr", r.psnr, method);
        self.push("ssim", r.ssim, method);
        self.push("ms_ssim", r.ms_ssim, method);
    }

    fn detection(&mut self, m: &DetectionMetrics, method: &str) {
        self.push("ap", m.ap, method);
        self.push("ap50", m.ap50, method);
        self.push("ap75", m.ap75, method);
        self.push("precision", m.precision, method);
        self.push("recall", m.recall, method);
    }
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    out: &'a Path,
    rows: Rows,
    artifacts: Vec<String>,
}

impl Context<'_> {
    fn artifact(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.out.join(name)
    }

    fn params(&self) -> Result<IspParams> {
        match &self.config.data.params {
            Some(p) => import_params(p),
            None => Ok(IspParams::neutral(self.config.train.knots.max(2))),
        }
    }

    /// Ingested corpora where paths are given, synthetic ones otherwise.
    fn corpora(&self) -> Result<Corpora> {
        let data = &self.config.data;
        let cfg = &self.config.benchmark;
        let (faces_train, faces_test) = match &data.faces {
            Some(p) => {
                let train = ingest_face_dataset(p)?.0;
                let test = match &data.faces_test {
                    Some(t) => ingest_face_dataset(t)?.0,
                    None => train.clone(),
                };
                (train, test)
            }
            None => {
                let generator = FaceGenerator::new(cfg.faces.clone())?;
                (
                    generator.dataset(cfg.faces.images_per_identity, cfg.seed)?,
                    generator.dataset(cfg.test_images_per_identity, cfg.seed.wrapping_add(1))?,
                )
            }
        };
        let (train_scenes, test_scenes) = match &data.detection {
            Some(p) => {
                let train = ingest_detection_manifest(p)?.0;
                let test = match &data.detection_test {
                    Some(t) => ingest_detection_manifest(t)?.0,
                    None => train.clone(),
                };
                (train, test)
            }
            None => (
                synth_scenes(&cfg.train_scenes)?.into(),
                synth_scenes(&cfg.test_scenes)?.into(),
            ),
        };
        Ok(Corpora {
            faces_train,
            faces_test,
            train_scenes,
            test_scenes,
        })
    }

    fn benchmark(&self) -> Result<Benchmark> {
        Benchmark::from_corpora(self.config.benchmark.clone(), self.corpora()?)
    }

    /// The detector trained alongside the parameters when one is given,
    /// otherwise the pretrained one.
    fn deployed_detector(&self, bench: &Benchmark) -> Result<TinyDetector> {
        let det = bench.detector_copy(self.config.seed)?;
        if let Some(p) = &self.config.data.detector {
            det.params().load(p)?;
        }
        Ok(det)
    }
}

fn scene_images(corpus: &SceneCorpus) -> Result<ImageTensor> {
    let images: Vec<&Tensor> = corpus.detection.samples.iter().map(|s| &s.image).collect();
    ImageTensor::new(Tensor::stack(&images, 0)?, Domain::Srgb)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if p.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Mean report over file pairs with the same name in both directories.
fn directory_iqa(test: &Path, reference: &Path) -> Result<IqaReport> {
    let files = image_files(reference)?;
    if files.is_empty() {
        return Err(Error::Degenerate(format!("no images in {}", reference.display())));
    }
    let mut sum = IqaReport { rmse: 0.0, psnr: 0.0, ssim: 0.0, ms_ssim: 0.0 };
    for r in &files {
        let t = test.join(r.file_name().unwrap_or_default());
        let rep = iqa(&ImageTensor::load(&t)?, &ImageTensor::load(r)?)
            .map_err(|e| Error::Contract(format!("{}: {e}", t.display())))?;
        sum.rmse += rep.rmse;
        sum.psnr += rep.psnr;
        sum.ssim += rep.ssim;
        sum.ms_ssim += rep.ms_ssim;
    }
    let n = files.len() as f64;
    Ok(IqaReport {
        rmse: sum.rmse / n,
        psnr: sum.psnr / n,
        ssim: sum.ssim / n,
        ms_ssim: sum.ms_ssim / n,
    })
}

fn simulate(cx: &mut Context) -> Result<()> {
    let params = cx.params()?;
    let corpora = cx.corpora()?;
    let raw = scene_images(&corpora.test_scenes)?;
    let captured = ImageTensor::new(params.capture(raw.values())?, Domain::Srgb)?;
    let dir = cx.artifact("captured");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, s) in corpora.test_scenes.detection.samples.iter().enumerate() {
        let stem = Path::new(&s.source)
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("{i:05}"));
        captured.save(i, dir.join(format!("{stem}.png")))?;
    }
    let report = iqa(&captured, &raw)?;
    cx.rows.iqa(&report, "captured");
    Ok(())
}

fn train_isp(cx: &mut Context) -> Result<()> {
    let bench = cx.benchmark()?;
    let (out, detector) = bench.train_isp(&cx.config.train)?;
    export_params(&out.params, cx.artifact("isp.json"))?;
    write_history_csv(&out.history, cx.artifact("history.csv"))?;
    detector.params().save(cx.artifact("detector.safetensors"))?;
    cx.rows.push("accuracy", bench.clean_accuracy.mean_accuracy, "raw");
    cx.rows.push("accuracy", bench.protected_accuracy(&out.params)?.mean_accuracy, "captured");
    cx.rows.detection(&bench.clean_detection, "raw");
    cx.rows.detection(&bench.protected_detection(&detector, &out.params)?, "captured");
    if let Some(a) = out.warmup_accuracies.last() {
        cx.rows.push("warmup_accuracy", *a, "captured");
    }
    Ok(())
}

fn train_enhancer_kind(cx: &mut Context) -> Result<()> {
    let params = cx.params()?;
    let corpora = cx.corpora()?;
    let capture = |x: &Tensor| params.capture(x);
    let model = UNet::new(cx.config.unet.clone(), cx.config.seed)?;
    let images: Vec<Tensor> = corpora.train_scenes.detection.samples.iter().map(|s| s.image.clone()).collect();
    let losses = train_enhancer(
        &model,
        &images,
        &capture,
        &corpora.train_scenes.masks,
        &cx.config.enhancer,
        &mut |epoch, loss| {
            log::debug!("enhancer epoch {epoch}: {loss:.5}");
            Ok(())
        },
    )?;
    model.params().save(cx.artifact("enhancer.safetensors"))?;
    let raw = scene_images(&corpora.test_scenes)?;
    let captured = ImageTensor::new(capture(raw.values())?, Domain::Srgb)?;
    let enhanced = crate::enhancer::enhance(&model, &captured)?;
    let masks = &corpora.test_scenes.masks;
    cx.rows.push("masked_psnr", masked_psnr(&captured, &raw, masks)?, "captured");
    cx.rows.push("masked_psnr", masked_psnr(&enhanced, &raw, masks)?, "enhanced");
    cx.rows.push("face_mean", masked_out_mean(&enhanced, masks)?, "enhanced");
    if let Some(l) = losses.last() {
        cx.rows.push("train_loss", *l, "enhanced");
    }
    Ok(())
}

fn eval_afr(cx: &mut Context) -> Result<()> {
    let params = cx.params()?;
    let bench = cx.benchmark()?;
    cx.rows.push("accuracy", bench.clean_accuracy.mean_accuracy, "raw");
    cx.rows.push("accuracy", bench.protected_accuracy(&params)?.mean_accuracy, "captured");
    cx.rows.push("accuracy", bench.reenroll(&params)?.mean_accuracy, "re-enroll");
    export_features(
        &bench.extractor,
        &bench.faces_test,
        &|x| params.capture(x),
        cx.artifact("features.csv"),
    )?;
    Ok(())
}

fn eval_utility(cx: &mut Context) -> Result<()> {
    let params = cx.params()?;
    let bench = cx.benchmark()?;
    let detector = cx.deployed_detector(&bench)?;
    cx.rows.detection(&bench.clean_detection, "raw");
    cx.rows.detection(&bench.protected_detection(&detector, &params)?, "captured");
    Ok(())
}

fn eval_iqa(cx: &mut Context) -> Result<()> {
    let data = &cx.config.data;
    let report = match (&data.test_images, &data.reference_images) {
        (Some(t), Some(r)) => directory_iqa(t, r)?,
        _ => {
            let params = cx.params()?;
            let raw = scene_images(&cx.corpora()?.test_scenes)?;
            iqa(&ImageTensor::new(params.capture(raw.values())?, Domain::Srgb)?, &raw)?
        }
    };
    cx.rows.iqa(&report, "captured");
    Ok(())
}

fn attack(cx: &mut Context) -> Result<()> {
    let params = cx.params()?;
    let bench = cx.benchmark()?;
    let protocol = &cx.config.benchmark.protocol;
    cx.rows.push("accuracy", bench.clean_accuracy.mean_accuracy, "raw");
    cx.rows.push("accuracy", bench.protected_accuracy(&params)?.mean_accuracy, "captured");
    cx.rows.push("accuracy", bench.reenroll(&params)?.mean_accuracy, "re-enroll");
    let mut report = AttackReport::new(cx.rows.model.clone());
    for mode in [RetrainMode::Finetune, RetrainMode::Scratch] {
        for loss in [RetrainLoss::Softmax, RetrainLoss::Arcface] {
            let cfg = RetrainConfig {
                mode,
                loss,
                ..cx.config.retrain.clone()
            };
            let acc = bench.retrain(&params, &cfg)?.report.mean_accuracy;
            report.set(mode, loss, acc);
            let method = format!(
                "{}-{}",
                if mode == RetrainMode::Finetune { "finetune" } else { "scratch" },
                if loss == RetrainLoss::Softmax { "softmax" } else { "arcface" }
            );
            cx.rows.push("accuracy", acc, &method);
        }
    }
    let restorer = UNet::new(cx.config.unet.clone(), cx.config.seed.wrapping_add(1))?;
    let restored = train_restorer(
        &restorer,
        &bench.faces_train,
        &bench.faces_test,
        &bench.extractor,
        &|x| params.capture(x),
        &cx.config.enhancer,
        protocol,
    )?;
    report.restoration = Some(restored.report.mean_accuracy);
    cx.rows.push("accuracy", restored.report.mean_accuracy, "restoration");
    write_attack_csv(&[report], cx.artifact("attack.csv"))?;
    Ok(())
}

fn sweep(cx: &mut Context) -> Result<()> {
    let bench = cx.benchmark()?;
    let mut points = vec![SweepPoint::new(
        "raw",
        "",
        bench.clean_accuracy.mean_accuracy,
        bench.clean_detection.ap,
    )];
    points.extend(tradeoff_sweep(&cx.config.sweep.baselines, &mut |b| {
        let t = |x: &Tensor| b.apply(x);
        Ok(SweepPoint::new(
            b.label(),
            b.parameter(),
            bench.privacy(&t)?.mean_accuracy,
            bench.adapted_detection(&t)?.ap,
        ))
    })?);
    points.extend(tradeoff_sweep(&cx.config.sweep.omegas, &mut |&omega| {
        let train = crate::trainer::TrainConfig {
            omega,
            ..cx.config.train.clone()
        };
        let (out, detector) = bench.train_isp(&train)?;
        Ok(SweepPoint::new(
            "isp",
            omega.to_string(),
            bench.protected_accuracy(&out.params)?.mean_accuracy,
            bench.protected_detection(&detector, &out.params)?.ap,
        ))
    })?);
    mark_pareto(&mut points);
    for p in &points {
        let method = if p.parameter.is_empty() {
            p.method.clone()
        } else {
            format!("{}:{}", p.method, p.parameter)
        };
        cx.rows.push("accuracy", p.privacy_accuracy, &method);
        cx.rows.push("ap", p.utility_ap, &method);
    }
    write_sweep_csv(&points, cx.artifact("sweep.csv"))?;
    write_sweep_svg(&points, cx.artifact("sweep.svg"))?;
    Ok(())
}

fn export_kind(cx: &mut Context) -> Result<()> {
    let params = cx.params()?;
    params.validate()?;
    export_params(&params, cx.artifact("isp.json"))?;
    cx.rows.push("knots", params.gamma.knots() as f64, "captured");
    Ok(())
}

fn preliminary(cx: &mut Context) -> Result<()> {
    let bench = cx.benchmark()?;
    let r = preliminary_inversion_analysis(
        &bench.faces_test,
        &bench.extractor,
        &bench.detector,
        &bench.test_scenes.detection,
    )?;
    cx.rows.push("mean_similarity", r.mean_similarity, "inverted");
    cx.rows.push("same_identity_rate", r.same_identity_rate, "inverted");
    cx.rows.push("miss_rate", r.miss_rate, "inverted");
    Ok(())
}

fn hash_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Runs a validated experiment. Writes `config.toml`, `results.csv`
/// (appended), kind-specific artifacts and `manifest.json` into the output
/// directory, which is locked for the duration.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let out = config.output.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let _lock = DirLock::acquire(&out)?;
    let started = chrono::Utc::now().to_rfc3339();
    let text = config.to_toml()?;
    let config_sha256 = hash_hex(&text);
    let experiment_id = config_sha256[..16].to_string();
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, &text).map_err(|e| Error::io(&config_path, e))?;
    let dataset = if config.data.faces.is_some() || config.data.detection.is_some() {
        "ingested"
    } else {
        "synthetic"
    };
    let mut cx = Context {
        config,
        out: &out,
        rows: Rows {
            id: experiment_id.clone(),
            timestamp: started.clone(),
            dataset: dataset.into(),
            model: "tiny".into(),
            rows: Vec::new(),
        },
        artifacts: vec!["config.toml".into(), "results.csv".into()],
    };
    log::info!("{} experiment {experiment_id} into {}", config.kind, out.display());
    let outcome = match config.kind {
        ExperimentKind::Simulate => simulate(&mut cx),
        ExperimentKind::TrainIsp => train_isp(&mut cx),
        ExperimentKind::TrainEnhancer => train_enhancer_kind(&mut cx),
        ExperimentKind::EvalAfr => eval_afr(&mut cx),
        ExperimentKind::EvalUtility => eval_utility(&mut cx),
        ExperimentKind::EvalIqa => eval_iqa(&mut cx),
        ExperimentKind::Attack => attack(&mut cx),
        ExperimentKind::Sweep => sweep(&mut cx),
        ExperimentKind::ExportParams => export_kind(&mut cx),
        ExperimentKind::Preliminary => preliminary(&mut cx),
    };
    outcome.map_err(|e| Error::Contract(format!("{} experiment {experiment_id}: {e}", config.kind)))?;
    append_results(out.join("results.csv"), &cx.rows.rows)?;
    cx.artifacts.push("manifest.json".into());
    let manifest = RunManifest {
        experiment_id,
        config_sha256,
        kind: config.kind,
        seed: config.seed,
        versions: module_versions(),
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        artifacts: cx.artifacts,
    };
    let manifest_path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Contract(format!("manifest serialization: {e}")))?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    let rows = cx.rows.rows;
    Ok(RunSummary {
        output: out.clone(),
        manifest,
        rows,
    })
}
