//! Every worked example of the operation contracts, evaluated through the
//! public API against hand-computed values.

use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, ensure, Result};
use candle_core::{DType, Device, Tensor, Var};
use ispshield_core::attacks::{reenroll_gallery, retrain_fr, train_restorer, RetrainConfig, RetrainMode};
use ispshield_core::detection::{
    detection_loss, detection_loss_from_outputs, detection_metrics, evaluate_detection, iou,
    pseudo_ground_truth, BoundingBox, DetectionDataset, DetectionSample, DetectorModel, TinyDetector,
    TinyDetectorConfig,
};
use ispshield_core::enhancer::{
    build_mask, enhance, masked_mae_loss, train_enhancer, EnhancerModel, EnhancerTrainConfig, FaceMask, UNet,
    UNetConfig,
};
use ispshield_core::evaluation::{
    defocus, dominates, export_features, invert, iqa, low_resolution, read_features, SweepPoint,
};
use ispshield_core::face::{
    arcface_logits, ce_loss, closed_set_protocol, cosine_similarity, extract_features,
    nearest_neighbor_identify, ns_loss, ns_loss_tensor, train_linear_classifier, FaceDataset,
    FaceSample, FeatureExtractor, FeatureVector, LinearClassifierConfig, OneHotExtractor,
    ProtocolConfig, ProxyHead, RandomExtractor, TinyExtractor, TinyExtractorConfig,
};
use ispshield_core::isp::{
    apply_ccm, apply_gamma, compose_deployment, degamma, export_params, import_params,
    interpolate_dynamic_ccm, params_from_json, params_to_json, virtual_capture, CalibratedCcmSet,
    ColorMatrix, GammaCurve, IspParams, DEFAULT_KNOTS,
};
use ispshield_core::nn::{scalar, ParamStore};
use ispshield_core::synth::{FaceGenerator, FaceSynthConfig};
use ispshield_core::trainer::{run as train_run, split_holdout, TrainConfig, TrainState};
use ispshield_core::workbench::{
    ingest_face_dataset, parse_config, read_results, run_experiment, validate_config, ResultsRow,
};
use ispshield_core::{Domain, Error, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{criterion, Outcome};

const TOL: f64 = 1e-6;

pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

fn check(out: &mut Vec<Check>, name: &str, f: impl FnOnce() -> Result<()>) {
    let c = match f() {
        Ok(()) => Check::new(name, true, ""),
        Err(e) => Check::new(name, false, format!("{e:#}")),
    };
    out.push(c);
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < TOL
}

fn pixel(p: [f64; 3], domain: Domain) -> Result<ImageTensor> {
    Ok(ImageTensor::from_vec_f64(p.to_vec(), (1, 1, 1), domain)?)
}

fn ramp(n: usize, domain: Domain) -> Result<ImageTensor> {
    let data: Vec<f64> = (0..3 * n * n).map(|i| i as f64 / (3 * n * n - 1) as f64).collect();
    Ok(ImageTensor::from_vec_f64(data, (1, n, n), domain)?)
}

fn eye() -> ColorMatrix {
    ColorMatrix::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).expect("finite")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn isp_examples(out: &mut Vec<Check>) {
    check(out, "degamma: fixed points 0 and 1", || {
        let v = degamma(&pixel([0.0, 1.0, 0.0], Domain::Srgb)?)?.to_vec()?;
        ensure!(v == vec![0.0, 1.0, 0.0], "{v:?}");
        Ok(())
    });
    check(out, "degamma: 0.5 -> 0.21763", || {
        let v = degamma(&pixel([0.5; 3], Domain::Srgb)?)?.to_vec()?;
        ensure!(close(v[0], 0.5f64.powf(2.2)) && (v[0] - 0.21763).abs() < 1e-5, "{}", v[0]);
        Ok(())
    });
    check(out, "degamma: uniform v -> uniform v^2.2", || {
        for v in [0.1, 0.37, 0.8] {
            let img = ImageTensor::uniform((2, 3, 4), v, DType::F64, Domain::Srgb)?;
            let got = degamma(&img)?.to_vec()?;
            ensure!(got.iter().all(|g| close(*g, v.powf(2.2))), "v = {v}");
        }
        Ok(())
    });
    check(out, "degamma: linear input rejected", || {
        ensure!(degamma(&pixel([0.5; 3], Domain::Linear)?).is_err());
        Ok(())
    });
    check(out, "apply_ccm: identity keeps the image", || {
        let img = ramp(5, Domain::Linear)?;
        ensure!(apply_ccm(&img, &eye())?.to_vec()? == img.to_vec()?);
        Ok(())
    });
    check(out, "apply_ccm: 2I on (0.6, 0.2, 0.9) -> (1.0, 0.4, 1.0)", || {
        let v = apply_ccm(&pixel([0.6, 0.2, 0.9], Domain::Linear)?, &eye().scale(2.0))?.to_vec()?;
        ensure!(close(v[0], 1.0) && close(v[1], 0.4) && close(v[2], 1.0), "{v:?}");
        Ok(())
    });
    check(out, "apply_ccm: zero rows give black", || {
        let zero = ColorMatrix::new([[0.0; 3]; 3])?;
        ensure!(apply_ccm(&ramp(4, Domain::Linear)?, &zero)?.to_vec()?.iter().all(|v| *v == 0.0));
        Ok(())
    });
    check(out, "apply_ccm: non-finite entries rejected", || {
        ensure!(ColorMatrix::new([[f64::NAN, 0.0, 0.0], [0.0; 3], [0.0; 3]]).is_err());
        Ok(())
    });
    check(out, "apply_gamma: identity LUT keeps the image", || {
        let img = ramp(6, Domain::Linear)?;
        let got = apply_gamma(&img, &GammaCurve::identity(DEFAULT_KNOTS))?.to_vec()?;
        ensure!(max_abs_diff(&got, &img.to_vec()?) < TOL);
        Ok(())
    });
    check(out, "apply_gamma: k=3 (0, 0.8, 1) at 0.25 and 0.75", || {
        let curve = GammaCurve::with_grid(vec![0.0, 0.5, 1.0], vec![0.0, 0.8, 1.0])?;
        let v = apply_gamma(&pixel([0.25, 0.75, 0.5], Domain::Linear)?, &curve)?.to_vec()?;
        ensure!(close(v[0], 0.4) && close(v[1], 0.9) && close(v[2], 0.8), "{v:?}");
        Ok(())
    });
    check(out, "apply_gamma: inversion maps 0.3 to 0.7", || {
        let v = apply_gamma(&pixel([0.3; 3], Domain::Linear)?, &GammaCurve::inversion(DEFAULT_KNOTS))?
            .to_vec()?;
        ensure!(close(v[0], 0.7), "{}", v[0]);
        Ok(())
    });
    check(out, "apply_gamma: exact at the knots", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let curve = GammaCurve::new((0..DEFAULT_KNOTS).map(|_| rng.gen()).collect())?;
        let x = curve.inputs().to_vec();
        let n = x.len();
        let data: Vec<f64> = x.iter().cycle().take(3 * n).cloned().collect();
        let img = ImageTensor::from_vec_f64(data, (1, 1, n), Domain::Linear)?;
        let got = apply_gamma(&img, &curve)?.to_vec()?;
        ensure!(max_abs_diff(&got[..n], curve.outputs()) < 1e-12);
        Ok(())
    });
    check(out, "apply_gamma: non-monotone grid rejected", || {
        ensure!(GammaCurve::with_grid(vec![0.0, 0.6, 0.5, 1.0], vec![0.0, 0.2, 0.4, 1.0]).is_err());
        Ok(())
    });
    check(out, "virtual_capture: all-zero LUT gives black", || {
        let params = IspParams {
            ccm: eye(),
            gamma: GammaCurve::constant(DEFAULT_KNOTS, 0.0)?,
        };
        ensure!(virtual_capture(&ramp(6, Domain::Srgb)?, &params)?.to_vec()?.iter().all(|v| *v == 0.0));
        Ok(())
    });
    check(out, "virtual_capture: inversion LUT inverts in the linear domain", || {
        let params = IspParams {
            ccm: eye(),
            gamma: GammaCurve::inversion(DEFAULT_KNOTS),
        };
        let img = ramp(6, Domain::Srgb)?;
        let got = virtual_capture(&img, &params)?.to_vec()?;
        let want: Vec<f64> = img.to_vec()?.iter().map(|v| 1.0 - v.powf(2.2)).collect();
        ensure!(max_abs_diff(&got, &want) < TOL);
        Ok(())
    });
    check(out, "compose_deployment: identity on either side", || {
        let a = ColorMatrix::new([[0.9, 0.1, -0.2], [0.05, 1.1, 0.0], [0.3, -0.1, 0.8]])?;
        ensure!(compose_deployment(&eye(), &a) == a);
        ensure!(compose_deployment(&a, &eye()) == a);
        Ok(())
    });
    check(out, "compose_deployment: equals two stages when nothing clips", || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut compared = 0;
        while compared < 200 {
            let m = |rng: &mut ChaCha8Rng| {
                let mut e = [[0.0; 3]; 3];
                for (i, row) in e.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if i == j { 0.8 } else { 0.0 } + rng.gen_range(-0.2..0.2);
                    }
                }
                e
            };
            let (a, b) = (m(&mut rng), m(&mut rng));
            let p = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let mul = |m: &[[f64; 3]; 3], p: [f64; 3]| {
                [0, 1, 2].map(|i| (0..3).map(|j| m[i][j] * p[j]).sum::<f64>())
            };
            let stage = mul(&a, p);
            let both = mul(&b, stage);
            let inside = |v: &[f64; 3]| v.iter().all(|x| (0.0..=1.0).contains(x));
            if !inside(&stage) || !inside(&both) {
                continue;
            }
            let (ca, cb) = (ColorMatrix::new(a)?, ColorMatrix::new(b)?);
            let img = pixel(p, Domain::Linear)?;
            let two = apply_ccm(&apply_ccm(&img, &ca)?, &cb)?.to_vec()?;
            let one = apply_ccm(&img, &compose_deployment(&ca, &cb))?.to_vec()?;
            ensure!(max_abs_diff(&two, &one) < TOL, "{two:?} vs {one:?}");
            compared += 1;
        }
        Ok(())
    });
    check(out, "interpolate_dynamic_ccm: calibrated temperatures are exact", || {
        let a = ColorMatrix::new([[1.2, 0.1, 0.0], [0.0, 0.9, 0.1], [0.2, 0.0, 1.0]])?;
        let set = CalibratedCcmSet::new(vec![(2800.0, a), (4000.0, eye()), (6500.0, eye().scale(2.0))])?;
        for (t, m) in set.entries() {
            ensure!(interpolate_dynamic_ccm(&set, *t)? == *m);
        }
        Ok(())
    });
    check(out, "interpolate_dynamic_ccm: 5000K between I and 2I is 1.5I", || {
        let set = CalibratedCcmSet::new(vec![(4000.0, eye()), (6000.0, eye().scale(2.0))])?;
        let m = interpolate_dynamic_ccm(&set, 5000.0)?;
        ensure!(max_abs_diff(&m.row_major(), &eye().scale(1.5).row_major()) < TOL);
        Ok(())
    });
    check(out, "interpolate_dynamic_ccm: interpolation commutes with composition", || {
        let a = ColorMatrix::new([[1.2, 0.1, 0.0], [0.0, 0.9, 0.1], [0.2, 0.0, 1.0]])?;
        let opt = ColorMatrix::new([[0.3, 0.5, -0.4], [1.1, -0.2, 0.0], [0.0, 0.7, 0.6]])?;
        let set = CalibratedCcmSet::new(vec![(3000.0, a), (5500.0, eye().scale(1.3))])?;
        for t in [3000.0, 3700.0, 4250.0, 5500.0] {
            let first = compose_deployment(&interpolate_dynamic_ccm(&set, t)?, &opt);
            let then = interpolate_dynamic_ccm(&set.deploy(&opt), t)?;
            ensure!(max_abs_diff(&first.row_major(), &then.row_major()) < TOL, "T = {t}");
        }
        Ok(())
    });
    check(out, "export/import: bitwise round trip", || {
        let dir = tempfile::tempdir()?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = IspParams {
            ccm: ColorMatrix::from_row_major(&(0..9).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>())?,
            gamma: GammaCurve::new((0..DEFAULT_KNOTS).map(|_| rng.gen()).collect())?,
        };
        export_params(&params, dir.path().join("p.json"))?;
        let back = import_params(dir.path().join("p.json"))?;
        let bits = |p: &IspParams| -> Vec<u64> {
            p.ccm
                .row_major()
                .iter()
                .chain(p.gamma.inputs())
                .chain(p.gamma.outputs())
                .map(|v| v.to_bits())
                .collect()
        };
        ensure!(bits(&params) == bits(&back));
        Ok(())
    });
    check(out, "import: knot output 1.5 is a validation error", || {
        let mut doc: serde_json::Value = serde_json::from_str(&params_to_json(&IspParams::neutral(DEFAULT_KNOTS))?)?;
        doc["gamma_y"][4] = serde_json::json!(1.5);
        match params_from_json(&doc.to_string()) {
            Err(Error::InvalidParams(_)) => Ok(()),
            other => Err(anyhow!("expected a validation error, got {other:?}")),
        }
    });
    check(out, "import: 31 knots with k = 32 is a parse error", || {
        let mut doc: serde_json::Value = serde_json::from_str(&params_to_json(&IspParams::neutral(DEFAULT_KNOTS))?)?;
        doc["gamma_y"].as_array_mut().ok_or_else(|| anyhow!("gamma_y"))?.pop();
        match params_from_json(&doc.to_string()) {
            Err(Error::Parse { .. }) => Ok(()),
            other => Err(anyhow!("expected a parse error, got {other:?}")),
        }
    });
}

fn fv(v: &[f64]) -> FeatureVector {
    FeatureVector::new(v.to_vec())
}

/// `s` identities with two constant images each, shades spread over (0, 1).
fn shaded_identities(s: usize) -> Result<FaceDataset> {
    let mut samples = Vec::new();
    for id in 0..s {
        for copy in 0..2 {
            let v = (id + 1) as f32 / (s + 1) as f32;
            samples.push(FaceSample {
                image: Tensor::full(v, (3, 4, 4), &Device::Cpu)?,
                identity: id,
                source: format!("{id}/{copy}"),
            });
        }
    }
    Ok(FaceDataset::new(samples, (0..s).map(|i| format!("id{i}")).collect())?)
}

fn face_examples(out: &mut Vec<Check>) {
    check(out, "cosine_similarity: self, orthogonal, (1,0)~(1,1)", || {
        let v = fv(&[0.3, -1.2, 4.0]);
        ensure!(close(cosine_similarity(&v, &v)?, 1.0));
        ensure!(close(cosine_similarity(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0]))?, 0.0));
        ensure!(close(cosine_similarity(&fv(&[1.0, 0.0]), &fv(&[1.0, 1.0]))?, std::f64::consts::FRAC_1_SQRT_2));
        Ok(())
    });
    check(out, "nearest_neighbor_identify: exact match, 0.9 e2 + 0.1 e1, ties", || {
        let gallery = vec![(1u32, fv(&[1.0, 0.0])), (2, fv(&[0.0, 1.0]))];
        ensure!(nearest_neighbor_identify(&fv(&[1.0, 0.0]), &gallery)? == 1);
        ensure!(nearest_neighbor_identify(&fv(&[0.1, 0.9]), &gallery)? == 2);
        let same = vec![(7u32, fv(&[0.5, 0.5])), (3, fv(&[0.5, 0.5])), (9, fv(&[0.5, 0.5]))];
        ensure!(nearest_neighbor_identify(&fv(&[0.2, 0.9]), &same)? == 7);
        Ok(())
    });
    check(out, "train_linear_classifier: separable one-hot features", || {
        let feats: Vec<FeatureVector> = (0..12)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i % 4] = 1.0;
                fv(&v)
            })
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let c = train_linear_classifier(&feats, &labels, 4, &LinearClassifierConfig::default())?;
        ensure!(feats.iter().zip(&labels).all(|(f, y)| c.classify(f) == *y));
        Ok(())
    });
    check(out, "train_linear_classifier: single class", || {
        let feats = vec![fv(&[0.2, 0.4]), fv(&[-1.0, 3.0])];
        let c = train_linear_classifier(&feats, &[0, 0], 1, &LinearClassifierConfig::default())?;
        ensure!(c.classify(&fv(&[5.0, -5.0])) == 0 && c.classify(&fv(&[0.0, 0.0])) == 0);
        Ok(())
    });
    check(out, "train_linear_classifier: (1,0) and (0,1)", || {
        let feats = vec![fv(&[1.0, 0.0]), fv(&[0.0, 1.0])];
        let c = train_linear_classifier(&feats, &[0, 1], 2, &LinearClassifierConfig::default())?;
        ensure!(c.classify(&feats[0]) == 0 && c.classify(&feats[1]) == 1);
        Ok(())
    });
    check(out, "ce_loss: large margin, uniform over 10, shift invariance", || {
        let mut logits = vec![0.0; 6];
        logits[3] = 60.0;
        ensure!(ce_loss(&logits, 3)? < 1e-6);
        ensure!(close(ce_loss(&[0.7; 10], 2)?, std::f64::consts::LN_10));
        let a = [0.4, -1.3, 2.2, 0.0];
        let b: Vec<f64> = a.iter().map(|v| v - 9.5).collect();
        ensure!(close(ce_loss(&a, 1)?, ce_loss(&b, 1)?));
        Ok(())
    });
    check(out, "ns_loss: p_y = 0, p_y = 0.5, monotone", || {
        ensure!(ns_loss(&[0.0, 1.0], 0)? == 0.0);
        ensure!(close(ns_loss(&[0.5, 0.5], 1)?, std::f64::consts::LN_2));
        let values: Vec<f64> = (0..100)
            .map(|i| ns_loss(&[i as f64 / 100.0, 1.0 - i as f64 / 100.0], 0))
            .collect::<ispshield_core::Result<_>>()?;
        ensure!(values.windows(2).all(|w| w[1] > w[0]));
        Ok(())
    });
    check(out, "closed_set_protocol: one-hot extractor scores 1.0", || {
        let s = 6;
        let data = shaded_identities(s)?;
        let ex = OneHotExtractor::new(s, |img: &Tensor| {
            let v = img.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            Ok((v * (s + 1) as f64).round() as usize - 1)
        });
        let r = closed_set_protocol(&data, &ex, &|x| Ok(x.clone()), &ProtocolConfig::default())?;
        ensure!(r.mean_accuracy == 1.0, "{}", r.mean_accuracy);
        Ok(())
    });
    check(out, "closed_set_protocol: random features sit at chance", || {
        let s = 10;
        let data = shaded_identities(s)?;
        let r = closed_set_protocol(&data, &RandomExtractor::new(24, 9), &|x| Ok(x.clone()), &ProtocolConfig::default())?;
        let tol = 3.0 * r.binomial_std(0.1);
        ensure!((r.mean_accuracy - 0.1).abs() <= tol, "{} vs 0.1 +/- {tol}", r.mean_accuracy);
        Ok(())
    });
}

/// Center logit 40 at each box's cell (-40 elsewhere) and its exact offsets.
fn perfect_outputs(gt: &[Vec<BoundingBox>], grid: usize) -> Result<Tensor> {
    let cells = grid * grid;
    let mut data = vec![0f64; gt.len() * 5 * cells];
    for (n, boxes) in gt.iter().enumerate() {
        data[n * 5 * cells..n * 5 * cells + cells].fill(-40.0);
        for b in boxes {
            let (fx, fy) = (b.cx * grid as f64, b.cy * grid as f64);
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let cell = iy * grid + ix;
            data[n * 5 * cells + cell] = 40.0;
            for (k, v) in [fx - ix as f64, fy - iy as f64, b.w, b.h].into_iter().enumerate() {
                data[(n * 5 + 1 + k) * cells + cell] = v;
            }
        }
    }
    Ok(Tensor::from_vec(data, (gt.len(), 5, grid, grid), &Device::Cpu)?)
}

/// Replays fixed detections regardless of the input.
struct Replay {
    boxes: Vec<BoundingBox>,
    store: ParamStore,
}

impl DetectorModel for Replay {
    fn detect(&self, images: &Tensor) -> ispshield_core::Result<Vec<Vec<BoundingBox>>> {
        Ok(vec![self.boxes.clone(); images.dims()[0]])
    }
    fn loss(&self, _: &Tensor, _: &[Vec<BoundingBox>]) -> ispshield_core::Result<(Tensor, Tensor)> {
        Err(Error::Contract("replay detector has no loss".into()))
    }
    fn params(&self) -> &ParamStore {
        &self.store
    }
}

fn random_scenes(n: usize, seed: u64) -> Result<DetectionDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let v: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.gen()).collect();
            Ok(DetectionSample {
                image: Tensor::from_vec(v, (3, 32, 32), &Device::Cpu)?,
                boxes: vec![],
                source: format!("r{i}"),
            })
        })
        .collect::<Result<_>>()?;
    Ok(DetectionDataset::new(samples)?)
}

fn set_head_bias(det: &TinyDetector, center: f32) -> Result<()> {
    let var = det
        .params()
        .named()
        .iter()
        .find(|(n, _)| n == "head.bias")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| anyhow!("detector has no head.bias"))?;
    var.set(&Tensor::new(&[center, 0.0, 0.0, 0.0, 0.0], &Device::Cpu)?.to_dtype(var.dtype())?)?;
    Ok(())
}

fn detection_examples(out: &mut Vec<Check>) {
    check(out, "detection_loss: perfect prediction has zero box loss", || {
        let gt = vec![vec![BoundingBox::new(0.3, 0.4, 0.2, 0.5)?, BoundingBox::new(0.8, 0.7, 0.1, 0.3)?]];
        let (_, l_box) = detection_loss_from_outputs(&perfect_outputs(&gt, 8)?, &gt)?;
        ensure!(scalar(&l_box)? == 0.0);
        Ok(())
    });
    check(out, "detection_loss: empty ground truth is background only", || {
        let det = TinyDetector::new(TinyDetectorConfig::default(), 3)?;
        let x = Tensor::full(0.5f32, (2, 3, 16, 16), &Device::Cpu)?;
        let (l_cls, l_box) = detection_loss(&det, &x, &[vec![], vec![]])?;
        ensure!(scalar(&l_box)? == 0.0 && scalar(&l_cls)? >= 0.0);
        Ok(())
    });
    check(out, "detection_loss: pixel gradient matches central differences", || {
        let det = TinyDetector::with_dtype(TinyDetectorConfig { width: 4 }, 5, DType::F64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.1..0.9)).collect();
        let gt = vec![vec![BoundingBox::new(0.4, 0.5, 0.3, 0.6)?]];
        let loss_at = |data: &[f64]| -> Result<f64> {
            let x = Tensor::from_vec(data.to_vec(), (1, 3, 16, 16), &Device::Cpu)?;
            let (c, b) = detection_loss(&det, &x, &gt)?;
            Ok(scalar(&(c + b)?)?)
        };
        let x = Var::from_vec(v.clone(), (1, 3, 16, 16), &Device::Cpu)?;
        let (c, b) = detection_loss(&det, x.as_tensor(), &gt)?;
        let g = (c + b)?.backward()?.get(&x).ok_or_else(|| anyhow!("no pixel gradient"))?.flatten_all()?.to_vec1::<f64>()?;
        for _ in 0..30 {
            let i = rng.gen_range(0..v.len());
            let (mut plus, mut minus) = (v.clone(), v.clone());
            plus[i] += 1e-4;
            minus[i] -= 1e-4;
            let fd = (loss_at(&plus)? - loss_at(&minus)?) / 2e-4;
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
            ensure!(rel < 1e-3, "pixel {i}: {} vs {fd}", g[i]);
        }
        Ok(())
    });
    check(out, "iou: identical, disjoint, corner boxes 1/3", || {
        let a = BoundingBox::new(0.5, 0.5, 0.4, 0.2)?;
        ensure!(close(iou(&a, &a), 1.0));
        ensure!(iou(&BoundingBox::new(0.2, 0.2, 0.2, 0.2)?, &BoundingBox::new(0.8, 0.8, 0.2, 0.2)?) == 0.0);
        let c = iou(&BoundingBox::from_corners(0.0, 0.0, 1.0, 1.0), &BoundingBox::from_corners(0.5, 0.0, 1.5, 1.0));
        ensure!(close(c, 1.0 / 3.0), "{c}");
        Ok(())
    });
    check(out, "evaluate_detection: perfect and empty predictions", || {
        let gts = vec![
            vec![BoundingBox::new(0.3, 0.3, 0.2, 0.4)?],
            vec![BoundingBox::new(0.6, 0.5, 0.3, 0.3)?, BoundingBox::new(0.2, 0.7, 0.1, 0.2)?],
        ];
        let preds: Vec<Vec<BoundingBox>> =
            gts.iter().map(|g| g.iter().map(|b| b.with_confidence(1.0)).collect()).collect();
        let m = detection_metrics(&preds, &gts);
        ensure!(m.ap == 1.0 && m.f1 == 1.0, "{m:?}");
        let m = detection_metrics(&[vec![], vec![]], &gts);
        ensure!(m.ap == 0.0 && m.recall == 0.0, "{m:?}");
        Ok(())
    });
    check(out, "pseudo_ground_truth: nothing above 0.5 gives empty truth", || {
        let det = TinyDetector::new(TinyDetectorConfig { width: 4 }, 1)?;
        set_head_bias(&det, -30.0)?;
        let pseudo = pseudo_ground_truth(&det, &random_scenes(3, 1)?)?;
        ensure!(pseudo.samples.iter().all(|s| s.boxes.is_empty()));
        Ok(())
    });
    check(out, "pseudo_ground_truth: confidence exactly 0.5 is excluded", || {
        let b = BoundingBox::new(0.5, 0.5, 0.2, 0.2)?;
        let det = Replay {
            boxes: vec![b.with_confidence(0.5), BoundingBox::new(0.2, 0.2, 0.1, 0.1)?.with_confidence(0.6)],
            store: ParamStore::new(),
        };
        let pseudo = pseudo_ground_truth(&det, &random_scenes(2, 2)?)?;
        ensure!(pseudo.samples.iter().all(|s| s.boxes.len() == 1 && s.boxes[0].cx == 0.2));
        Ok(())
    });
    check(out, "pseudo_ground_truth: self-consistent AP is 1.0", || {
        let det = TinyDetector::new(TinyDetectorConfig { width: 8 }, 9)?;
        set_head_bias(&det, 0.3)?;
        let data = random_scenes(4, 4)?;
        let pseudo = pseudo_ground_truth(&det, &data)?;
        ensure!(pseudo.samples.iter().any(|s| !s.boxes.is_empty()), "no confident detections");
        let m = evaluate_detection(&det, &pseudo, &|x| Ok(x.clone()))?;
        ensure!(m.ap == 1.0, "{}", m.ap);
        Ok(())
    });
}

struct Players {
    faces: FaceDataset,
    scenes: DetectionDataset,
    extractor: TinyExtractor,
    head: ProxyHead,
    detector: TinyDetector,
}

fn players(identities: usize, images: usize) -> Result<Players> {
    let gen = FaceGenerator::new(FaceSynthConfig {
        identities,
        ..Default::default()
    })?;
    let scenes = ispshield_core::synth::synth_scenes(&ispshield_core::synth::SceneSynthConfig {
        scenes: 8,
        ..Default::default()
    })?;
    Ok(Players {
        faces: gen.dataset(images, 1)?,
        scenes: scenes.detection,
        extractor: TinyExtractor::new(
            TinyExtractorConfig {
                width: 8,
                feature_dim: 32,
                ..Default::default()
            },
            1,
        )?,
        head: ProxyHead::new(32, identities, 2)?,
        detector: TinyDetector::new(TinyDetectorConfig { width: 4 }, 3)?,
    })
}

fn small_config() -> TrainConfig {
    TrainConfig {
        face_batch: 8,
        detection_batch: 4,
        maxiters: 1,
        ..Default::default()
    }
}

fn state<'a>(p: &'a Players, cfg: &TrainConfig) -> Result<TrainState<'a>> {
    Ok(TrainState::new(cfg, &p.extractor, &p.head, &p.detector, p.faces.len(), p.scenes.len())?)
}

struct Scalar {
    store: ParamStore,
    w: Tensor,
}

impl FeatureExtractor for Scalar {
    fn feature_dim(&self) -> usize {
        1
    }
    fn forward(&self, images: &Tensor) -> ispshield_core::Result<Tensor> {
        let m = images.flatten_from(1)?.mean_keepdim(1)?;
        Ok(m.broadcast_mul(&self.w)?)
    }
    fn trainable(&self) -> Option<&ParamStore> {
        Some(&self.store)
    }
}

fn trainer_examples(out: &mut Vec<Check>) {
    check(out, "warmup: threshold 0 returns after one epoch", || {
        let p = players(4, 5)?;
        let cfg = TrainConfig {
            warmup_accuracy_threshold: 0.0,
            ..small_config()
        };
        let (train, held) = split_holdout(&p.faces, 5)?;
        ensure!(state(&p, &cfg)?.warmup(&train, &held)?.len() == 1);
        Ok(())
    });
    check(out, "warmup: separable faces reach 0.95", || {
        let p = players(4, 10)?;
        let cfg = TrainConfig {
            warmup_accuracy_threshold: 0.95,
            ..small_config()
        };
        let (train, held) = split_holdout(&p.faces, 5)?;
        let acc = state(&p, &cfg)?.warmup(&train, &held)?;
        ensure!(acc.last().is_some_and(|a| *a >= 0.95), "{acc:?}");
        Ok(())
    });
    check(out, "warmup: zero learning rates leave parameters unchanged", || {
        let p = players(4, 5)?;
        let cfg = TrainConfig {
            lr_extractor: 0.0,
            lr_head: 0.0,
            warmup_accuracy_threshold: 0.0,
            ..small_config()
        };
        let before = (p.extractor.params().fingerprint()?, p.head.params().fingerprint()?);
        let (train, held) = split_holdout(&p.faces, 5)?;
        state(&p, &cfg)?.warmup(&train, &held)?;
        ensure!(before == (p.extractor.params().fingerprint()?, p.head.params().fingerprint()?));
        Ok(())
    });
    check(out, "attacker_step: zero rates change only the history", || {
        let p = players(4, 5)?;
        let cfg = TrainConfig {
            lr_extractor: 0.0,
            lr_head: 0.0,
            ..small_config()
        };
        let mut s = state(&p, &cfg)?;
        let (x, y) = p.faces.batch(&[0, 5, 10])?;
        let before = (p.extractor.params().fingerprint()?, p.head.params().fingerprint()?, s.params()?);
        s.attacker_step(&x, &y)?;
        ensure!(before == (p.extractor.params().fingerprint()?, p.head.params().fingerprint()?, s.params()?));
        ensure!(s.history.len() == 1);
        Ok(())
    });
    check(out, "attacker_step: camera parameters are frozen", || {
        let p = players(4, 5)?;
        let mut s = state(&p, &small_config())?;
        let (x, y) = p.faces.batch(&[0, 5, 10, 15])?;
        let (sx, sy) = p.scenes.batch(&[0, 1])?;
        s.protector_step((&x, &y), (&sx, &sy), 0.2)?;
        let isp = params_to_json(&s.params()?)?;
        s.attacker_step(&x, &y)?;
        ensure!(isp == params_to_json(&s.params()?)?);
        Ok(())
    });
    check(out, "attacker_step: one-parameter model matches the hand update", || {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::new(&[0.7f32], &Device::Cpu)?)?;
        let ext = Scalar { store, w };
        let head = ProxyHead::new(1, 2, 0)?;
        head.params().vars()[0].set(&Tensor::new(&[[1.0f32], [-1.0]], &Device::Cpu)?)?;
        let det = TinyDetector::new(TinyDetectorConfig { width: 2 }, 0)?;
        let cfg = TrainConfig {
            lr_extractor: 0.1,
            lr_head: 0.0,
            weight_decay: 0.0,
            ..small_config()
        };
        let mut s = TrainState::new(&cfg, &ext, &head, &det, 1, 1)?;
        let v = 0.6f64;
        s.attacker_step(&Tensor::full(v as f32, (1, 3, 4, 4), &Device::Cpu)?, &[0])?;
        // starting camera: identity matrix, knots sampled from x^(1/2.2)
        let xs = GammaCurve::knot_grid(DEFAULT_KNOTS);
        let u = v.powf(2.2) * (DEFAULT_KNOTS - 1) as f64;
        let i = u.floor() as usize;
        let t = u - i as f64;
        let c = xs[i].powf(1.0 / 2.2) * (1.0 - t) + xs[i + 1].powf(1.0 / 2.2) * t;
        let w0 = 0.7f64;
        let p0 = 1.0 / (1.0 + (-2.0 * w0 * c).exp());
        let want = w0 + 0.1 * (1.0 - p0) * 2.0 * c;
        let got = ext.store.vars()[0].as_tensor().to_vec1::<f32>()?[0] as f64;
        ensure!((got - want).abs() < TOL, "{got} vs {want}");
        Ok(())
    });
    check(out, "protector_step: omega 0 uses the privacy gradient alone", || {
        let p = players(4, 5)?;
        let s = state(&p, &small_config())?;
        let (x, y) = p.faces.batch(&[0, 6, 12])?;
        let (sx, sy) = p.scenes.batch(&[2, 3])?;
        let (ccm, gamma) = s.isp_gradient((&x, &y), (&sx, &sy), 0.0)?;
        let logits = p.head.logits(&p.extractor.forward(&s.isp.capture(&x)?)?)?;
        let g = ns_loss_tensor(&logits, &y)?.backward()?;
        let want_ccm = g.get(s.isp.ccm()).ok_or_else(|| anyhow!("ccm"))?.flatten_all()?.to_vec1::<f64>()?;
        let want_gamma = g.get(s.isp.gamma()).ok_or_else(|| anyhow!("gamma"))?.to_vec1::<f64>()?;
        ensure!(max_abs_diff(&ccm, &want_ccm) < 1e-12 && max_abs_diff(&gamma, &want_gamma) < 1e-12);
        Ok(())
    });
    check(out, "protector_step: zero rates leave the state unchanged", || {
        let p = players(4, 5)?;
        let cfg = TrainConfig {
            lr_isp: 0.0,
            lr_detector: 0.0,
            ..small_config()
        };
        let mut s = state(&p, &cfg)?;
        let (x, y) = p.faces.batch(&[0, 5])?;
        let (sx, sy) = p.scenes.batch(&[0, 1])?;
        let before = (s.params()?, p.detector.params().fingerprint()?);
        s.protector_step((&x, &y), (&sx, &sy), 0.2)?;
        ensure!(before == (s.params()?, p.detector.params().fingerprint()?));
        Ok(())
    });
    check(out, "protector_step: knots are clamped into [0, 1]", || {
        let p = players(4, 5)?;
        let cfg = TrainConfig {
            lr_isp: 0.5,
            ..small_config()
        };
        let mut s = state(&p, &cfg)?;
        let (x, y) = p.faces.batch(&[0, 5, 10, 15])?;
        let (sx, sy) = p.scenes.batch(&[0, 1])?;
        for _ in 0..5 {
            s.protector_step((&x, &y), (&sx, &sy), 0.2)?;
            ensure!(s.params()?.gamma.outputs().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        ensure!(s.params()?.gamma.outputs().iter().any(|v| *v == 0.0 || *v == 1.0), "no knot reached a bound");
        Ok(())
    });
    check(out, "run: maxiters 0 returns the initial parameters", || {
        let p = players(4, 5)?;
        let cfg = TrainConfig {
            maxiters: 0,
            warmup_accuracy_threshold: 0.0,
            ..small_config()
        };
        let out = train_run(&cfg, &p.faces, &p.scenes, &p.extractor, &p.head, &p.detector)?;
        ensure!(out.params == IspParams::neutral(DEFAULT_KNOTS));
        Ok(())
    });
}

fn enhancer_examples(out: &mut Vec<Check>) {
    check(out, "build_mask: no boxes, whole image, left half", || {
        ensure!(build_mask(6, 8, &[]).zeros() == 0);
        ensure!(build_mask(6, 8, &[BoundingBox::new(0.5, 0.5, 1.0, 1.0)?]).zeros() == 48);
        let m = build_mask(6, 8, &[BoundingBox::new(0.25, 0.5, 0.5, 1.0)?]);
        ensure!(m.zeros() == 24 && (0..6).all(|y| m.get(y, 3) == 0 && m.get(y, 4) == 1));
        Ok(())
    });
    let t = |v: &[f64], shape: (usize, usize, usize, usize)| -> Result<Tensor> {
        Ok(Tensor::from_vec(v.to_vec(), shape, &Device::Cpu)?)
    };
    check(out, "masked_mae_loss: all-ones mask is plain MAE", || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..2 * 3 * 5 * 5).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..2 * 3 * 5 * 5).map(|_| rng.gen()).collect();
        let mae = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let ones = Tensor::ones((2, 1, 5, 5), DType::F64, &Device::Cpu)?;
        let l = scalar(&masked_mae_loss(&t(&a, (2, 3, 5, 5))?, &t(&b, (2, 3, 5, 5))?, &ones)?)?;
        ensure!(close(l, mae), "{l} vs {mae}");
        Ok(())
    });
    check(out, "masked_mae_loss: zero mask and black output give 0", || {
        let zeros = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu)?;
        let target = Tensor::full(0.6f64, (1, 3, 4, 4), &Device::Cpu)?;
        let mask = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu)?;
        ensure!(scalar(&masked_mae_loss(&zeros, &target, &mask)?)? == 0.0);
        Ok(())
    });
    check(out, "masked_mae_loss: two-pixel case is 0.15", || {
        let l = masked_mae_loss(
            &t(&[0.4, 0.2], (1, 1, 1, 2))?,
            &t(&[0.5, 0.8], (1, 1, 1, 2))?,
            &t(&[1.0, 0.0], (1, 1, 1, 2))?,
        )?;
        ensure!(close(scalar(&l)?, 0.15));
        Ok(())
    });
    let faces = |n: usize| -> Result<Vec<Tensor>> {
        let gen = FaceGenerator::new(FaceSynthConfig {
            identities: n,
            ..Default::default()
        })?;
        Ok(gen.dataset(1, 3)?.samples().iter().map(|s| s.image.clone()).collect())
    };
    let ones_for = |images: &[Tensor]| -> Vec<FaceMask> {
        images.iter().map(|_| FaceMask::ones(16, 16)).collect()
    };
    check(out, "train_enhancer: zero learning rate keeps the model", || {
        let model = UNet::new(UNetConfig::default(), 1)?;
        let images = faces(4)?;
        let before = model.params().fingerprint()?;
        let config = EnhancerTrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..Default::default()
        };
        train_enhancer(&model, &images, &|x| Ok(x.clone()), &ones_for(&images), &config, &mut |_, _| Ok(()))?;
        ensure!(before == model.params().fingerprint()?);
        Ok(())
    });
    check(out, "train_enhancer: identity capture overfits 10 images", || {
        let model = UNet::new(UNetConfig::default(), 2)?;
        let images = faces(10)?;
        let config = EnhancerTrainConfig {
            epochs: 300,
            batch_size: 10,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        };
        let h = train_enhancer(&model, &images, &|x| Ok(x.clone()), &ones_for(&images), &config, &mut |_, _| Ok(()))?;
        let last = *h.last().ok_or_else(|| anyhow!("no epochs"))?;
        ensure!(last < 0.02, "final loss {last}");
        Ok(())
    });
    check(out, "enhance: clamped to [0, 1] and deterministic", || {
        let model = UNet::new(UNetConfig::default(), 3)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut data: Vec<f64> = (0..2 * 3 * 20 * 20).map(|_| rng.gen()).collect();
        data[..300].fill(0.0);
        data[300..600].fill(1.0);
        let img = ImageTensor::from_vec_f64(data, (2, 20, 20), Domain::Srgb)?;
        let a = enhance(&model, &img)?.to_vec()?;
        let b = enhance(&model, &img)?.to_vec()?;
        ensure!(a.iter().all(|v| (0.0..=1.0).contains(v)) && a == b);
        Ok(())
    });
}

fn evaluation_examples(out: &mut Vec<Check>) {
    check(out, "iqa: identical images are perfect", || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..2 * 3 * 48 * 48).map(|_| rng.gen()).collect();
        let img = ImageTensor::from_vec_f64(data, (2, 48, 48), Domain::Srgb)?;
        let r = iqa(&img, &img)?;
        ensure!(r.rmse == 0.0 && close(r.ssim, 1.0) && close(r.ms_ssim, 1.0), "{r:?}");
        Ok(())
    });
    check(out, "iqa: uniform 0.5 vs 0.25", || {
        let a = ImageTensor::uniform((1, 16, 16), 0.5, DType::F64, Domain::Srgb)?;
        let b = ImageTensor::uniform((1, 16, 16), 0.25, DType::F64, Domain::Srgb)?;
        let r = iqa(&a, &b)?;
        ensure!(close(r.rmse, 0.25) && (r.psnr - 12.0412).abs() < 1e-4 && close(r.psnr, 20.0 * 4f64.log10()), "{r:?}");
        Ok(())
    });
    check(out, "low_resolution: factor 1, constants, alternating row", || {
        let img = ramp(8, Domain::Srgb)?;
        ensure!(low_resolution(&img, 1)?.to_vec()? == img.to_vec()?);
        let c = ImageTensor::uniform((1, 8, 8), 0.3, DType::F64, Domain::Srgb)?;
        ensure!(low_resolution(&c, 4)?.to_vec()?.iter().all(|v| close(*v, 0.3)));
        let row = ImageTensor::from_vec_f64([0.0, 1.0, 0.0, 1.0].repeat(3), (1, 1, 4), Domain::Srgb)?;
        ensure!(low_resolution(&row, 2)?.to_vec()?.iter().all(|v| close(*v, 0.5)));
        Ok(())
    });
    check(out, "defocus: kernel 1, constants, impulse gives the kernel", || {
        let img = ramp(8, Domain::Srgb)?;
        ensure!(defocus(&img, 1, 1.0)?.to_vec()? == img.to_vec()?);
        let c = ImageTensor::uniform((1, 9, 9), 0.7, DType::F64, Domain::Srgb)?;
        ensure!(defocus(&c, 5, 2.0)?.to_vec()?.iter().all(|v| close(*v, 0.7)));
        let mut data = vec![0.0; 3 * 25];
        for ch in 0..3 {
            data[ch * 25 + 12] = 1.0;
        }
        let out = defocus(&ImageTensor::from_vec_f64(data, (1, 5, 5), Domain::Srgb)?, 3, 1.0)?.to_vec()?;
        let g = |d: f64| (-d * d / 2.0).exp();
        let z: f64 = (-1..=1).flat_map(|i| (-1..=1).map(move |j| g(i as f64) * g(j as f64))).sum();
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let want = g(dy as f64) * g(dx as f64) / z;
                let got = out[((2 + dy) * 5 + 2 + dx) as usize];
                ensure!(close(got, want), "({dy}, {dx}): {got} vs {want}");
            }
        }
        Ok(())
    });
    check(out, "preliminary: inversion involution, gray fixed point, self-similarity", || {
        let img = ramp(6, Domain::Srgb)?;
        let twice = invert(&invert(img.values())?)?.flatten_all()?.to_vec1::<f64>()?;
        ensure!(max_abs_diff(&twice, &img.to_vec()?) < TOL);
        let gray = Tensor::full(0.5f64, (1, 3, 4, 4), &Device::Cpu)?;
        ensure!(invert(&gray)?.flatten_all()?.to_vec1::<f64>()?.iter().all(|v| *v == 0.5));
        let ex = TinyExtractor::new(TinyExtractorConfig::default(), 4)?;
        let x = Tensor::rand(0f32, 1f32, (1, 3, 16, 16), &Device::Cpu)?;
        let f = extract_features(&ex, &x)?;
        ensure!(close(cosine_similarity(&f[0], &f[0])?, 1.0));
        Ok(())
    });
    check(out, "tradeoff_sweep: dominance examples", || {
        let best = SweepPoint::new("ideal", "", 0.0, 0.6);
        let others = [
            SweepPoint::new("a", "", 0.2, 0.6),
            SweepPoint::new("b", "", 0.0, 0.5),
            SweepPoint::new("c", "", 0.7, 0.1),
        ];
        ensure!(others.iter().all(|o| dominates(&best, o)));
        let p = SweepPoint::new("p", "", 0.3, 0.4);
        ensure!(!dominates(&p, &p.clone()));
        Ok(())
    });
    check(out, "export_features: shape, determinism, round trip", || {
        let gen = FaceGenerator::new(FaceSynthConfig {
            identities: 3,
            ..Default::default()
        })?;
        let data = gen.dataset(4, 0)?;
        let ex = TinyExtractor::new(
            TinyExtractorConfig {
                feature_dim: 12,
                ..Default::default()
            },
            5,
        )?;
        let dir = tempfile::tempdir()?;
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let id = |x: &Tensor| Ok(x.clone());
        ensure!(export_features(&ex, &data, &id, &a)? == 12);
        export_features(&ex, &data, &id, &b)?;
        ensure!(std::fs::read(&a)? == std::fs::read(&b)?);
        let text = std::fs::read_to_string(&a)?;
        ensure!(text.lines().skip(1).count() == 12 && text.lines().all(|l| l.split(',').count() == 14));
        let rows = read_features(&a)?;
        let (images, _) = data.batch(&(0..12).collect::<Vec<_>>())?;
        let direct = extract_features(&ex, &images)?;
        for i in 0..12 {
            for j in 0..12 {
                let want = cosine_similarity(&direct[i], &direct[j])?;
                let got = cosine_similarity(&rows[i].feature, &rows[j].feature)?;
                ensure!((want - got).abs() < TOL);
            }
        }
        Ok(())
    });
}

fn attack_examples(out: &mut Vec<Check>) {
    let gen = || {
        FaceGenerator::new(FaceSynthConfig {
            identities: 6,
            ..Default::default()
        })
    };
    let protocol = ProtocolConfig::default();
    check(out, "reenroll_gallery: identity capture equals the baseline", || {
        let data = gen()?.dataset(4, 2)?;
        let ex = TinyExtractor::new(TinyExtractorConfig::default(), 7)?;
        let id = |x: &Tensor| Ok(x.clone());
        let base = closed_set_protocol(&data, &ex, &id, &protocol)?;
        let re = reenroll_gallery(&data, &ex, &id, &protocol)?;
        ensure!(base == re, "{} vs {}", base.mean_accuracy, re.mean_accuracy);
        Ok(())
    });
    check(out, "reenroll_gallery: identical gallery and query images score 1.0", || {
        let single = gen()?.dataset(1, 3)?;
        let mut samples = Vec::new();
        for s in single.samples() {
            for copy in 0..2 {
                samples.push(FaceSample {
                    image: s.image.clone(),
                    identity: s.identity,
                    source: format!("{}#{copy}", s.source),
                });
            }
        }
        let data = FaceDataset::new(samples, single.identity_names().to_vec())?;
        let ex = TinyExtractor::new(TinyExtractorConfig::default(), 8)?;
        let params = IspParams {
            ccm: ColorMatrix::new([[0.2, 0.7, 0.1], [0.5, 0.1, 0.4], [0.3, 0.3, 0.4]])?,
            gamma: GammaCurve::inversion(DEFAULT_KNOTS),
        };
        let r = reenroll_gallery(&data, &ex, &|x| params.capture(x), &protocol)?;
        ensure!(r.mean_accuracy == 1.0, "{}", r.mean_accuracy);
        Ok(())
    });
    check(out, "retrain_fr: 0 finetune epochs equal the non-adaptive accuracy", || {
        let g = gen()?;
        let params = IspParams {
            ccm: ColorMatrix::new([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]])?,
            gamma: GammaCurve::power(DEFAULT_KNOTS, 0.8),
        };
        let capture = |x: &Tensor| params.capture(x);
        let train = g.dataset(4, 1)?.map_images(&capture)?;
        let test = g.dataset(4, 2)?.map_images(&capture)?;
        let base = TinyExtractor::new(TinyExtractorConfig::default(), 9)?;
        let config = RetrainConfig {
            mode: RetrainMode::Finetune,
            epochs: 0,
            ..Default::default()
        };
        let r = retrain_fr(&base, &train, &test, &config, &protocol)?;
        let direct = closed_set_protocol(&test, &base, &|x| Ok(x.clone()), &protocol)?;
        ensure!(r.report.mean_accuracy == direct.mean_accuracy);
        Ok(())
    });
    check(out, "arcface: zero margin orders logits like cosine similarity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f: Vec<f64> = (0..8 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..7 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<u32> = (0..8).map(|i| i % 7).collect();
        let logits = arcface_logits(
            &Tensor::from_vec(f.clone(), (8, 5), &Device::Cpu)?,
            &Tensor::from_vec(w.clone(), (7, 5), &Device::Cpu)?,
            &labels,
            30.0,
            0.0,
        )?
        .to_vec2::<f64>()?;
        for (i, row) in logits.iter().enumerate() {
            let cos: Vec<f64> = (0..7)
                .map(|j| cosine_similarity(&fv(&f[i * 5..i * 5 + 5]), &fv(&w[j * 5..j * 5 + 5])))
                .collect::<ispshield_core::Result<_>>()?;
            let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k);
            ensure!(argmax(row) == argmax(&cos), "row {i}");
        }
        Ok(())
    });
    check(out, "train_restorer: same losses as train_enhancer with all-ones masks", || {
        let g = gen()?;
        let train = g.dataset(2, 1)?;
        let eval = g.dataset(2, 2)?;
        let ex = TinyExtractor::new(TinyExtractorConfig::default(), 9)?;
        let params = IspParams::neutral(DEFAULT_KNOTS);
        let capture = |x: &Tensor| params.capture(x);
        let config = EnhancerTrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let a = UNet::new(UNetConfig::default(), 4)?;
        let restored = train_restorer(&a, &train, &eval, &ex, &capture, &config, &protocol)?;
        let b = UNet::new(UNetConfig::default(), 4)?;
        let images: Vec<Tensor> = train.samples().iter().map(|s| s.image.clone()).collect();
        let masks: Vec<FaceMask> = images.iter().map(|_| FaceMask::ones(16, 16)).collect();
        let enhanced = train_enhancer(&b, &images, &capture, &masks, &config, &mut |_, _| Ok(()))?;
        ensure!(restored.epoch_losses == enhanced, "{:?} vs {enhanced:?}", restored.epoch_losses);
        Ok(())
    });
}

fn write_png(path: &Path, shade: f64) -> Result<()> {
    std::fs::create_dir_all(path.parent().ok_or_else(|| anyhow!("no parent"))?)?;
    let data: Vec<f64> = (0..3 * 16 * 16).map(|i| (shade + (i % 11) as f64 * 0.02).min(1.0)).collect();
    ImageTensor::from_vec_f64(data, (1, 16, 16), Domain::Srgb)?.save(0, path)?;
    Ok(())
}

fn workbench_examples(out: &mut Vec<Check>) {
    check(out, "validate_config: minimal simulate config gets defaults", || {
        let dir = tempfile::tempdir()?;
        export_params(&IspParams::neutral(DEFAULT_KNOTS), dir.path().join("isp.json"))?;
        std::fs::create_dir_all(dir.path().join("faces"))?;
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "kind = \"simulate\"\nseed = 3\n[data]\nfaces = \"faces\"\nparams = \"isp.json\"\n")?;
        let c = validate_config(&path, &[])?;
        ensure!(c.train == TrainConfig { seed: 3, ..Default::default() });
        ensure!(c.data.params.as_deref() == Some(dir.path().join("isp.json").as_path()));
        Ok(())
    });
    check(out, "validate_config: omega -1 names the field", || {
        match parse_config("kind = \"train-isp\"\nseed = 0\n[train]\nomega = -1.0\n", Path::new("."), &[]) {
            Err(e) if e.to_string().contains("train.omega") => Ok(()),
            other => Err(anyhow!("expected an error naming train.omega, got {:?}", other.map(|_| ()))),
        }
    });
    check(out, "validate_config: resolved config is a fixed point", || {
        let dir = tempfile::tempdir()?;
        let first = parse_config("kind = \"sweep\"\nseed = 9\n[train]\nomega = 0.5\n", dir.path(), &[])?;
        let second = parse_config(&first.to_toml()?, dir.path(), &[])?;
        ensure!(first == second && first.to_toml()? == second.to_toml()?);
        Ok(())
    });
    check(out, "ingest_face_dataset: 3 identities x 2 images", || {
        let dir = tempfile::tempdir()?;
        for (k, id) in ["ann", "bob", "cyd"].iter().enumerate() {
            for i in 0..2 {
                write_png(&dir.path().join(format!("{id}/{i}.png")), 0.2 * k as f64 + 0.05 * i as f64)?;
            }
        }
        let (d, report) = ingest_face_dataset(dir.path())?;
        ensure!(d.num_identities() == 3 && report.flagged.is_empty());
        Ok(())
    });
    check(out, "ingest_face_dataset: single-image identity is flagged and excluded", || {
        let dir = tempfile::tempdir()?;
        write_png(&dir.path().join("ann/0.png"), 0.1)?;
        write_png(&dir.path().join("ann/1.png"), 0.2)?;
        write_png(&dir.path().join("bob/0.png"), 0.5)?;
        let (d, report) = ingest_face_dataset(dir.path())?;
        ensure!(report.flagged == vec!["bob".to_string()]);
        let r = closed_set_protocol(&d, &RandomExtractor::new(4, 0), &|x| Ok(x.clone()), &ProtocolConfig::default())?;
        ensure!(r.identities == 1 && r.excluded == 1);
        Ok(())
    });
    check(out, "ingest_face_dataset: manifest and directory layouts agree", || {
        let dir = tempfile::tempdir()?;
        let mut manifest = String::new();
        for (k, id) in ["ann", "bob"].iter().enumerate() {
            for i in 0..3 {
                let rel = format!("{id}/{i}.png");
                write_png(&dir.path().join(&rel), 0.3 * k as f64 + 0.07 * i as f64)?;
                manifest.push_str(&format!("{rel},{id}\n"));
            }
        }
        std::fs::write(dir.path().join("faces.csv"), manifest)?;
        let (a, _) = ingest_face_dataset(dir.path())?;
        let (b, _) = ingest_face_dataset(dir.path().join("faces.csv"))?;
        ensure!(a.identity_names() == b.identity_names() && a.len() == b.len());
        for (x, y) in a.samples().iter().zip(b.samples()) {
            ensure!(x.identity == y.identity && x.source == y.source);
            let diff = (&x.image - &y.image)?.abs()?.max_all()?.to_scalar::<f32>()?;
            ensure!(diff == 0.0);
        }
        Ok(())
    });
    check(out, "run_experiment: eval-iqa on identical corpora is perfect", || {
        let dir = tempfile::tempdir()?;
        for sub in ["a", "b"] {
            for (i, s) in [0.1, 0.5, 0.8].iter().enumerate() {
                write_png(&dir.path().join(format!("{sub}/{i}.png")), *s)?;
            }
        }
        let text = "kind = \"eval-iqa\"\nseed = 0\noutput = \"out\"\n[data]\ntest_images = \"a\"\nreference_images = \"b\"\n";
        let s = run_experiment(&parse_config(text, dir.path(), &[])?)?;
        let get = |m: &str| s.rows.iter().find(|r| r.metric == m).map(|r| r.value);
        ensure!(get("rmse") == Some(0.0));
        ensure!(get("ssim").is_some_and(|v| close(v, 1.0)) && get("ms_ssim").is_some_and(|v| close(v, 1.0)));
        Ok(())
    });
    check(out, "run_experiment: same config twice gives identical results", || {
        let dir = tempfile::tempdir()?;
        let text = "kind = \"simulate\"\nseed = 4\noutput = \"out\"\n[benchmark.test_scenes]\nscenes = 4\n";
        let config = parse_config(text, dir.path(), &[])?;
        let a = run_experiment(&config)?.rows.len();
        run_experiment(&config)?;
        let rows = read_results(dir.path().join("out/results.csv"))?;
        ensure!(rows.len() == 2 * a && a > 0);
        let strip = |r: &ResultsRow| ResultsRow {
            timestamp: String::new(),
            ..r.clone()
        };
        let (x, y) = rows.split_at(a);
        ensure!(x.iter().map(strip).eq(y.iter().map(strip)));
        Ok(())
    });
}

/// Criterion 1; `extra` holds the toy-run examples evaluated elsewhere.
pub fn run(extra: Vec<Check>) -> Outcome {
    criterion(1, "analytic unit suite", Some(Duration::from_secs(120)), move || {
        let mut checks = Vec::new();
        isp_examples(&mut checks);
        face_examples(&mut checks);
        detection_examples(&mut checks);
        trainer_examples(&mut checks);
        enhancer_examples(&mut checks);
        evaluation_examples(&mut checks);
        attack_examples(&mut checks);
        workbench_examples(&mut checks);
        let local = checks.len();
        checks.extend(extra);
        let failed: Vec<&Check> = checks.iter().filter(|c| !c.pass).collect();
        for c in &checks {
            let detail = if c.detail.is_empty() { String::new() } else { format!(" ({})", c.detail) };
            eprintln!("    [{}] {}{detail}", if c.pass { "ok" } else { "FAIL" }, c.name);
        }
        let detail = if failed.is_empty() {
            format!("{} examples passed ({} from the toy runs)", checks.len(), checks.len() - local)
        } else {
            format!(
                "{} of {} examples failed: {}",
                failed.len(),
                checks.len(),
                failed.iter().map(|c| format!("{} ({})", c.name, c.detail)).collect::<Vec<_>>().join("; ")
            )
        };
        Ok((failed.is_empty(), detail))
    })
}
