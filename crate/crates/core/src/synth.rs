//! Parametric synthetic corpora: identity-textured face crops and cluttered
//! scenes with person boxes, so every experiment can run without downloads.
//!
//! A face is a skin-toned crop whose identity lives in a coarse grid of
//! per-channel texture offsets. A scene is a saturated background with
//! squares and wide bars as clutter; each person is a tall body in a
//! saturated clothing color topped by a skin-toned head, and the head box is
//! reported as the face region.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{BoundingBox, DetectionDataset, DetectionSample};
use crate::error::{Error, Result};
use crate::face::{FaceDataset, FaceSample};

const SKIN: [f64; 3] = [0.72, 0.60, 0.52];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaceSynthConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub size: usize,
    /// Side of the square texture cells carrying the identity signature.
    pub cell: usize,
    pub texture_amplitude: f64,
    pub brightness_jitter: f64,
    pub noise: f64,
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for FaceSynthConfig {
    fn default() -> Self {
        Self {
            identities: 10,
            images_per_identity: 20,
            size: 16,
            cell: 4,
            texture_amplitude: 0.08,
            brightness_jitter: 0.03,
            noise: 0.02,
            max_shift: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSynthConfig {
    pub scenes: usize,
    pub size: usize,
    pub max_persons: usize,
    pub max_clutter: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSynthConfig {
    fn default() -> Self {
        Self {
            scenes: 160,
            size: 32,
            max_persons: 2,
            max_clutter: 3,
            noise: 0.02,
            seed: 0,
        }
    }
}

/// Fixed identity signatures; datasets drawn from the same generator share
/// identities but not images.
#[derive(Debug, Clone)]
pub struct FaceGenerator {
    config: FaceSynthConfig,
    signatures: Vec<Vec<[f64; 3]>>,
}

impl FaceGenerator {
    pub fn new(config: FaceSynthConfig) -> Result<Self> {
        if config.cell == 0 || config.size % config.cell != 0 {
            return Err(Error::Config {
                key: "cell".into(),
                message: format!("{} does not divide the face size {}", config.cell, config.size),
            });
        }
        let grid = config.size / config.cell;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let a = config.texture_amplitude;
        let signatures = (0..config.identities)
            .map(|_| {
                (0..grid * grid)
                    .map(|_| [0, 1, 2].map(|_| rng.gen_range(-a..=a)))
                    .collect()
            })
            .collect();
        Ok(Self { config, signatures })
    }

    pub fn config(&self) -> &FaceSynthConfig {
        &self.config
    }

    fn render(&self, identity: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let c = &self.config;
        let s = c.size;
        let grid = s / c.cell;
        let shift = c.max_shift as i64;
        let (dy, dx) = (rng.gen_range(-shift..=shift), rng.gen_range(-shift..=shift));
        let bright = rng.gen_range(-c.brightness_jitter..=c.brightness_jitter);
        let sig = &self.signatures[identity];
        let mut data = vec![0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let sy = (y as i64 + dy).clamp(0, s as i64 - 1) as usize / c.cell;
                let sx = (x as i64 + dx).clamp(0, s as i64 - 1) as usize / c.cell;
                let cell = sig[sy * grid + sx];
                for ch in 0..3 {
                    let v = SKIN[ch] + bright + cell[ch] + gaussian(rng) * c.noise;
                    data[(ch * s + y) * s + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        Ok(Tensor::from_vec(data, (3, s, s), &Device::Cpu)?)
    }

    /// `images_per_identity` fresh images of every identity, rendered from
    /// `seed`.
    pub fn dataset(&self, images_per_identity: usize, seed: u64) -> Result<FaceDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(self.signatures.len() * images_per_identity);
        for id in 0..self.signatures.len() {
            for k in 0..images_per_identity {
                samples.push(FaceSample {
                    image: self.render(id, &mut rng)?,
                    identity: id,
                    source: format!("synthetic/id{id:03}/{k:03}"),
                });
            }
        }
        let names = (0..self.signatures.len()).map(|i| format!("id{i:03}")).collect();
        FaceDataset::new(samples, names)
    }
}

/// Scenes plus the head box of every person (used as the face mask).
#[derive(Debug, Clone)]
pub struct SceneSet {
    pub detection: DetectionDataset,
    pub face_boxes: Vec<Vec<BoundingBox>>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn saturated(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| {
        if rng.gen_bool(0.5) {
            rng.gen_range(0.85..0.97)
        } else {
            rng.gen_range(0.03..0.15)
        }
    })
}

fn distinct_saturated(rng: &mut ChaCha8Rng, avoid: &[[f64; 3]]) -> [f64; 3] {
    loop {
        let c = saturated(rng);
        let clash = avoid
            .iter()
            .any(|a| (0..3).all(|i| (a[i] > 0.5) == (c[i] > 0.5)));
        if !clash {
            return c;
        }
    }
}

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, color: [f64; 3]) -> Self {
        let mut data = vec![0.0; 3 * size * size];
        for ch in 0..3 {
            data[ch * size * size..(ch + 1) * size * size].fill(color[ch]);
        }
        Self { size, data }
    }

    fn fill(&mut self, x0: usize, y0: usize, w: usize, h: usize, color: [f64; 3]) {
        for y in y0..(y0 + h).min(self.size) {
            for x in x0..(x0 + w).min(self.size) {
                for ch in 0..3 {
                    self.data[(ch * self.size + y) * self.size + x] = color[ch];
                }
            }
        }
    }

    fn skin(&mut self, x0: usize, y0: usize, side: usize, rng: &mut ChaCha8Rng) {
        let bright = rng.gen_range(-0.03..=0.03);
        for y in y0..(y0 + side).min(self.size) {
            for x in x0..(x0 + side).min(self.size) {
                for ch in 0..3 {
                    self.data[(ch * self.size + y) * self.size + x] =
                        SKIN[ch] + bright + rng.gen_range(-0.08..=0.08);
                }
            }
        }
    }

    fn into_tensor(mut self, noise: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        for v in &mut self.data {
            *v = (*v + gaussian(rng) * noise).clamp(0.0, 1.0);
        }
        let data: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(data, (3, self.size, self.size), &Device::Cpu)?)
    }
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.0 < b.0 + b.2 + 1 && b.0 < a.0 + a.2 + 1 && a.1 < b.1 + b.3 + 1 && b.1 < a.1 + a.3 + 1
}

pub fn synth_scenes(config: &SceneSynthConfig) -> Result<SceneSet> {
    let s = config.size;
    if s < 24 {
        return Err(Error::Config {
            key: "size".into(),
            message: format!("scenes need at least 24 pixels, got {s}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::with_capacity(config.scenes);
    let mut faces = Vec::with_capacity(config.scenes);
    let norm = s as f64;
    for k in 0..config.scenes {
        let bg = saturated(&mut rng);
        let mut canvas = Canvas::new(s, bg);
        for _ in 0..rng.gen_range(0..=config.max_clutter) {
            let color = distinct_saturated(&mut rng, &[bg]);
            let (w, h) = if rng.gen_bool(0.5) {
                let side = rng.gen_range(4..=8);
                (side, side)
            } else {
                (rng.gen_range(9..=15), rng.gen_range(3..=5))
            };
            let x = rng.gen_range(0..=s - w);
            let y = rng.gen_range(0..=s - h);
            canvas.fill(x, y, w, h, color);
        }
        let persons = rng.gen_range(1..=config.max_persons.max(1));
        let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
        let mut boxes = Vec::new();
        let mut heads = Vec::new();
        for _ in 0..200 {
            if placed.len() == persons {
                break;
            }
            let bw = rng.gen_range(4..=7);
            let bh = rng.gen_range(10..=16);
            let hs = rng.gen_range(3..=bw.min(5));
            let total_h = bh + hs;
            let x = rng.gen_range(0..=s - bw);
            let y = rng.gen_range(0..=s - total_h);
            let rect = (x, y, bw, total_h);
            if placed.iter().any(|&p| overlaps(p, rect)) {
                continue;
            }
            placed.push(rect);
            let cloth = distinct_saturated(&mut rng, &[bg]);
            canvas.fill(x, y + hs, bw, bh, cloth);
            let hx = x + (bw - hs) / 2;
            canvas.skin(hx, y, hs, &mut rng);
            boxes.push(BoundingBox::new(
                (x as f64 + bw as f64 / 2.0) / norm,
                (y as f64 + total_h as f64 / 2.0) / norm,
                bw as f64 / norm,
                total_h as f64 / norm,
            )?);
            heads.push(BoundingBox::new(
                (hx as f64 + hs as f64 / 2.0) / norm,
                (y as f64 + hs as f64 / 2.0) / norm,
                hs as f64 / norm,
                hs as f64 / norm,
            )?);
        }
        samples.push(DetectionSample {
            image: canvas.into_tensor(config.noise, &mut rng)?,
            boxes,
            source: format!("synthetic/scene{k:04}"),
        });
        faces.push(heads);
    }
    Ok(SceneSet {
        detection: DetectionDataset::new(samples)?,
        face_boxes: faces,
    })
}
