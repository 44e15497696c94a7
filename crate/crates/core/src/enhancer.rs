//! Image enhancer for captured images: a small U-Net trained to restore
//! everything except faces, which it is pushed to render black.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Conv2d;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::BoundingBox;
use crate::error::{Error, Result};
use crate::image::{Domain, ImageTensor};
use crate::nn::{conv2d, max_pool2, scalar, Adam, Init, ParamStore};

/// Binary mask, 0 inside face regions and 1 elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl FaceMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn zeros(&self) -> usize {
        self.values.iter().filter(|v| **v == 0).count()
    }

    /// `(1, H, W)` in `dtype`.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let data: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(data, (1, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Writes the mask as a 1-bit grayscale PNG (white = keep).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 1 {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        let png_err = |e: png::EncodingError| Error::Contract(format!("{}: {e}", path.display()));
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&packed).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            values: img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect(),
        })
    }
}

/// Location of the cached mask of an image: `<stem>.mask.png` next to it.
pub fn mask_cache_path(image_path: impl AsRef<Path>) -> PathBuf {
    let p = image_path.as_ref();
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    p.with_file_name(format!("{stem}.mask.png"))
}

/// Zeros every pixel whose center lies inside one of the (normalized) face
/// boxes.
pub fn build_mask(height: usize, width: usize, faces: &[BoundingBox]) -> FaceMask {
    let mut mask = FaceMask::ones(height, width);
    for b in faces {
        let (x1, y1, x2, y2) = b.corners();
        for y in 0..height {
            let cy = (y as f64 + 0.5) / height as f64;
            if cy < y1 || cy >= y2 {
                continue;
            }
            for x in 0..width {
                let cx = (x as f64 + 0.5) / width as f64;
                if cx >= x1 && cx < x2 {
                    mask.values[y * width + x] = 0;
                }
            }
        }
    }
    mask
}

/// Mean over pixels and channels of `s |out - target| + (1 - s) |out|`;
/// `mask` is `(B, 1, H, W)` and broadcasts over channels.
pub fn masked_mae_loss(output: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = output.dims4()?;
    if target.dims() != output.dims() || mask.dims() != [b, 1, h, w] {
        return Err(Error::Contract(format!(
            "output {:?}, target {:?} and mask {:?} disagree",
            output.dims(),
            target.dims(),
            mask.dims()
        )));
    }
    let mask = mask.to_dtype(output.dtype())?;
    let keep = (output - target)?.abs()?.broadcast_mul(&mask)?;
    let hide = output.abs()?.broadcast_mul(&mask.affine(-1.0, 1.0)?)?;
    Ok((keep + hide)?.mean_all()?)
}

/// An image-to-image network with outputs in `[0, 1]` and the input's
/// spatial size.
pub trait EnhancerModel {
    /// Differentiable forward pass.
    fn forward(&self, images: &Tensor) -> Result<Tensor>;
    fn params(&self) -> &ParamStore;

    /// Inference: forward pass clamped to `[0, 1]`, detached.
    fn enhance(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images)?.detach().clamp(0f64, 1f64)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Channel width of each of the five resolution levels.
    pub widths: [usize; 5],
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            widths: [16, 24, 32, 32, 32],
        }
    }
}

/// Four downsampling stages with skip connections; nearest upsampling and a
/// convolution on the way up, sigmoid output.
pub struct UNet {
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    out: Conv2d,
    store: ParamStore,
    config: UNetConfig,
}

const STAGES: usize = 4;
const MULTIPLE: usize = 1 << STAGES;

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let w = config.widths;
        let mut down = Vec::with_capacity(STAGES + 1);
        let mut c_in = 3;
        for (i, &c) in w.iter().enumerate() {
            down.push(conv2d(&mut store, &mut init, &format!("down{i}"), (c_in, c, 3), 1)?);
            c_in = c;
        }
        let mut up = Vec::with_capacity(STAGES);
        for i in (0..STAGES).rev() {
            let c_cat = c_in + w[i];
            up.push(conv2d(&mut store, &mut init, &format!("up{i}"), (c_cat, w[i], 3), 1)?);
            c_in = w[i];
        }
        let out = conv2d(&mut store, &mut init, "out", (c_in, 3, 1), 1)?;
        Ok(Self {
            down,
            up,
            out,
            store,
            config,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }
}

impl EnhancerModel for UNet {
    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        let ph = h.div_ceil(MULTIPLE) * MULTIPLE;
        let pw = w.div_ceil(MULTIPLE) * MULTIPLE;
        let x = images
            .to_dtype(DType::F32)?
            .pad_with_same(2, 0, ph - h)?
            .pad_with_same(3, 0, pw - w)?
            .affine(2.0, -1.0)?;
        let mut skips = Vec::with_capacity(STAGES);
        let mut x = self.down[0].forward(&x)?.relu()?;
        for conv in &self.down[1..] {
            skips.push(x.clone());
            x = conv.forward(&max_pool2(&x)?)?.relu()?;
        }
        for conv in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            let (_, _, sh, sw) = skip.dims4()?;
            let upsampled = x.upsample_nearest2d(sh, sw)?;
            x = conv.forward(&Tensor::cat(&[&upsampled, &skip], 1)?)?.relu()?;
        }
        let y = candle_nn::ops::sigmoid(&self.out.forward(&x)?)?;
        Ok(y.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}

/// Forward pass of a trained model on captured images.
pub fn enhance(model: &dyn EnhancerModel, captured: &ImageTensor) -> Result<ImageTensor> {
    let out = model.enhance(captured.values())?;
    ImageTensor::new(out.to_dtype(captured.values().dtype())?, Domain::Srgb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for EnhancerTrainConfig {
    /// Desk-scale defaults for the synthetic corpus.
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            learning_rate: 3e-3,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

impl EnhancerTrainConfig {
    pub fn paper_scale() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 3e-4,
            weight_decay: 1e-2,
            ..Self::default()
        }
    }
}

/// Minimizes the masked MAE between `model(capture(x))` and `x` with AdamW.
/// Returns the mean loss of every epoch.
pub fn train_enhancer(
    model: &dyn EnhancerModel,
    images: &[Tensor],
    capture: &dyn Fn(&Tensor) -> Result<Tensor>,
    masks: &[FaceMask],
    config: &EnhancerTrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    if images.len() != masks.len() {
        return Err(Error::Contract(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    let mut opt = Adam::new(model.params().vars(), config.learning_rate, config.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let x: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let x = Tensor::stack(&x, 0)?.to_dtype(DType::F32)?;
            let m: Vec<Tensor> = chunk
                .iter()
                .map(|&i| masks[i].to_tensor(DType::F32))
                .collect::<Result<_>>()?;
            let m = Tensor::stack(&m, 0)?;
            let captured = capture(&x)?.detach();
            let loss = masked_mae_loss(&model.forward(&captured)?, &x, &m)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    round: epoch,
                    step: batches,
                    detail: "non-finite enhancer loss".into(),
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
