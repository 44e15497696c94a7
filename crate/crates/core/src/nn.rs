//! Small neural-network plumbing on top of candle: a named parameter store
//! with seeded initialization (the CPU backend cannot be seeded), layer
//! constructors, and the optimizers used by the trainers.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, Linear, Optimizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ordered collection of named trainable variables.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        self.vars.push((name.into(), var));
        Ok(t)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Raw bytes of every parameter, for exact before/after comparisons.
    pub fn fingerprint(&self) -> Result<Vec<Vec<u32>>> {
        self.vars
            .iter()
            .map(|(_, v)| {
                let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?;
                Ok(flat.to_vec1::<f32>()?.iter().map(|x| x.to_bits()).collect())
            })
            .collect()
    }

    /// Overwrites every parameter with the value of the same-named one in
    /// `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let lookup: HashMap<&str, &Var> =
            other.vars.iter().map(|(n, v)| (n.as_str(), v)).collect();
        for (name, var) in &self.vars {
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            var.set(&src.as_tensor().copy()?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path.as_ref())?;
        Ok(())
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = candle_core::safetensors::load(path.as_ref(), &Device::Cpu)?;
        for (name, var) in &self.vars {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks `{name}`")))?;
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for (_, v) in &self.vars {
            let s = v
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .sum_all()?
                .to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Deterministic weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype: DType::F32,
        }
    }

    /// Initializer producing tensors of `dtype` (F64 is used by gradient
    /// checks).
    pub fn with_dtype(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, scaled by `gain`.
    pub fn uniform(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Result<Tensor> {
        let bound = gain * (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, &Device::Cpu)?)
    }
}

/// 3x3-style convolution with kaiming-uniform weights (ReLU gain).
pub fn conv2d(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    (c_in, c_out, kernel): (usize, usize, usize),
    stride: usize,
) -> Result<Conv2d> {
    let fan_in = c_in * kernel * kernel;
    let w = init.uniform(&[c_out, c_in, kernel, kernel], fan_in, 6f64.sqrt())?;
    let w = store.insert(format!("{name}.weight"), w)?;
    let b = store.insert(format!("{name}.bias"), init.zeros(&[c_out])?)?;
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

pub fn linear(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    (d_in, d_out): (usize, usize),
    bias: bool,
) -> Result<Linear> {
    let w = init.uniform(&[d_out, d_in], d_in, 3f64.sqrt())?;
    let w = store.insert(format!("{name}.weight"), w)?;
    let b = if bias {
        Some(store.insert(format!("{name}.bias"), init.zeros(&[d_out])?)?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

/// Gradient descent with heavy-ball momentum and L2 weight decay:
/// `v <- mu v + (g + wd p)`, `p <- p - lr v`.
pub struct MomentumSgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl MomentumSgd {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        if self.lr == 0.0 {
            return Ok(());
        }
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&var.as_tensor().sub(&(&v * self.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

/// Adam with optional decoupled weight decay (AdamW).
pub struct Adam {
    inner: candle_nn::AdamW,
    lr: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, weight_decay: f64) -> Result<Self> {
        let params = candle_nn::ParamsAdamW {
            lr,
            weight_decay,
            ..Default::default()
        };
        Ok(Self {
            inner: candle_nn::AdamW::new(vars, params)?,
            lr,
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        if self.lr == 0.0 {
            return Ok(());
        }
        self.inner.step(grads)?;
        Ok(())
    }
}

/// 2x2 max pooling built from a reshape and two max reductions; candle's
/// own max-pool backward scales the routed gradient by 1/4.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let x = x.reshape((b, c, h / 2, 2, w / 2, 2))?;
    Ok(x.max(5)?.max(3)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
