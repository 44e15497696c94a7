use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{Error, Result};

/// One aligned face crop, `(3, H, W)` sRGB in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct FaceSample {
    pub image: Tensor,
    pub identity: usize,
    pub source: String,
}

/// Labeled face images. Identities are dense indices into `identity_names`
/// and every identity has at least one sample.
#[derive(Debug, Clone)]
pub struct FaceDataset {
    samples: Vec<FaceSample>,
    identity_names: Vec<String>,
}

impl FaceDataset {
    pub fn new(samples: Vec<FaceSample>, identity_names: Vec<String>) -> Result<Self> {
        let mut counts = vec![0usize; identity_names.len()];
        let mut shape = None;
        for s in &samples {
            *counts.get_mut(s.identity).ok_or_else(|| {
                Error::Contract(format!("identity {} has no name", s.identity))
            })? += 1;
            let dims = s.image.dims3()?;
            if dims.0 != 3 {
                return Err(Error::Contract(format!("{}: expected 3 channels", s.source)));
            }
            match shape {
                None => shape = Some(dims),
                Some(d) if d != dims => {
                    return Err(Error::Contract(format!(
                        "{}: image size {:?} differs from {:?}",
                        s.source, dims, d
                    )))
                }
                _ => {}
            }
        }
        if let Some(i) = counts.iter().position(|c| *c == 0) {
            return Err(Error::Contract(format!(
                "identity `{}` has no samples",
                identity_names[i]
            )));
        }
        Ok(Self {
            samples,
            identity_names,
        })
    }

    /// Groups samples by identity name, assigning indices in name order.
    pub fn from_named(samples: Vec<(String, Tensor, String)>) -> Result<Self> {
        let mut names: BTreeMap<String, usize> = BTreeMap::new();
        for (name, _, _) in &samples {
            names.entry(name.clone()).or_insert(0);
        }
        for (i, v) in names.values_mut().enumerate() {
            *v = i;
        }
        let identity_names = names.keys().cloned().collect();
        let samples = samples
            .into_iter()
            .map(|(name, image, source)| FaceSample {
                identity: names[&name],
                image,
                source,
            })
            .collect();
        Self::new(samples, identity_names)
    }

    pub fn samples(&self) -> &[FaceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.identity_names.len()
    }

    pub fn identity_names(&self) -> &[String] {
        &self.identity_names
    }

    /// `(height, width)` of every image.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| {
            let d = s.image.dims();
            (d[1], d[2])
        })
    }

    /// Sample indices per identity, in dataset order.
    pub fn by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.identity_names.len()];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.identity].push(i);
        }
        groups
    }

    /// Identities with at least `min_images` samples, and how many were left
    /// out.
    pub fn eligible_identities(&self, min_images: usize) -> (Vec<usize>, usize) {
        let groups = self.by_identity();
        let keep: Vec<usize> = (0..groups.len())
            .filter(|&i| groups[i].len() >= min_images)
            .collect();
        let excluded = groups.len() - keep.len();
        (keep, excluded)
    }

    /// Stacks the selected images into a `(B, 3, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<u32>)> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let labels = indices
            .iter()
            .map(|&i| self.samples[i].identity as u32)
            .collect();
        Ok((Tensor::stack(&images, 0)?, labels))
    }

    /// Same samples with every image replaced by `f(image batch)`.
    pub fn map_images(&self, f: &dyn Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let mut samples = Vec::with_capacity(self.samples.len());
        for chunk in self.samples.chunks(64) {
            let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
            let out = f(&Tensor::stack(&images, 0)?)?;
            for (i, s) in chunk.iter().enumerate() {
                samples.push(FaceSample {
                    image: out.get(i)?,
                    identity: s.identity,
                    source: s.source.clone(),
                });
            }
        }
        Ok(Self {
            samples,
            identity_names: self.identity_names.clone(),
        })
    }

    /// Keeps only samples whose index satisfies `keep`; identities left
    /// without samples are dropped and the rest re-indexed.
    pub fn filter(&self, keep: impl Fn(usize, &FaceSample) -> bool) -> Result<Self> {
        let named = self
            .samples
            .iter()
            .enumerate()
            .filter(|(i, s)| keep(*i, s))
            .map(|(_, s)| {
                (
                    self.identity_names[s.identity].clone(),
                    s.image.clone(),
                    s.source.clone(),
                )
            })
            .collect();
        Self::from_named(named)
    }
}
