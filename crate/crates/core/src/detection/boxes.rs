use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PERSON: u32 = 0;

/// Axis-aligned box in normalized image coordinates (center, size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    pub class: u32,
}

impl BoundingBox {
    /// Validated ground-truth style box: positive size and a non-empty
    /// overlap with the unit image.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self {
            cx,
            cy,
            w,
            h,
            confidence: 1.0,
            class: PERSON,
        };
        b.validate()?;
        Ok(b)
    }

    /// Box from corner coordinates, without range validation.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
            confidence: 1.0,
            class: PERSON,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.w, self.h, self.confidence];
        if vals.iter().any(|v| !v.is_finite()) || !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::Contract(format!("invalid box {self:?}")));
        }
        let (x1, y1, x2, y2) = self.corners();
        if x2.min(1.0) <= x1.max(0.0) || y2.min(1.0) <= y1.max(0.0) {
            return Err(Error::Contract(format!("box {self:?} lies outside the image")));
        }
        Ok(())
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        let (x1, y1, x2, y2) = self.corners();
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Greedy non-maximum suppression by descending confidence.
pub fn nms(mut boxes: Vec<BoundingBox>, iou_threshold: f64, max_keep: usize) -> Vec<BoundingBox> {
    boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<BoundingBox> = Vec::new();
    for b in boxes {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|k| iou(k, &b) <= iou_threshold) {
            keep.push(b);
        }
    }
    keep
}

/// One detection image `(3, H, W)` with its person boxes.
#[derive(Debug, Clone)]
pub struct DetectionSample {
    pub image: Tensor,
    pub boxes: Vec<BoundingBox>,
    pub source: String,
}

#[derive(Debug, Clone, Default)]
pub struct DetectionDataset {
    pub samples: Vec<DetectionSample>,
}

impl DetectionDataset {
    pub fn new(samples: Vec<DetectionSample>) -> Result<Self> {
        let mut shape = None;
        for s in &samples {
            let d = s.image.dims3()?;
            if d.0 != 3 {
                return Err(Error::Contract(format!("{}: expected 3 channels", s.source)));
            }
            if *shape.get_or_insert(d) != d {
                return Err(Error::Contract(format!("{}: inconsistent image size", s.source)));
            }
            for b in &s.boxes {
                b.validate()?;
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<Vec<BoundingBox>>)> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let boxes = indices.iter().map(|&i| self.samples[i].boxes.clone()).collect();
        Ok((Tensor::stack(&images, 0)?, boxes))
    }

    pub fn ground_truth(&self) -> Vec<Vec<BoundingBox>> {
        self.samples.iter().map(|s| s.boxes.clone()).collect()
    }

    pub fn map_images(&self, f: &dyn Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let mut samples = Vec::with_capacity(self.samples.len());
        for chunk in self.samples.chunks(64) {
            let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
            let out = f(&Tensor::stack(&images, 0)?)?;
            for (i, s) in chunk.iter().enumerate() {
                samples.push(DetectionSample {
                    image: out.get(i)?,
                    boxes: s.boxes.clone(),
                    source: s.source.clone(),
                });
            }
        }
        Ok(Self { samples })
    }
}
