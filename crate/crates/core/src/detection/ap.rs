//! COCO-style average precision for a single class: greedy matching by
//! descending confidence, 101-point interpolated precision, IoU thresholds
//! 0.50:0.05:0.95.

use serde::{Deserialize, Serialize};

use super::boxes::{iou, BoundingBox};

/// Confidence floor for the precision/recall/F1 operating point.
pub const OPERATING_CONFIDENCE: f64 = 0.25;
/// IoU required for a match at the operating point.
pub const OPERATING_IOU: f64 = 0.5;
const MAX_DETECTIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ranked(preds: &[BoundingBox]) -> Vec<BoundingBox> {
    let mut p = preds.to_vec();
    p.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    p.truncate(MAX_DETECTIONS);
    p
}

/// Per-detection true-positive flags for one image, detections already in
/// descending confidence order.
fn match_image(preds: &[BoundingBox], gts: &[BoundingBox], threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(p, gt);
                if v >= threshold && best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Area under the 101-point interpolated precision/recall curve at one IoU
/// threshold. Zero when there is no ground truth.
pub fn average_precision(
    preds: &[Vec<BoundingBox>],
    gts: &[Vec<BoundingBox>],
    threshold: f64,
) -> f64 {
    let positives: usize = gts.iter().map(Vec::len).sum();
    if positives == 0 {
        return 0.0;
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let p = ranked(p);
        let tp = match_image(&p, g, threshold);
        scored.extend(p.iter().map(|b| b.confidence).zip(tp));
    }
    // stable: equal confidences keep image order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, hit) in &scored {
        if *hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// Mean AP over IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_ap(preds: &[Vec<BoundingBox>], gts: &[Vec<BoundingBox>]) -> f64 {
    (0..10)
        .map(|i| average_precision(preds, gts, 0.5 + 0.05 * i as f64))
        .sum::<f64>()
        / 10.0
}

/// Precision, recall and F1 keeping detections with confidence at least
/// `min_confidence`, matched greedily at `iou_threshold`.
pub fn operating_point(
    preds: &[Vec<BoundingBox>],
    gts: &[Vec<BoundingBox>],
    min_confidence: f64,
    iou_threshold: f64,
) -> (f64, f64, f64) {
    let (mut tp, mut n_pred, mut n_gt) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        let kept: Vec<BoundingBox> = ranked(p)
            .into_iter()
            .filter(|b| b.confidence >= min_confidence)
            .collect();
        tp += match_image(&kept, g, iou_threshold)
            .iter()
            .filter(|t| **t)
            .count();
        n_pred += kept.len();
        n_gt += g.len();
    }
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

pub fn detection_metrics(preds: &[Vec<BoundingBox>], gts: &[Vec<BoundingBox>]) -> DetectionMetrics {
    let (precision, recall, f1) =
        operating_point(preds, gts, OPERATING_CONFIDENCE, OPERATING_IOU);
    DetectionMetrics {
        ap: coco_ap(preds, gts),
        ap50: average_precision(preds, gts, 0.5),
        ap75: average_precision(preds, gts, 0.75),
        precision,
        recall,
        f1,
    }
}
