//! Single-class person detection: boxes, COCO-style evaluation, and a small
//! anchor-free detector whose loss is differentiable in its input pixels.

mod ap;
mod boxes;
mod detector;

pub use ap::{
    average_precision, coco_ap, detection_metrics, operating_point, DetectionMetrics,
    OPERATING_CONFIDENCE, OPERATING_IOU,
};
pub use boxes::{iou, nms, BoundingBox, DetectionDataset, DetectionSample, PERSON};
pub use detector::{
    detect_all, detection_loss, detection_loss_from_outputs, evaluate_detection, pseudo_ground_truth,
    train_detector, DetectorModel, DetectorTrainConfig, TinyDetector, TinyDetectorConfig,
};
