//! Greedy per-class non-maximum suppression.

use std::cmp::Ordering;

use crate::boxes::iou;
use crate::model::head::Detection;

pub const NMS_IOU: f64 = 0.45;
pub const NMS_CONF: f64 = 0.25;
/// Confidence floor for precision-recall sweeps.
pub const SWEEP_CONF: f64 = 0.001;

fn by_confidence(a: &Detection, b: &Detection) -> Ordering {
    b.confidence.partial_cmp(&a.confidence).unwrap_or(Ordering::Equal)
}

/// Drops detections below `conf_thresh`, then within each class keeps a box
/// only if its IoU with every higher-confidence kept box is at most
/// `iou_thresh`. Output is sorted by confidence, descending.
pub fn nms(dets: &[Detection], iou_thresh: f64, conf_thresh: f64) -> Vec<Detection> {
    let mut cand: Vec<Detection> = dets.iter().copied().filter(|d| d.confidence >= conf_thresh).collect();
    // Stable sort: ties keep input order.
    cand.sort_by(by_confidence);
    let mut kept: Vec<Detection> = Vec::new();
    for d in cand {
        if kept.iter().all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}
