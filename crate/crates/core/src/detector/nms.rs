use super::Detection;
use crate::boxloss::iou;

/// Greedy per-class suppression in descending score order.
///
/// Equal scores keep their input order. A box is dropped when its IoU with
/// an already kept box of the same class exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}
