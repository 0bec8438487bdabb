//! IoU, greedy matching and all-point interpolated average precision.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::RawRecord;
use crate::eval::detections::Detection;
use crate::loss::{BoundingBox, BoxRole};

/// Role-free rectangle `(x, y, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

impl From<BoundingBox> for Rect {
    fn from(b: BoundingBox) -> Self {
        Self::new(b.x, b.y, b.w, b.h)
    }
}

pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct APResult {
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    pub num_gt: usize,
}

/// Detection indices by descending confidence; ties keep input order.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy single-match assignment. Returns one TP flag per detection, in input order.
///
/// Detections are visited by descending confidence; each takes the unmatched
/// ground truth of its image with the highest IoU (lowest index on ties) if
/// that IoU reaches `threshold`.
pub fn match_detections(dets: &[Detection], gts: &BTreeMap<String, Vec<Rect>>, threshold: f64) -> Vec<bool> {
    let mut matched: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
    let mut flags = vec![false; dets.len()];
    for i in confidence_order(dets) {
        let d = &dets[i];
        let (Some(boxes), Some(used)) = (gts.get(&d.image_id), matched.get_mut(d.image_id.as_str())) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in boxes.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = iou(&d.rect, gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= threshold {
                used[g] = true;
                flags[i] = true;
            }
        }
    }
    flags
}

/// Pascal VOC average precision with all-point interpolation.
pub fn voc_ap(dets: &[Detection], gts: &BTreeMap<String, Vec<Rect>>, threshold: f64) -> APResult {
    let num_gt: usize = gts.values().map(Vec::len).sum();
    let flags = match_detections(dets, gts, threshold);
    let ordered: Vec<bool> = confidence_order(dets).into_iter().map(|i| flags[i]).collect();
    let tp = ordered.iter().filter(|&&f| f).count();
    let fp = ordered.len() - tp;
    APResult {
        ap: ap_from_flags(&ordered, num_gt),
        tp,
        fp,
        num_gt,
    }
}

/// Area under the monotone precision envelope for confidence-ordered TP flags.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// AP of detections of `class` against ground-truth boxes of `role`.
pub fn evaluate_ap(dets: &[Detection], gt: &[RawRecord], class: &str, role: BoxRole, threshold: f64) -> APResult {
    let gts: BTreeMap<String, Vec<Rect>> = gt
        .iter()
        .map(|r| (r.id.clone(), r.boxes.with_role(role).into_iter().map(Rect::from).collect()))
        .collect();
    let selected: Vec<Detection> = dets.iter().filter(|d| d.class == class).cloned().collect();
    voc_ap(&selected, &gts, threshold)
}
