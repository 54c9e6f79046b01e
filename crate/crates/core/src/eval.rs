//! Detection evaluation: IoU matching and 101-point interpolated AP at a
//! single IoU threshold, averaged over classes present in the ground truth.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::detector::loss::cxcywh_to_xyxy;
use crate::detector::{Box4, BoxSet};
use crate::error::{Error, Result};

pub const IOU_THRESHOLD: f64 = 0.5;
pub const MAX_DETECTIONS: usize = 300;

/// IoU of two `[x1, y1, x2, y2]` boxes.
pub fn iou(a: &Box4, b: &Box4) -> Result<f64> {
    for r in [a, b] {
        if !(r[2] > r[0] && r[3] > r[1]) {
            return Err(Error::Contract(format!("degenerate box {r:?}")));
        }
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    Ok(inter / union)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub class: u32,
    pub score: f64,
    pub tp: bool,
}

/// Labels the top `max_dets` detections of one image as true or false
/// positives. Within each class, detections claim (in score order) the
/// unmatched ground-truth box of highest IoU at or above `iou_thr`; equal
/// IoUs go to the earlier box.
pub fn match_detections(dets: &BoxSet, gts: &BoxSet, iou_thr: f64, max_dets: usize) -> Result<Vec<Label>> {
    let scores = dets
        .scores
        .as_ref()
        .ok_or_else(|| Error::Contract("detections carry no scores".into()))?;
    if scores.len() != dets.boxes.len() || dets.classes.len() != dets.boxes.len() {
        return Err(Error::Contract("detection fields differ in length".into()));
    }
    if gts.classes.len() != gts.boxes.len() {
        return Err(Error::Contract("ground-truth fields differ in length".into()));
    }
    if scores.windows(2).any(|w| !(w[0] >= w[1])) {
        return Err(Error::Contract("detections are not sorted by descending score".into()));
    }
    let gt_xyxy: Vec<Box4> = gts.boxes.iter().map(cxcywh_to_xyxy).collect();
    let mut taken = vec![false; gts.boxes.len()];
    let n = dets.boxes.len().min(max_dets);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let d = cxcywh_to_xyxy(&dets.boxes[i]);
        let class = dets.classes[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt_xyxy.iter().enumerate() {
            if taken[j] || gts.classes[j] != class {
                continue;
            }
            let v = iou(&d, g)?;
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        labels.push(Label {
            class,
            score: scores[i],
            tp: best.is_some(),
        });
    }
    Ok(labels)
}

/// 101-point interpolated AP. `labels` are `(score, is_tp)` in insertion
/// order; ties in score keep that order. `None` when the class has neither
/// ground truth nor detections.
pub fn average_precision(labels: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return (!labels.is_empty()).then_some(0.0);
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[b].0.total_cmp(&labels[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for &k in &order {
        if labels[k].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let total: f64 = (0..=100)
        .map(|i| {
            let r = i as f64 * 0.01;
            let k = recall.partition_point(|&x| x < r);
            precision.get(k).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class_ap: BTreeMap<u32, f64>,
    pub map50: f64,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Evaluates per-image detections against ground truth over `classes`.
/// `map50` averages AP over the classes that have ground truth (0 if none
/// do).
pub fn evaluate(
    dets: &BTreeMap<u64, BoxSet>,
    gts: &BTreeMap<u64, BoxSet>,
    classes: &[u32],
    iou_thr: f64,
    max_dets: usize,
) -> Result<EvalResult> {
    if !dets.keys().eq(gts.keys()) {
        let a: BTreeSet<_> = dets.keys().collect();
        let b: BTreeSet<_> = gts.keys().collect();
        let diff: Vec<_> = a.symmetric_difference(&b).collect();
        return Err(Error::Contract(format!("image ids differ between detections and ground truth: {diff:?}")));
    }
    let mut per_class: BTreeMap<u32, (Vec<(f64, bool)>, usize)> = classes.iter().map(|&c| (c, (Vec::new(), 0))).collect();
    let (mut n_gt, mut n_det) = (0, 0);
    for (id, gt) in gts {
        let labels = match_detections(&dets[id], gt, iou_thr, max_dets)?;
        n_det += labels.len();
        for l in labels {
            if let Some(e) = per_class.get_mut(&l.class) {
                e.0.push((l.score, l.tp));
            }
        }
        for c in &gt.classes {
            if let Some(e) = per_class.get_mut(c) {
                e.1 += 1;
                n_gt += 1;
            }
        }
    }
    let mut per_class_ap = BTreeMap::new();
    let mut present = Vec::new();
    for (c, (labels, g)) in &per_class {
        if let Some(ap) = average_precision(labels, *g) {
            per_class_ap.insert(*c, ap);
            if *g > 0 {
                present.push(ap);
            }
        }
    }
    let map50 = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalResult {
        per_class_ap,
        map50,
        n_images: gts.len(),
        n_gt,
        n_det,
    })
}

/// One detection in COCO results form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn to_records(ds: &DatasetIndex, image_id: u64, dets: &BoxSet) -> Result<Vec<DetectionRecord>> {
    let img = ds
        .image(image_id)
        .ok_or_else(|| Error::Contract(format!("image {image_id} is not in the dataset")))?;
    let (w, h) = (img.width as f64, img.height as f64);
    let scores = dets.scores.as_deref().unwrap_or(&[]);
    dets.boxes
        .iter()
        .zip(&dets.classes)
        .zip(scores)
        .map(|((b, &c), &score)| {
            let category_id = ds
                .category_id(c)
                .ok_or_else(|| Error::Contract(format!("class index {c} has no category")))?;
            Ok(DetectionRecord {
                image_id,
                category_id,
                bbox: [(b[0] - b[2] / 2.0) * w, (b[1] - b[3] / 2.0) * h, b[2] * w, b[3] * h],
                score,
            })
        })
        .collect()
}

/// Groups records by image into score-sorted detection sets. Every image
/// of `ds` gets an entry, empty when it has no records.
pub fn from_records(ds: &DatasetIndex, records: &[DetectionRecord]) -> Result<BTreeMap<u64, BoxSet>> {
    let mut out: BTreeMap<u64, Vec<(f64, Box4, u32)>> = ds.images().iter().map(|i| (i.id, Vec::new())).collect();
    for r in records {
        let img = ds
            .image(r.image_id)
            .ok_or_else(|| Error::Contract(format!("record references unknown image {}", r.image_id)))?;
        let class = ds
            .class_index(r.category_id)
            .ok_or_else(|| Error::Contract(format!("record references unknown category {}", r.category_id)))?;
        let (w, h) = (img.width as f64, img.height as f64);
        let [x, y, bw, bh] = r.bbox;
        let b = [(x + bw / 2.0) / w, (y + bh / 2.0) / h, bw / w, bh / h];
        out.get_mut(&r.image_id).expect("image present").push((r.score, b, class));
    }
    Ok(out
        .into_iter()
        .map(|(id, mut v)| {
            v.sort_by(|a, b| b.0.total_cmp(&a.0));
            let set = BoxSet {
                boxes: v.iter().map(|d| d.1).collect(),
                classes: v.iter().map(|d| d.2).collect(),
                scores: Some(v.iter().map(|d| d.0).collect()),
            };
            (id, set)
        })
        .collect())
}
