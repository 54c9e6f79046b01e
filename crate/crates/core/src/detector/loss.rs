//! Set-prediction loss: optimal one-to-one matching followed by
//! classification, L1 and generalized-IoU terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

use super::diffusion::MIN_SIDE;
use super::hungarian::hungarian_match;
use super::{Box4, BoxSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

pub fn cxcywh_to_xyxy(b: &Box4) -> Box4 {
    let (w, h) = (b[2].max(MIN_SIDE), b[3].max(MIN_SIDE));
    [b[0] - w / 2.0, b[1] - h / 2.0, b[0] + w / 2.0, b[1] + h / 2.0]
}

/// Generalized IoU of two normalized cx,cy,w,h boxes.
pub fn giou(a: &Box4, b: &Box4) -> f64 {
    let (a, b) = (cxcywh_to_xyxy(a), cxcywh_to_xyxy(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

/// Matching cost between every ground-truth box (rows) and prediction
/// (columns).
pub fn matching_cost(
    logits: &[f64],
    n_logits: usize,
    pred_boxes: &[f64],
    gt: &BoxSet,
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    let n_pred = pred_boxes.len() / 4;
    let log_probs: Vec<Vec<f64>> = logits
        .chunks(n_logits)
        .map(|row| {
            let lse = crate::tensor::log_sum_exp(row);
            row.iter().map(|x| x - lse).collect()
        })
        .collect();
    gt.boxes
        .iter()
        .zip(&gt.classes)
        .map(|(g, &c)| {
            (0..n_pred)
                .map(|j| {
                    let p: Box4 = pred_boxes[j * 4..j * 4 + 4].try_into().unwrap();
                    let l1: f64 = p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum();
                    w.cls * -log_probs[j][c as usize] + w.l1 * l1 + w.giou * (1.0 - giou(&p, g))
                })
                .collect()
        })
        .collect()
}

/// `logits: N×(C+1)` with background at index `C`; `boxes: N×4` predicted
/// normalized cx,cy,w,h.
pub fn set_loss(tape: &mut Tape, logits: Var, boxes: Var, gt: &BoxSet, w: &LossWeights) -> Result<Var> {
    let (n, k) = tape.dims(logits);
    if tape.dims(boxes) != (n, 4) {
        let (r, c) = tape.dims(boxes);
        return Err(Error::shape("set_loss", &[n, 4], &[r, c]));
    }
    if gt.boxes.len() != gt.classes.len() {
        return Err(Error::Contract("ground-truth boxes and classes differ in length".into()));
    }
    let background = k - 1;
    if let Some(&bad) = gt.classes.iter().find(|&&c| c as usize >= background) {
        return Err(Error::Contract(format!("class {bad} out of range for {background} classes")));
    }
    let mut targets = vec![background; n];
    if gt.boxes.is_empty() {
        let ce = tape.cross_entropy(logits, &targets)?;
        return Ok(tape.scale(ce, w.cls));
    }

    let cost = matching_cost(tape.value(logits), k, tape.value(boxes), gt, w);
    let pairs = hungarian_match(&cost)?;
    for &(g, p) in &pairs {
        targets[p] = gt.classes[g] as usize;
    }
    let ce = tape.cross_entropy(logits, &targets)?;

    let pred_rows: Vec<usize> = pairs.iter().map(|&(_, p)| p).collect();
    let gt_flat: Vec<f64> = pairs.iter().flat_map(|&(g, _)| gt.boxes[g]).collect();
    let m = pairs.len();
    let norm = 1.0 / gt.boxes.len() as f64;

    let pred = tape.gather_rows(boxes, &pred_rows)?;
    let target = tape.constant(m, 4, gt_flat)?;
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    let l1 = tape.sum(abs);
    let l1 = tape.scale(l1, norm);

    let g = giou_rows(tape, pred, target)?;
    let one_minus = tape.scale(g, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let giou_loss = tape.sum(one_minus);
    let giou_loss = tape.scale(giou_loss, norm);

    let a = tape.scale(ce, w.cls);
    let b = tape.scale(l1, w.l1);
    let c = tape.scale(giou_loss, w.giou);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

struct Corners {
    x1: Var,
    y1: Var,
    x2: Var,
    y2: Var,
    area: Var,
}

fn corners(tape: &mut Tape, b: Var) -> Result<Corners> {
    let cx = tape.slice_cols(b, 0, 1)?;
    let cy = tape.slice_cols(b, 1, 2)?;
    let w = tape.slice_cols(b, 2, 3)?;
    let w = tape.clamp_min(w, MIN_SIDE);
    let h = tape.slice_cols(b, 3, 4)?;
    let h = tape.clamp_min(h, MIN_SIDE);
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    Ok(Corners {
        x1: tape.sub(cx, hw)?,
        y1: tape.sub(cy, hh)?,
        x2: tape.add(cx, hw)?,
        y2: tape.add(cy, hh)?,
        area: tape.mul(w, h)?,
    })
}

/// Row-wise GIoU of two `M×4` cx,cy,w,h matrices, as an `M×1` column.
fn giou_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let a = corners(tape, a)?;
    let b = corners(tape, b)?;
    let ix1 = tape.maximum(a.x1, b.x1)?;
    let iy1 = tape.maximum(a.y1, b.y1)?;
    let ix2 = tape.minimum(a.x2, b.x2)?;
    let iy2 = tape.minimum(a.y2, b.y2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.clamp_min(iw, 0.0);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.clamp_min(ih, 0.0);
    let inter = tape.mul(iw, ih)?;
    let sum = tape.add(a.area, b.area)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;

    let hx1 = tape.minimum(a.x1, b.x1)?;
    let hy1 = tape.minimum(a.y1, b.y1)?;
    let hx2 = tape.maximum(a.x2, b.x2)?;
    let hy2 = tape.maximum(a.y2, b.y2)?;
    let hw = tape.sub(hx2, hx1)?;
    let hh = tape.sub(hy2, hy1)?;
    let hull = tape.mul(hw, hh)?;
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull)?;
    tape.sub(iou, penalty)
}
