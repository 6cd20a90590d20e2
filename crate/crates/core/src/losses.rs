//! Training objectives, built as tape expressions so every term is
//! differentiable end to end.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::groundtruth::SIGMA_G;

/// Probabilities are clamped into `[EPS, 1 - EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma_g: f64,
    pub smooth_l1_beta: f64,
    pub w_center: f64,
    pub w_bound: f64,
    pub w_iou: f64,
    pub w_mask: f64,
    pub w_size: f64,
    pub w_semantic: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            sigma_g: SIGMA_G,
            smooth_l1_beta: 1.0,
            w_center: 1.0,
            w_bound: 1.0,
            w_iou: 1.0,
            w_mask: 1.0,
            w_size: 1.0,
            w_semantic: 1.0,
        }
    }
}

impl LossConfig {
    /// Plain binary cross-entropy in place of both focal terms.
    pub fn cross_entropy() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0)
            || self.gamma < 0.0
            || !(self.sigma_g > 0.0 && self.sigma_g < 1.0)
            || self.smooth_l1_beta <= 0.0
        {
            return Err(Error::Config(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

fn column_const(tape: &mut Tape, v: impl Iterator<Item = f64>) -> Var {
    tape.constant(Tensor::column(v.collect()))
}

/// Mean over points of `-α (1 - p_f)^γ log p_f`, with `p_f = p` on
/// positives and `1 - p` elsewhere.
fn focal_mean(tape: &mut Tape, probs: Var, positive: &[bool], alpha: f64, gamma: f64) -> Result<Var> {
    if tape.value(probs).len() != positive.len() {
        return Err(Error::Shape {
            op: "focal_loss",
            lhs: tape.shape(probs).to_vec(),
            rhs: vec![positive.len(), 1],
        });
    }
    let sign = column_const(tape, positive.iter().map(|&p| if p { 1.0 } else { -1.0 }));
    let shift = column_const(tape, positive.iter().map(|&p| if p { 0.0 } else { 1.0 }));
    let signed = tape.mul(probs, sign)?;
    let pf = tape.add(signed, shift)?;
    let pf = tape.clamp(pf, PROB_EPS, 1.0 - PROB_EPS);
    let log_pf = tape.log(pf);
    let per_point = if gamma == 0.0 {
        log_pf
    } else {
        let one_minus = tape.affine(pf, -1.0, 1.0);
        let weight = tape.powf(one_minus, gamma);
        tape.mul(weight, log_pf)?
    };
    let m = tape.mean(per_point);
    Ok(tape.scale(m, -alpha))
}

/// Center heatmap focal loss, normalized by the number of points.
pub fn center_focal_loss(tape: &mut Tape, q: Var, focal_positive: &[bool], cfg: &LossConfig) -> Result<Var> {
    focal_mean(tape, q, focal_positive, cfg.alpha, cfg.gamma)
}

/// Mean over candidates of `-log` of the probability on the true group.
pub fn size_ce_loss(tape: &mut Tape, probs: Var, gt_groups: &[usize]) -> Result<Var> {
    let (t, k) = (tape.value(probs).rows(), tape.value(probs).cols());
    if t != gt_groups.len() || gt_groups.iter().any(|&g| g >= k) {
        return Err(Error::Shape {
            op: "size_ce_loss",
            lhs: vec![t, k],
            rhs: vec![gt_groups.len()],
        });
    }
    let mut onehot = Tensor::zeros(t, k);
    for (r, &g) in gt_groups.iter().enumerate() {
        onehot.data_mut()[r * k + g] = 1.0;
    }
    let onehot = tape.constant(onehot);
    let picked = tape.mul(probs, onehot)?;
    let ones = tape.constant(Tensor::filled(k, 1, 1.0));
    let s = tape.matmul(picked, ones)?;
    let s = tape.clamp(s, PROB_EPS, 1.0 - PROB_EPS);
    let l = tape.log(s);
    let m = tape.mean(l);
    Ok(tape.scale(m, -1.0))
}

/// Mean smooth-ℓ1 over all boxes and all six coordinates.
pub fn bound_loss(tape: &mut Tape, boxes: Var, gt: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let gt = tape.constant(gt.clone());
    let d = tape.sub(boxes, gt)?;
    let s = tape.smooth_l1(d, cfg.smooth_l1_beta);
    Ok(tape.mean(s))
}

fn volume(tape: &mut Tape, extents: Var) -> Result<Var> {
    let x = tape.slice_cols(extents, 0, 1)?;
    let y = tape.slice_cols(extents, 1, 2)?;
    let z = tape.slice_cols(extents, 2, 3)?;
    let xy = tape.mul(x, y)?;
    tape.mul(xy, z)
}

/// Per-row generalized IoU (`T × 1`) between raw predicted corners, which
/// are canonicalized on the tape, and ground-truth boxes.
pub fn giou_rows(tape: &mut Tape, boxes: Var, gt: &Tensor) -> Result<Var> {
    let raw_lo = tape.slice_cols(boxes, 0, 3)?;
    let raw_hi = tape.slice_cols(boxes, 3, 6)?;
    let lo = tape.minimum(raw_lo, raw_hi)?;
    let hi = tape.maximum(raw_hi, raw_lo)?;
    let g = tape.constant(gt.clone());
    let glo = tape.slice_cols(g, 0, 3)?;
    let ghi = tape.slice_cols(g, 3, 6)?;

    let ihi = tape.minimum(hi, ghi)?;
    let ilo = tape.maximum(lo, glo)?;
    let iext = tape.sub(ihi, ilo)?;
    let iext = tape.relu(iext);
    let inter = volume(tape, iext)?;

    let pext = tape.sub(hi, lo)?;
    let gext = tape.sub(ghi, glo)?;
    let pv = volume(tape, pext)?;
    let gv = volume(tape, gext)?;
    let sum = tape.add(pv, gv)?;
    let union = tape.sub(sum, inter)?;
    if let Some(row) = tape.value(union).data().iter().position(|&u| u <= 0.0) {
        return Err(Error::Undefined(format!("GIoU of two zero-volume boxes (row {row})")));
    }

    let chi = tape.maximum(hi, ghi)?;
    let clo = tape.minimum(lo, glo)?;
    let cext = tape.sub(chi, clo)?;
    let hull = volume(tape, cext)?;

    let iou = tape.div(inter, union)?;
    let gap = tape.sub(hull, union)?;
    let frac = tape.div(gap, hull)?;
    tape.sub(iou, frac)
}

/// Mean of `1 - GIoU` over matched boxes.
pub fn giou_loss(tape: &mut Tape, boxes: Var, gt: &Tensor) -> Result<Var> {
    let g = giou_rows(tape, boxes, gt)?;
    let m = tape.mean(g);
    Ok(tape.affine(m, -1.0, 1.0))
}

/// Focal loss of each candidate mask against its instance membership,
/// averaged over candidates and points.
pub fn mask_focal_loss(
    tape: &mut Tape,
    masks: &[Var],
    membership: &[Vec<bool>],
    cfg: &LossConfig,
) -> Result<Var> {
    if masks.is_empty() || masks.len() != membership.len() {
        return Err(Error::Shape {
            op: "mask_focal_loss",
            lhs: vec![masks.len()],
            rhs: vec![membership.len()],
        });
    }
    let mut acc: Option<Var> = None;
    for (&m, pos) in masks.iter().zip(membership) {
        let l = focal_mean(tape, m, pos, cfg.alpha, cfg.gamma)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let total = acc.expect("non-empty");
    Ok(tape.scale(total, 1.0 / masks.len() as f64))
}

/// Mean per-point cross-entropy of semantic logits.
pub fn semantic_ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let probs = tape.softmax(logits);
    size_ce_loss(tape, probs, labels)
}

/// Scalar values of every term of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub center: f64,
    pub bound: f64,
    pub iou: f64,
    pub mask: f64,
    pub size: f64,
    pub semantic: f64,
}

impl LossValues {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("center", self.center),
            ("bound", self.bound),
            ("iou", self.iou),
            ("mask", self.mask),
            ("size", self.size),
            ("semantic", self.semantic),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        if !self.total.is_finite() {
            return Some(
                self.terms()
                    .into_iter()
                    .find(|(_, v)| !v.is_finite())
                    .map_or("total", |(n, _)| n),
            );
        }
        None
    }
}

/// Per-term tape nodes; `None` for terms without assigned candidates.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub center: Var,
    pub semantic: Var,
    pub bound: Option<Var>,
    pub iou: Option<Var>,
    pub mask: Option<Var>,
    pub size: Option<Var>,
}

pub struct LossReport {
    pub total: Var,
    pub values: LossValues,
}

/// Weighted sum of all present terms.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, cfg: &LossConfig) -> Result<LossReport> {
    let weighted = [
        (Some(terms.center), cfg.w_center),
        (terms.bound, cfg.w_bound),
        (terms.iou, cfg.w_iou),
        (terms.mask, cfg.w_mask),
        (terms.size, cfg.w_size),
        (Some(terms.semantic), cfg.w_semantic),
    ];
    let mut total: Option<Var> = None;
    for (v, w) in weighted {
        if let Some(v) = v {
            let s = tape.scale(v, w);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
    }
    let total = total.expect("center term always present");
    let val = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let values = LossValues {
        total: tape.value(total).item(),
        center: val(tape, Some(terms.center)),
        bound: val(tape, terms.bound),
        iou: val(tape, terms.iou),
        mask: val(tape, terms.mask),
        size: val(tape, terms.size),
        semantic: val(tape, Some(terms.semantic)),
    };
    if let Some(name) = values.first_non_finite() {
        return Err(Error::NonFinite(format!("loss term {name}")));
    }
    Ok(LossReport { total, values })
}
