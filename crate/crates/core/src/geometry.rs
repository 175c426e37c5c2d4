//! One-dimensional interval arithmetic.
//!
//! Intervals are half-open `[start, end)` spans in frame units (or in
//! window-normalized units inside the network). Touching endpoints do not
//! overlap. This module provides the IoU family (IoU, GIoU, DIoU), their
//! closed-form gradients, greedy non-maximum suppression and the greedy
//! confidence-ordered matcher shared by every metric.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A nonempty half-open interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct Interval {
    start: f64,
    end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if start.is_finite() && end.is_finite() && end > start {
            Ok(Self { start, end })
        } else {
            Err(Error::InvalidInterval { start, end })
        }
    }

    pub fn from_center_length(center: f64, length: f64) -> Result<Self> {
        Self::new(center - 0.5 * length, center + 0.5 * length)
    }

    #[inline]
    pub fn start(&self) -> f64 {
        self.start
    }

    #[inline]
    pub fn end(&self) -> f64 {
        self.end
    }

    #[inline]
    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    #[inline]
    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    /// Length of the overlap with `other`; zero for disjoint or touching intervals.
    pub fn intersection_length(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Smallest interval covering both.
    pub fn hull(&self, other: &Interval) -> Interval {
        Interval {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
        }
    }

    pub fn contains(&self, other: &Interval) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn translate(&self, offset: f64) -> Result<Interval> {
        Interval::new(self.start + offset, self.end + offset)
    }

    pub fn scale(&self, factor: f64) -> Result<Interval> {
        Interval::new(self.start * factor, self.end * factor)
    }
}

impl TryFrom<(f64, f64)> for Interval {
    type Error = Error;

    fn try_from((start, end): (f64, f64)) -> Result<Self> {
        Interval::new(start, end)
    }
}

impl From<Interval> for (f64, f64) {
    fn from(iv: Interval) -> Self {
        (iv.start, iv.end)
    }
}

/// A detected interval with its confidence and per-category scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub interval: Interval,
    pub confidence: f64,
    pub category_scores: Vec<f64>,
    pub category: usize,
}

impl ScoredDetection {
    /// Builds a detection whose confidence is the top category score and whose
    /// label is the arg-max category (lowest index wins ties).
    pub fn from_scores(interval: Interval, category_scores: Vec<f64>) -> Self {
        let category = argmax(&category_scores);
        let confidence = category_scores.get(category).copied().unwrap_or(0.0);
        Self {
            interval,
            confidence,
            category_scores,
            category,
        }
    }

    /// Builds a detection with an externally produced confidence (e.g. a
    /// dedicated confidence branch). The label is still the arg-max category.
    pub fn with_confidence(interval: Interval, confidence: f64, category_scores: Vec<f64>) -> Self {
        let category = argmax(&category_scores);
        Self {
            interval,
            confidence,
            category_scores,
            category,
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Intersection over union.
pub fn iou(a: &Interval, b: &Interval) -> f64 {
    let inter = a.intersection_length(b);
    let union = a.length() + b.length() - inter;
    inter / union
}

/// Generalized IoU: `IoU - (|hull| - |union|) / |hull|`.
pub fn giou(a: &Interval, b: &Interval) -> f64 {
    let inter = a.intersection_length(b);
    let union = a.length() + b.length() - inter;
    let hull = a.hull(b).length();
    inter / union - (hull - union) / hull
}

/// Distance IoU: `IoU - (center distance)^2 / |hull|^2`.
pub fn diou(a: &Interval, b: &Interval) -> f64 {
    let hull = a.hull(b).length();
    let dc = a.center() - b.center();
    iou(a, b) - dc * dc / (hull * hull)
}

/// Which member of the IoU family drives the interval regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouVariant {
    Iou,
    Giou,
    #[default]
    Diou,
}

impl IouVariant {
    pub fn similarity(self, a: &Interval, b: &Interval) -> f64 {
        match self {
            IouVariant::Iou => iou(a, b),
            IouVariant::Giou => giou(a, b),
            IouVariant::Diou => diou(a, b),
        }
    }
}

/// A loss value with its partial derivatives with respect to the predicted
/// interval's start and end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_start: f64,
    pub d_end: f64,
}

/// `1 - similarity(pred, gt)` with closed-form gradients w.r.t. `pred`.
///
/// The min/max terms are differentiated piecewise. At a regime boundary
/// (coincident endpoints) the derivative of the left regime is used.
pub fn similarity_loss_with_grad(variant: IouVariant, pred: &Interval, gt: &Interval) -> LossGrad {
    let (ps, pe) = (pred.start, pred.end);
    let (gs, ge) = (gt.start, gt.end);

    let raw_inter = pe.min(ge) - ps.max(gs);
    let overlapping = raw_inter > 0.0;
    let inter = raw_inter.max(0.0);
    let (di_ds, di_de) = if overlapping {
        (if ps > gs { -1.0 } else { 0.0 }, if pe <= ge { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };

    let union = (pe - ps) + (ge - gs) - inter;
    let du_ds = -1.0 - di_ds;
    let du_de = 1.0 - di_de;

    let iou = inter / union;
    let u2 = union * union;
    let diou_ds = (di_ds * union - inter * du_ds) / u2;
    let diou_de = (di_de * union - inter * du_de) / u2;

    let (sim, ds, de) = match variant {
        IouVariant::Iou => (iou, diou_ds, diou_de),
        IouVariant::Giou => {
            let hull = pe.max(ge) - ps.min(gs);
            let dh_ds = if ps <= gs { -1.0 } else { 0.0 };
            let dh_de = if pe > ge { 1.0 } else { 0.0 };
            let h2 = hull * hull;
            // giou = iou - 1 + union / hull
            (
                iou - 1.0 + union / hull,
                diou_ds + (du_ds * hull - union * dh_ds) / h2,
                diou_de + (du_de * hull - union * dh_de) / h2,
            )
        }
        IouVariant::Diou => {
            let hull = pe.max(ge) - ps.min(gs);
            let dh_ds = if ps <= gs { -1.0 } else { 0.0 };
            let dh_de = if pe > ge { 1.0 } else { 0.0 };
            let dc = 0.5 * (ps + pe) - 0.5 * (gs + ge);
            let h2 = hull * hull;
            let h3 = h2 * hull;
            let penalty = dc * dc / h2;
            let dp_ds = dc / h2 - 2.0 * dc * dc * dh_ds / h3;
            let dp_de = dc / h2 - 2.0 * dc * dc * dh_de / h3;
            (iou - penalty, diou_ds - dp_ds, diou_de - dp_de)
        }
    };

    LossGrad {
        loss: 1.0 - sim,
        d_start: -ds,
        d_end: -de,
    }
}

/// DIoU loss `1 - diou(pred, gt)` with its gradient w.r.t. the predicted endpoints.
pub fn diou_loss_with_grad(pred: &Interval, gt: &Interval) -> LossGrad {
    similarity_loss_with_grad(IouVariant::Diou, pred, gt)
}

/// Total order used whenever detections are ranked: descending confidence,
/// then earlier start, then lower category index.
pub fn rank_order(a: &ScoredDetection, b: &ScoredDetection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.interval.start.total_cmp(&b.interval.start))
        .then(a.category.cmp(&b.category))
}

/// Indices of `detections` sorted by [`rank_order`]; equal keys keep input order.
pub fn ranked_indices(detections: &[ScoredDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| rank_order(&detections[i], &detections[j]));
    order
}

/// Greedy non-maximum suppression.
///
/// A detection is suppressed when its IoU with an already kept detection is
/// strictly above `iou_threshold`. The result is in rank order.
pub fn nms(detections: &[ScoredDetection], iou_threshold: f64) -> Vec<ScoredDetection> {
    let mut kept: Vec<ScoredDetection> = Vec::new();
    for idx in ranked_indices(detections) {
        let cand = &detections[idx];
        if kept.iter().all(|k| iou(&k.interval, &cand.interval) <= iou_threshold) {
            kept.push(cand.clone());
        }
    }
    kept
}

/// Outcome of greedy matching between predictions and ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Matching {
    /// For each prediction (input order), the matched ground-truth index.
    pub pred_to_gt: Vec<Option<usize>>,
    /// For each ground truth, the matched prediction index.
    pub gt_to_pred: Vec<Option<usize>>,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.gt_to_pred.iter().filter(|m| m.is_some()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.pred_to_gt.iter().filter(|m| m.is_none()).count()
    }

    pub fn false_negatives(&self) -> usize {
        self.gt_to_pred.iter().filter(|m| m.is_none()).count()
    }
}

/// Greedy confidence-ordered matching.
///
/// Predictions are visited in rank order; each takes the still-unmatched
/// ground truth with the highest IoU that is at least `iou_threshold`
/// (lowest index on ties). When `gt_categories` is given, only ground truth
/// of the prediction's category is eligible.
pub fn match_greedy(
    preds: &[ScoredDetection],
    gts: &[Interval],
    iou_threshold: f64,
    gt_categories: Option<&[usize]>,
) -> Matching {
    let mut matching = Matching {
        pred_to_gt: vec![None; preds.len()],
        gt_to_pred: vec![None; gts.len()],
    };
    for pi in ranked_indices(preds) {
        let pred = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matching.gt_to_pred[gi].is_some() {
                continue;
            }
            if let Some(cats) = gt_categories {
                if cats[gi] != pred.category {
                    continue;
                }
            }
            let v = iou(&pred.interval, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            matching.pred_to_gt[pi] = Some(gi);
            matching.gt_to_pred[gi] = Some(pi);
        }
    }
    matching
}
