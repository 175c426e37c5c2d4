//! Training objectives over raw head outputs.
//!
//! Every loss here returns its gradient with respect to the raw outputs
//! alongside the value; the network back-propagates that gradient.

use crate::anchors::{decode_raw_with_jacobian, AnchorTable, AssignmentResult};
use crate::error::{Error, Result};
use crate::geometry::{similarity_loss_with_grad, Interval, IouVariant, LossGrad};
use crate::network::{NetworkConfig, RawWindowPrediction};

/// Loss terms of one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean interval loss over positive slots.
    pub interval_loss: f64,
    /// Mean recognition loss over all slots (or the confidence-branch loss).
    pub recognition_loss: f64,
    pub total: f64,
    pub num_positive: usize,
    pub num_slots: usize,
}

/// Loss weights and interval similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub variant: IouVariant,
    pub alpha: f64,
    pub beta: f64,
    pub with_confidence_branch: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            variant: IouVariant::Diou,
            alpha: 1.0,
            beta: 2.0,
            with_confidence_branch: false,
        }
    }
}

impl From<&NetworkConfig> for Objective {
    fn from(cfg: &NetworkConfig) -> Self {
        Self {
            variant: cfg.loss_variant,
            alpha: cfg.alpha,
            beta: cfg.beta,
            with_confidence_branch: cfg.with_confidence_branch,
        }
    }
}

/// `1 - similarity(pred, gt)`, or zero for a negative slot.
pub fn interval_loss(pred: &Interval, gt: Option<&Interval>, variant: IouVariant) -> f64 {
    gt.map_or(0.0, |g| 1.0 - variant.similarity(pred, g))
}

/// Log of `1 + exp(x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one logit against a target in `[0, 1]`.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    softplus(logit) - target * logit
}

/// Sum over categories of the binary cross-entropy of `sigmoid(logits)`.
pub fn recognition_loss(logits: &[f64], target: &[f64]) -> f64 {
    logits.iter().zip(target).map(|(&z, &t)| bce_with_logit(z, t)).sum()
}

/// [`recognition_loss`] plus `scale * dL/dlogit` accumulated into `grad`.
pub fn recognition_loss_with_grad(logits: &[f64], target: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for ((&z, &t), g) in logits.iter().zip(target).zip(grad.iter_mut()) {
        loss += bce_with_logit(z, t);
        *g += scale * (sigmoid(z) - t);
    }
    loss
}

/// Categorical cross-entropy of `softmax(logits)` against class `target`,
/// with `scale * dL/dlogit` accumulated into `grad`.
pub fn categorical_loss_with_grad(logits: &[f64], target: usize, scale: f64, grad: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    for (i, (&z, g)) in logits.iter().zip(grad.iter_mut()).enumerate() {
        let p = (z - log_z).exp();
        *g += scale * (p - if i == target { 1.0 } else { 0.0 });
    }
    log_z - logits[target]
}

/// Category target of a slot. With a single output category the target is
/// objectness: one for positives regardless of the ground-truth category.
fn slot_target(assignment: &AssignmentResult, slot: usize, categories: usize) -> Vec<f64> {
    if categories == 1 {
        vec![if assignment.is_positive(slot) { 1.0 } else { 0.0 }]
    } else {
        assignment.category_target(slot)
    }
}

/// Mean interval loss over positives; gradient (scaled by `scale`) is
/// accumulated into `grad.interval`.
fn interval_term(
    raw: &RawWindowPrediction,
    anchors: &AnchorTable,
    assignment: &AssignmentResult,
    variant: IouVariant,
    scale: f64,
    grad: &mut RawWindowPrediction,
) -> f64 {
    let norm = assignment.num_positive().max(1) as f64;
    let mut sum = 0.0;
    for (slot, anchor) in anchors.slots().iter().enumerate() {
        let Some(gt) = assignment.gt_for(slot) else {
            continue;
        };
        let (pred, jac) = decode_raw_with_jacobian(raw.interval_params(slot), anchor);
        let LossGrad { loss, d_start, d_end } = similarity_loss_with_grad(variant, &pred, gt);
        sum += loss;
        let w = scale / norm;
        grad.interval[2 * slot] += w * (d_start * jac[0][0] + d_end * jac[1][0]);
        grad.interval[2 * slot + 1] += w * (d_start * jac[0][1] + d_end * jac[1][1]);
    }
    sum / norm
}

fn check_sizes(raw: &RawWindowPrediction, anchors: &AnchorTable, assignment: &AssignmentResult) -> Result<()> {
    let n = anchors.len();
    if raw.num_slots() != n || assignment.num_slots() != n || raw.logits.len() != n * raw.num_categories {
        return Err(Error::Shape(format!(
            "prediction has {} slots, assignment {}, anchor table {n}",
            raw.num_slots(),
            assignment.num_slots()
        )));
    }
    Ok(())
}

/// Weighted objective of one window and its gradient with respect to `raw`.
///
/// Interval loss is averaged over positive slots, recognition loss over all
/// slots; `total = alpha * interval + beta * recognition`. When the objective
/// has a confidence branch, the recognition term is
/// [`variant_confidence_loss`] instead.
pub fn total_loss(
    raw: &RawWindowPrediction,
    anchors: &AnchorTable,
    assignment: &AssignmentResult,
    objective: &Objective,
) -> Result<(LossBreakdown, RawWindowPrediction)> {
    check_sizes(raw, anchors, assignment)?;
    let n = anchors.len();
    let c = raw.num_categories;
    let mut grad = RawWindowPrediction::zeros(n, c, raw.confidence.is_some());
    let interval = interval_term(raw, anchors, assignment, objective.variant, objective.alpha, &mut grad);
    let recognition = if objective.with_confidence_branch {
        confidence_term(raw, assignment, objective.beta, &mut grad)?
    } else {
        let scale = objective.beta / n as f64;
        let mut sum = 0.0;
        for slot in 0..n {
            let target = slot_target(assignment, slot, c);
            sum += recognition_loss_with_grad(
                raw.slot_logits(slot),
                &target,
                scale,
                &mut grad.logits[slot * c..(slot + 1) * c],
            );
        }
        sum / n as f64
    };
    let breakdown = LossBreakdown {
        interval_loss: interval,
        recognition_loss: recognition,
        total: objective.alpha * interval + objective.beta * recognition,
        num_positive: assignment.num_positive(),
        num_slots: n,
    };
    Ok((breakdown, grad))
}

fn confidence_term(
    raw: &RawWindowPrediction,
    assignment: &AssignmentResult,
    scale: f64,
    grad: &mut RawWindowPrediction,
) -> Result<f64> {
    let conf = raw.confidence.as_ref().ok_or(Error::NoConfidenceBranch)?;
    let c = raw.num_categories;
    let n = conf.len();
    let positives = assignment.num_positive().max(1) as f64;
    let conf_grad = grad.confidence.get_or_insert_with(|| vec![0.0; n]);
    let mut bce = 0.0;
    let mut cce = 0.0;
    for (slot, &z) in conf.iter().enumerate() {
        let t = if assignment.is_positive(slot) { 1.0 } else { 0.0 };
        bce += bce_with_logit(z, t);
        conf_grad[slot] += scale / n as f64 * (sigmoid(z) - t);
        if assignment.is_positive(slot) {
            let target = if c == 1 {
                0
            } else {
                assignment.category_for(slot).unwrap_or(0)
            };
            cce += categorical_loss_with_grad(
                raw.slot_logits(slot),
                target,
                scale / positives,
                &mut grad.logits[slot * c..(slot + 1) * c],
            );
        }
    }
    Ok(bce / n as f64 + cce / positives)
}

/// Confidence-branch objective: BCE of the confidence logit against the
/// positive/negative label averaged over all slots, plus categorical
/// cross-entropy of the category logits averaged over positive slots.
pub fn variant_confidence_loss(raw: &RawWindowPrediction, assignment: &AssignmentResult) -> Result<f64> {
    let mut scratch = RawWindowPrediction::zeros(raw.num_slots(), raw.num_categories, true);
    confidence_term(raw, assignment, 1.0, &mut scratch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{assign_targets, build_anchors, PyramidLayout, DEFAULT_SCALE_MULTIPLIERS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iv(s: f64, e: f64) -> Interval {
        Interval::new(s, e).unwrap()
    }

    fn table(s: usize) -> AnchorTable {
        build_anchors(PyramidLayout::new(s).unwrap(), DEFAULT_SCALE_MULTIPLIERS).unwrap()
    }

    #[test]
    fn interval_loss_cases() {
        let a = iv(0.0, 4.0);
        assert_eq!(interval_loss(&a, None, IouVariant::Diou), 0.0);
        for v in [IouVariant::Iou, IouVariant::Giou, IouVariant::Diou] {
            assert!(interval_loss(&a, Some(&a), v).abs() < 1e-15);
        }
        let b = iv(6.0, 10.0);
        let l_iou = similarity_loss_with_grad(IouVariant::Iou, &a, &b);
        assert_eq!(l_iou.loss, 1.0);
        assert_eq!((l_iou.d_start, l_iou.d_end), (0.0, 0.0));
        let l_diou = similarity_loss_with_grad(IouVariant::Diou, &a, &b);
        assert!((l_diou.loss - 1.36).abs() < 1e-12);
        assert!(l_diou.d_start != 0.0 || l_diou.d_end != 0.0);
    }

    #[test]
    fn recognition_loss_cases() {
        assert!((recognition_loss(&[0.0; 4], &[0.0; 4]) - 4.0 * 2f64.ln()).abs() < 1e-12);
        let saturated = recognition_loss(&[50.0, -50.0, -50.0, -50.0], &[1.0, 0.0, 0.0, 0.0]);
        assert!(saturated < 1e-20);
        assert!(recognition_loss(&[1000.0, -1000.0], &[0.0, 1.0]).is_finite());
        let mut g = [0.0];
        recognition_loss_with_grad(&[0.0], &[1.0], 1.0, &mut g);
        assert_eq!(g[0], -0.5);
    }

    #[test]
    fn untrained_window_without_events() {
        let t = table(64);
        assert_eq!(t.len(), 180);
        let raw = RawWindowPrediction::zeros(180, 4, false);
        let asg = AssignmentResult::all_negative(180, 4);
        let (b, _) = total_loss(&raw, &t, &asg, &Objective::default()).unwrap();
        assert!((b.total - 2.0 * 4.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(b.interval_loss, 0.0);
    }

    #[test]
    fn beta_scales_recognition_linearly() {
        let t = table(32);
        let asg = assign_targets(&t, &[(iv(0.2, 0.45), 1)], 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut raw = RawWindowPrediction::zeros(t.len(), 3, false);
        raw.logits.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        let base = Objective::default();
        let doubled = Objective { beta: 4.0, ..base };
        let (a, _) = total_loss(&raw, &t, &asg, &base).unwrap();
        let (b, _) = total_loss(&raw, &t, &asg, &doubled).unwrap();
        assert_eq!(b.total - b.interval_loss, 2.0 * (a.total - a.interval_loss));
    }

    #[test]
    fn confidence_variant_cases() {
        let t = table(32);
        let raw = RawWindowPrediction::zeros(t.len(), 4, false);
        let asg = AssignmentResult::all_negative(t.len(), 4);
        assert!(matches!(
            variant_confidence_loss(&raw, &asg),
            Err(Error::NoConfidenceBranch)
        ));

        // One slot, positive, uniform logits and zero confidence logit.
        let mut one = AssignmentResult::all_negative(1, 4);
        one.gts.push(iv(0.0, 1.0));
        one.gt_categories.push(2);
        one.matched_gt[0] = Some(0);
        let raw = RawWindowPrediction::zeros(1, 4, true);
        let v = variant_confidence_loss(&raw, &one).unwrap();
        assert!((v - (2f64.ln() + 4f64.ln())).abs() < 1e-12);

        // A negative slot contributes only the confidence BCE.
        let neg = AssignmentResult::all_negative(1, 4);
        let mut raw = RawWindowPrediction::zeros(1, 4, true);
        raw.logits = vec![3.0, -1.0, 0.5, 2.0];
        assert!((variant_confidence_loss(&raw, &neg).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn recognition_is_convex_along_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(-20.0..20.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-20.0..20.0)).collect();
            let t: Vec<f64> = (0..4).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let lhs = recognition_loss(&mid, &t);
            let rhs = 0.5 * (recognition_loss(&a, &t) + recognition_loss(&b, &t));
            assert!(lhs <= rhs + 1e-9);
        }
    }

    fn check_raw_gradient(objective: Objective, categories: usize, with_conf: bool, seed: u64) {
        let t = table(32);
        let gts = [
            (iv(0.1, 0.3), 0),
            (iv(0.5, 0.62), categories - 1),
            (iv(0.7, 0.95), 1 % categories),
        ];
        let asg = assign_targets(&t, &gts, categories, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = RawWindowPrediction::zeros(t.len(), categories, with_conf);
        raw.interval.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        raw.logits.iter_mut().for_each(|v| *v = rng.random_range(-4.0..4.0));
        if let Some(c) = raw.confidence.as_mut() {
            c.iter_mut().for_each(|v| *v = rng.random_range(-4.0..4.0));
        }
        let (_, grad) = total_loss(&raw, &t, &asg, &objective).unwrap();
        let value = |r: &RawWindowPrediction| total_loss(r, &t, &asg, &objective).unwrap().0.total;
        let h = 1e-6;
        let mut checked = 0;
        let mut probe = |get: &dyn Fn(&mut RawWindowPrediction) -> &mut f64, analytic: f64| {
            let mut plus = raw.clone();
            *get(&mut plus) += h;
            let mut minus = raw.clone();
            *get(&mut minus) -= h;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {analytic} numeric {numeric}");
            checked += 1;
        };
        for slot in 0..t.len() {
            if asg.is_positive(slot) {
                for k in 0..2 {
                    probe(&|r| &mut r.interval[2 * slot + k], grad.interval[2 * slot + k]);
                }
            } else {
                assert_eq!(grad.interval[2 * slot..2 * slot + 2], [0.0, 0.0]);
            }
        }
        for i in (0..raw.logits.len()).step_by(7) {
            probe(&|r| &mut r.logits[i], grad.logits[i]);
        }
        if with_conf {
            for i in (0..t.len()).step_by(5) {
                probe(
                    &|r| &mut r.confidence.as_mut().unwrap()[i],
                    grad.confidence.as_ref().unwrap()[i],
                );
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn raw_output_gradients_match_finite_differences() {
        for variant in [IouVariant::Diou, IouVariant::Giou, IouVariant::Iou] {
            let obj = Objective {
                variant,
                ..Objective::default()
            };
            check_raw_gradient(obj, 4, false, 11);
        }
        check_raw_gradient(Objective::default(), 1, false, 12);
        let conf = Objective {
            with_confidence_branch: true,
            ..Objective::default()
        };
        check_raw_gradient(conf, 3, true, 13);
    }

    #[test]
    fn spotting_only_uses_objectness() {
        let t = table(32);
        let asg = assign_targets(&t, &[(iv(0.1, 0.3), 2)], 4, 0.5);
        let raw1 = RawWindowPrediction::zeros(t.len(), 1, false);
        let raw4 = RawWindowPrediction::zeros(t.len(), 4, false);
        let (a, _) = total_loss(&raw1, &t, &asg, &Objective::default()).unwrap();
        let (b, _) = total_loss(&raw4, &t, &asg, &Objective::default()).unwrap();
        assert_eq!(a.interval_loss, b.interval_loss);
        assert!((a.recognition_loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn network_parameter_gradients_match_finite_differences() {
        use crate::autograd::Graph;
        use crate::network::{DetectionNetwork, WindowFeatures};

        let cfg = NetworkConfig::tiny();
        let mut net = DetectionNetwork::new(cfg.clone(), 21).unwrap();
        let t = cfg.anchors().unwrap();
        let asg = assign_targets(&t, &[(iv(0.1, 0.3), 0), (iv(0.55, 0.7), 2)], 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = cfg.segments * cfg.frames_per_segment * cfg.input_dim;
        let window = WindowFeatures::new(
            cfg.segments,
            cfg.frames_per_segment,
            cfg.input_dim,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let obj = Objective::from(&cfg);
        let loss = |net: &DetectionNetwork| {
            let raw = net.predict(&window).unwrap();
            total_loss(&raw, &t, &asg, &obj).unwrap().0.total
        };
        let mut g = Graph::new();
        let vars = net.forward(&mut g, &window).unwrap();
        let raw = net.collect(&g, &vars);
        let (_, out_grad) = total_loss(&raw, &t, &asg, &obj).unwrap();
        let grads = net.backward(&g, &vars, &out_grad);

        let names: Vec<String> = net.params().keys().cloned().collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..240 {
            let name = &names[rng.random_range(0..names.len())];
            let i = rng.random_range(0..net.params()[name].len());
            let orig = net.params()[name].data[i];
            net.params_mut().get_mut(name).unwrap().data[i] = orig + h;
            let up = loss(&net);
            net.params_mut().get_mut(name).unwrap().data[i] = orig - h;
            let down = loss(&net);
            net.params_mut().get_mut(name).unwrap().data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[name].data[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
