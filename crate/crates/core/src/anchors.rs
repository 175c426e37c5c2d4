//! Anchor layout over the temporal pyramid, interval encoding and target
//! assignment.
//!
//! All geometry here is window-normalized: `0.0` is the first frame of a
//! sliding window and `1.0` its end. Every pyramid position carries six
//! prediction slots: slot 0 is anchor-free, slots 1..=5 regress offsets from
//! predefined anchors of increasing length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Interval};

pub const NUM_LEVELS: usize = 4;
pub const SLOTS_PER_POSITION: usize = 6;
pub const ANCHORS_PER_POSITION: usize = SLOTS_PER_POSITION - 1;
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [4, 8, 16, 32];

/// Smallest decoded interval length, in window units.
pub const MIN_DECODED_LENGTH: f64 = 1e-4;
/// Log-length offsets are clamped to this magnitude before exponentiation.
pub const MAX_LOG_LENGTH: f64 = 10.0;

pub const DEFAULT_SCALE_MULTIPLIERS: [f64; ANCHORS_PER_POSITION] = [0.5, 1.0, 1.5, 2.0, 3.0];

/// The four-level temporal pyramid of a window with `s` segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidLayout {
    segments: usize,
}

impl PyramidLayout {
    pub fn new(segments: usize) -> Result<Self> {
        if segments == 0 || !segments.is_multiple_of(32) {
            return Err(Error::Layout(format!(
                "segments per window must be a positive multiple of 32, got {segments}"
            )));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn level_lengths(&self) -> [usize; NUM_LEVELS] {
        LEVEL_STRIDES.map(|stride| self.segments / stride)
    }

    pub fn total_positions(&self) -> usize {
        self.level_lengths().iter().sum()
    }

    pub fn total_slots(&self) -> usize {
        SLOTS_PER_POSITION * self.total_positions()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    AnchorFree,
    AnchorBased,
}

/// One prediction slot. For anchor-based slots `length` is the anchor length;
/// for the anchor-free slot it is the width of the position's cell, which is
/// the geometry used when assigning targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSlot {
    pub level: usize,
    pub position: usize,
    pub slot: usize,
    pub kind: SlotKind,
    pub center: f64,
    pub length: f64,
}

impl AnchorSlot {
    /// Geometry used for IoU-based target assignment.
    pub fn matching_interval(&self) -> Interval {
        Interval::from_center_length(self.center, self.length).expect("anchor lengths are positive by construction")
    }
}

/// Every slot of a window, ordered level-major, then position, then slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTable {
    layout: PyramidLayout,
    multipliers: [f64; ANCHORS_PER_POSITION],
    slots: Vec<AnchorSlot>,
    level_offsets: [usize; NUM_LEVELS],
}

impl AnchorTable {
    pub fn layout(&self) -> PyramidLayout {
        self.layout
    }

    pub fn multipliers(&self) -> [f64; ANCHORS_PER_POSITION] {
        self.multipliers
    }

    pub fn slots(&self) -> &[AnchorSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Flat index of `(level, position, slot)`.
    pub fn index(&self, level: usize, position: usize, slot: usize) -> usize {
        self.level_offsets[level] + position * SLOTS_PER_POSITION + slot
    }
}

/// Lays out the anchors for `layout`.
///
/// Position `p` of a level with `L` positions is centered at `(p + 0.5) / L`;
/// its five anchors have lengths `multiplier * stride / s`.
pub fn build_anchors(layout: PyramidLayout, scale_multipliers: [f64; ANCHORS_PER_POSITION]) -> Result<AnchorTable> {
    if scale_multipliers.iter().any(|m| !m.is_finite() || *m <= 0.0)
        || scale_multipliers.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::Layout(format!(
            "anchor scale multipliers must be positive and strictly increasing, got {scale_multipliers:?}"
        )));
    }
    let s = layout.segments() as f64;
    let mut slots = Vec::with_capacity(layout.total_slots());
    let mut level_offsets = [0; NUM_LEVELS];
    for (level, (&len, &stride)) in layout.level_lengths().iter().zip(LEVEL_STRIDES.iter()).enumerate() {
        level_offsets[level] = slots.len();
        let cell = stride as f64 / s;
        for position in 0..len {
            let center = (position as f64 + 0.5) / len as f64;
            slots.push(AnchorSlot {
                level,
                position,
                slot: 0,
                kind: SlotKind::AnchorFree,
                center,
                length: cell,
            });
            for (k, m) in scale_multipliers.iter().enumerate() {
                slots.push(AnchorSlot {
                    level,
                    position,
                    slot: k + 1,
                    kind: SlotKind::AnchorBased,
                    center,
                    length: m * cell,
                });
            }
        }
    }
    Ok(AnchorTable {
        layout,
        multipliers: scale_multipliers,
        slots,
        level_offsets,
    })
}

/// Regression parameters of one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegressionTarget {
    /// Center offset in anchor lengths and log length ratio.
    AnchorBased { dc: f64, dl: f64 },
    /// Window-normalized start and end.
    AnchorFree { ys: f64, ye: f64 },
}

impl RegressionTarget {
    /// Interprets the two raw network outputs of a slot.
    ///
    /// Anchor-based slots emit `(dc, dl)` directly. The anchor-free slot emits
    /// offsets of its start and end from the cell boundaries, in cell widths,
    /// so a zero output decodes to the position's own cell.
    pub fn from_raw(raw: [f64; 2], anchor: &AnchorSlot) -> Self {
        match anchor.kind {
            SlotKind::AnchorBased => RegressionTarget::AnchorBased { dc: raw[0], dl: raw[1] },
            SlotKind::AnchorFree => {
                let half = 0.5 * anchor.length;
                RegressionTarget::AnchorFree {
                    ys: anchor.center - half + raw[0] * anchor.length,
                    ye: anchor.center + half + raw[1] * anchor.length,
                }
            }
        }
    }
}

/// Encodes `gt` relative to an anchor-based slot.
pub fn encode(gt: &Interval, anchor: &AnchorSlot) -> Result<RegressionTarget> {
    match anchor.kind {
        SlotKind::AnchorFree => Err(Error::AnchorFreeEncode),
        SlotKind::AnchorBased => Ok(RegressionTarget::AnchorBased {
            dc: (gt.center() - anchor.center) / anchor.length,
            dl: (gt.length() / anchor.length).ln(),
        }),
    }
}

/// Decodes a target into an interval. Total: anchor-free endpoints are
/// ordered and clamped to `[0, 1]`, and every result is at least
/// [`MIN_DECODED_LENGTH`] long.
pub fn decode(target: &RegressionTarget, anchor: &AnchorSlot) -> Interval {
    decode_with_jacobian(target, anchor).0
}

/// `d(start, end) / d(target parameters)` as `[[ds/dp0, ds/dp1], [de/dp0, de/dp1]]`.
pub type DecodeJacobian = [[f64; 2]; 2];

pub(crate) fn decode_with_jacobian(target: &RegressionTarget, anchor: &AnchorSlot) -> (Interval, DecodeJacobian) {
    let (mut start, mut end, mut jac) = match *target {
        RegressionTarget::AnchorBased { dc, dl } => {
            let clamped = dl.clamp(-MAX_LOG_LENGTH, MAX_LOG_LENGTH);
            let dl_active = if clamped == dl { 1.0 } else { 0.0 };
            let center = anchor.center + dc * anchor.length;
            let length = anchor.length * clamped.exp();
            let half_dl = 0.5 * length * dl_active;
            (
                center - 0.5 * length,
                center + 0.5 * length,
                [[anchor.length, -half_dl], [anchor.length, half_dl]],
            )
        }
        RegressionTarget::AnchorFree { ys, ye } => {
            let (mut s, mut e, mut jac) = (ys, ye, [[1.0, 0.0], [0.0, 1.0]]);
            if s > e {
                std::mem::swap(&mut s, &mut e);
                jac.swap(0, 1);
            }
            if !(0.0..=1.0).contains(&s) {
                s = s.clamp(0.0, 1.0);
                jac[0] = [0.0, 0.0];
            }
            if !(0.0..=1.0).contains(&e) {
                e = e.clamp(0.0, 1.0);
                jac[1] = [0.0, 0.0];
            }
            (s, e, jac)
        }
    };
    if end - start < MIN_DECODED_LENGTH || (end - start).is_nan() {
        // Collapse onto a minimal interval anchored at the start.
        if !start.is_finite() {
            start = anchor.center;
            jac[0] = [0.0, 0.0];
        }
        if matches!(target, RegressionTarget::AnchorFree { .. }) && start > 1.0 - MIN_DECODED_LENGTH {
            start = 1.0 - MIN_DECODED_LENGTH;
            jac[0] = [0.0, 0.0];
        }
        end = start + MIN_DECODED_LENGTH;
        jac[1] = jac[0];
    }
    let interval = Interval::new(start, end).unwrap_or_else(|_| {
        Interval::from_center_length(anchor.center, anchor.length).expect("anchor geometry is valid")
    });
    (interval, jac)
}

/// Decodes the two raw network outputs of a slot, returning the Jacobian of
/// the decoded endpoints with respect to those raw outputs.
pub fn decode_raw_with_jacobian(raw: [f64; 2], anchor: &AnchorSlot) -> (Interval, DecodeJacobian) {
    let (interval, mut jac) = decode_with_jacobian(&RegressionTarget::from_raw(raw, anchor), anchor);
    if anchor.kind == SlotKind::AnchorFree {
        for row in jac.iter_mut() {
            for v in row.iter_mut() {
                *v *= anchor.length;
            }
        }
    }
    (interval, jac)
}

/// Per-slot assignment of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// Ground truth matched by each slot; `None` marks a negative slot.
    pub matched_gt: Vec<Option<usize>>,
    /// Ground-truth intervals (window-normalized) referenced by `matched_gt`.
    pub gts: Vec<Interval>,
    /// Category of each ground truth.
    pub gt_categories: Vec<usize>,
    pub num_categories: usize,
}

impl AssignmentResult {
    pub fn all_negative(num_slots: usize, num_categories: usize) -> Self {
        Self {
            matched_gt: vec![None; num_slots],
            gts: Vec::new(),
            gt_categories: Vec::new(),
            num_categories,
        }
    }

    pub fn num_slots(&self) -> usize {
        self.matched_gt.len()
    }

    pub fn num_positive(&self) -> usize {
        self.matched_gt.iter().filter(|m| m.is_some()).count()
    }

    pub fn is_positive(&self, slot: usize) -> bool {
        self.matched_gt[slot].is_some()
    }

    pub fn gt_for(&self, slot: usize) -> Option<&Interval> {
        self.matched_gt[slot].map(|g| &self.gts[g])
    }

    pub fn category_for(&self, slot: usize) -> Option<usize> {
        self.matched_gt[slot].map(|g| self.gt_categories[g])
    }

    /// One-hot category vector for positives, all zeros for negatives.
    pub fn category_target(&self, slot: usize) -> Vec<f64> {
        let mut t = vec![0.0; self.num_categories];
        if let Some(c) = self.category_for(slot) {
            t[c] = 1.0;
        }
        t
    }
}

/// Assigns each slot to a ground truth.
///
/// A slot is positive when its best IoU with any ground truth reaches
/// `positive_iou`. In addition every ground truth claims its highest-IoU slot
/// (first slot on ties; the next best free slot if another ground truth
/// already claimed it), so each ground truth has at least one positive.
pub fn assign_targets(
    table: &AnchorTable,
    gts: &[(Interval, usize)],
    num_categories: usize,
    positive_iou: f64,
) -> AssignmentResult {
    let n = table.len();
    let mut result = AssignmentResult {
        matched_gt: vec![None; n],
        gts: gts.iter().map(|(g, _)| *g).collect(),
        gt_categories: gts.iter().map(|(_, c)| *c).collect(),
        num_categories,
    };
    if gts.is_empty() {
        return result;
    }
    let geometry: Vec<Interval> = table.slots().iter().map(|s| s.matching_interval()).collect();
    let ious: Vec<Vec<f64>> = gts
        .iter()
        .map(|(g, _)| geometry.iter().map(|a| iou(a, g)).collect())
        .collect();

    for slot in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (gi, row) in ious.iter().enumerate() {
            if best.is_none_or(|(_, b)| row[slot] > b) {
                best = Some((gi, row[slot]));
            }
        }
        if let Some((gi, v)) = best {
            if v >= positive_iou {
                result.matched_gt[slot] = Some(gi);
            }
        }
    }

    // Forced matches, strongest ground truth first.
    let mut order: Vec<(usize, f64)> = ious
        .iter()
        .enumerate()
        .map(|(gi, row)| (gi, row.iter().copied().fold(f64::MIN, f64::max)))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut forced = vec![false; n];
    for (gi, _) in order {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &v) in ious[gi].iter().enumerate() {
            if !forced[slot] && best.is_none_or(|(_, b)| v > b) {
                best = Some((slot, v));
            }
        }
        if let Some((slot, _)) = best {
            forced[slot] = true;
            result.matched_gt[slot] = Some(gi);
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table64() -> AnchorTable {
        build_anchors(PyramidLayout::new(64).unwrap(), DEFAULT_SCALE_MULTIPLIERS).unwrap()
    }

    #[test]
    fn slot_count_and_grid() {
        let t = table64();
        assert_eq!(t.len(), 180);
        let first = t.slots()[0];
        assert_eq!(first.kind, SlotKind::AnchorFree);
        assert_eq!(first.center, 0.03125);
        let lengths: Vec<f64> = t.slots()[1..6].iter().map(|s| s.length).collect();
        assert_eq!(lengths, vec![1.0 / 32.0, 1.0 / 16.0, 3.0 / 32.0, 1.0 / 8.0, 3.0 / 16.0]);
        assert_eq!(t.index(1, 2, 3), 16 * 6 + 2 * 6 + 3);
        assert_eq!(t.slots()[t.index(3, 1, 5)].position, 1);
    }

    #[test]
    fn layout_rejects_bad_segment_counts() {
        assert!(PyramidLayout::new(48).is_err());
        assert!(PyramidLayout::new(0).is_err());
        assert_eq!(PyramidLayout::new(96).unwrap().level_lengths(), [24, 12, 6, 3]);
    }

    #[test]
    fn multipliers_must_increase() {
        let layout = PyramidLayout::new(32).unwrap();
        assert!(build_anchors(layout, [1.0, 1.0, 2.0, 3.0, 4.0]).is_err());
        assert!(build_anchors(layout, [-1.0, 1.0, 2.0, 3.0, 4.0]).is_err());
    }

    fn based(center: f64, length: f64) -> AnchorSlot {
        AnchorSlot {
            level: 0,
            position: 0,
            slot: 1,
            kind: SlotKind::AnchorBased,
            center,
            length,
        }
    }

    #[test]
    fn encode_examples() {
        let a = based(0.5, 0.25);
        let gt = Interval::new(0.375, 0.625).unwrap();
        assert_eq!(
            encode(&gt, &a).unwrap(),
            RegressionTarget::AnchorBased { dc: 0.0, dl: 0.0 }
        );
        let gt = Interval::new(0.5625, 0.6875).unwrap();
        match encode(&gt, &a).unwrap() {
            RegressionTarget::AnchorBased { dc, dl } => {
                assert!((dc - 0.5).abs() < 1e-12);
                assert!((dl - 0.5f64.ln()).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        let free = table64().slots()[0];
        assert!(matches!(encode(&gt, &free), Err(Error::AnchorFreeEncode)));
    }

    #[test]
    fn decode_examples() {
        let a = based(0.5, 0.25);
        let d = decode(&RegressionTarget::AnchorBased { dc: 0.0, dl: 0.0 }, &a);
        assert_eq!((d.start(), d.end()), (0.375, 0.625));
        let free = table64().slots()[0];
        let d = decode(&RegressionTarget::AnchorFree { ys: 0.2, ye: 0.7 }, &free);
        assert_eq!((d.start(), d.end()), (0.2, 0.7));
        let d = decode(&RegressionTarget::AnchorFree { ys: 0.7, ye: 0.2 }, &free);
        assert_eq!((d.start(), d.end()), (0.2, 0.7));
    }

    #[test]
    fn decode_is_total() {
        let free = table64().slots()[0];
        for (ys, ye) in [(1.5, 2.0), (-3.0, -1.0), (0.4, 0.4), (f64::NAN, 0.3)] {
            let d = decode(&RegressionTarget::AnchorFree { ys, ye }, &free);
            assert!(d.length() >= MIN_DECODED_LENGTH * 0.999);
            assert!(d.start() >= 0.0 && d.end() <= 1.0 + 1e-12, "{d:?}");
        }
        let a = based(0.5, 0.25);
        let d = decode(&RegressionTarget::AnchorBased { dc: 0.0, dl: -400.0 }, &a);
        assert!(d.length() >= MIN_DECODED_LENGTH * 0.999);
    }

    #[test]
    fn zero_raw_output_decodes_to_anchor_geometry() {
        let t = table64();
        for slot in t.slots() {
            let d = decode(&RegressionTarget::from_raw([0.0, 0.0], slot), slot);
            let m = slot.matching_interval();
            assert!((d.start() - m.start()).abs() < 1e-12);
            assert!((d.end() - m.end()).abs() < 1e-12);
        }
    }

    #[test]
    fn no_gts_means_all_negative() {
        let t = table64();
        let a = assign_targets(&t, &[], 4, 0.5);
        assert_eq!(a.num_positive(), 0);
        assert_eq!(a.num_slots(), 180);
        assert!((0..180).all(|s| a.category_target(s).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn exact_anchor_match_is_positive() {
        let t = table64();
        let slot = t.slots()[t.index(1, 3, 2)];
        let gt = slot.matching_interval();
        let a = assign_targets(&t, &[(gt, 2)], 4, 0.5);
        let idx = t.index(1, 3, 2);
        assert_eq!(a.matched_gt[idx], Some(0));
        assert_eq!(a.category_target(idx), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn weak_gt_gets_exactly_its_best_slot() {
        let t = table64();
        // Much shorter than the smallest anchor, so every IoU stays below 0.5.
        let gt = Interval::new(0.1, 0.105).unwrap();
        let a = assign_targets(&t, &[(gt, 0)], 4, 0.5);
        let best = (0..t.len())
            .max_by(|&i, &j| {
                let (vi, vj) = (
                    iou(&t.slots()[i].matching_interval(), &gt),
                    iou(&t.slots()[j].matching_interval(), &gt),
                );
                vi.total_cmp(&vj).then(j.cmp(&i))
            })
            .unwrap();
        assert!(iou(&t.slots()[best].matching_interval(), &gt) < 0.5);
        assert_eq!(a.num_positive(), 1);
        assert_eq!(a.matched_gt[best], Some(0));
    }
}
