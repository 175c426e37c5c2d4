//! Spotting/recognition F1, AP over IoU thresholds, confusion matrices and
//! report formatting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::VideoAnnotation;
use crate::geometry::{match_greedy, rank_order, Interval, ScoredDetection};
use crate::pipeline::Predictions;

/// IoU required for a true positive in the F1 protocol.
pub const F1_IOU: f64 = 0.5;
/// Number of recall sample points of the interpolated PR curve.
pub const RECALL_POINTS: usize = 101;

/// The ten thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Ground truth of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTruth {
    pub video_id: String,
    pub intervals: Vec<Interval>,
    pub categories: Vec<usize>,
}

impl VideoTruth {
    pub fn from_annotation(a: &VideoAnnotation) -> Self {
        Self {
            video_id: a.video_id.clone(),
            intervals: a.events.iter().map(|e| e.interval()).collect(),
            categories: a.events.iter().map(|e| e.category).collect(),
        }
    }
}

pub fn truths_from_annotations(annotations: &[VideoAnnotation]) -> Vec<VideoTruth> {
    annotations.iter().map(VideoTruth::from_annotation).collect()
}

fn video_preds<'a>(preds: &'a Predictions, video_id: &str) -> &'a [ScoredDetection] {
    preds.get(video_id).map_or(&[], Vec::as_slice)
}

/// True and predicted category of one spotted interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchedPair {
    pub truth: usize,
    pub predicted: usize,
}

/// Counts of the F1 protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpottingCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
    /// No predictions and no ground truth: F1 is reported as 1.
    pub vacuous: bool,
}

impl SpottingCounts {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let denom = 2 * tp + fp + fn_;
        let (f1, vacuous) = if denom == 0 {
            (1.0, true)
        } else {
            (2.0 * tp as f64 / denom as f64, false)
        };
        Self {
            tp,
            fp,
            fn_,
            f1,
            vacuous,
        }
    }
}

/// Category-agnostic greedy matching at IoU 0.5 summed over videos.
/// Predictions for videos without ground truth count as false positives.
pub fn spotting_f1(preds: &Predictions, truths: &[VideoTruth]) -> (SpottingCounts, Vec<MatchedPair>) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut pairs = Vec::new();
    for t in truths {
        let p = video_preds(preds, &t.video_id);
        let m = match_greedy(p, &t.intervals, F1_IOU, None);
        tp += m.true_positives();
        fp += m.false_positives();
        fn_ += m.false_negatives();
        for (gi, pi) in m.gt_to_pred.iter().enumerate() {
            if let Some(pi) = pi {
                pairs.push(MatchedPair {
                    truth: t.categories[gi],
                    predicted: p[*pi].category,
                });
            }
        }
    }
    for (vid, p) in preds {
        if !truths.iter().any(|t| &t.video_id == vid) {
            fp += p.len();
        }
    }
    (SpottingCounts::from_counts(tp, fp, fn_), pairs)
}

/// Micro-F1 of labels over spotted intervals, which equals their accuracy.
/// `None` without any spotted interval.
pub fn recognition_f1(pairs: &[MatchedPair]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let correct = pairs.iter().filter(|p| p.truth == p.predicted).count();
    Some(correct as f64 / pairs.len() as f64)
}

/// Rows are true categories, columns predicted ones. Pairs outside `[0, C)`
/// are ignored.
pub fn confusion_matrix(pairs: &[MatchedPair], num_categories: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_categories]; num_categories];
    for p in pairs {
        if p.truth < num_categories && p.predicted < num_categories {
            m[p.truth][p.predicted] += 1;
        }
    }
    m
}

/// How a match is decided and how categories are combined into one AP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Category-agnostic.
    #[default]
    Spotting,
    /// Category must match; AP averaged over categories that have ground truth.
    Detection,
    /// Category must match; one ranking over all categories.
    DetectionPooled,
}

/// Ranked true/false-positive flags to interpolated AP.
pub fn interpolated_ap(ranked_hits: &[bool], num_gts: usize) -> f64 {
    if num_gts == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_hits.len());
    let mut recall = Vec::with_capacity(ranked_hits.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gts as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..RECALL_POINTS {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        while k < recall.len() && recall[k] < r {
            k += 1;
        }
        if k == recall.len() {
            break;
        }
        sum += precision[k];
    }
    sum / RECALL_POINTS as f64
}

struct Hit<'a> {
    det: &'a ScoredDetection,
    video: usize,
    tp: bool,
}

/// Matches every video and returns hits ranked across videos, plus the
/// ground-truth count. `category` restricts both sides to one category.
fn ranked_hits<'a>(
    preds: &'a Predictions,
    truths: &[VideoTruth],
    iou_threshold: f64,
    class_aware: bool,
    category: Option<usize>,
) -> (Vec<Hit<'a>>, usize) {
    let mut hits = Vec::new();
    let mut num_gts = 0;
    let keep = |c: usize| category.is_none_or(|k| k == c);
    for (vi, t) in truths.iter().enumerate() {
        let p: Vec<&ScoredDetection> = video_preds(preds, &t.video_id)
            .iter()
            .filter(|d| keep(d.category))
            .collect();
        let gi: Vec<usize> = (0..t.intervals.len()).filter(|&g| keep(t.categories[g])).collect();
        num_gts += gi.len();
        let gts: Vec<Interval> = gi.iter().map(|&g| t.intervals[g]).collect();
        let cats: Vec<usize> = gi.iter().map(|&g| t.categories[g]).collect();
        let owned: Vec<ScoredDetection> = p.iter().map(|d| (*d).clone()).collect();
        let m = match_greedy(&owned, &gts, iou_threshold, class_aware.then_some(cats.as_slice()));
        for (k, d) in p.into_iter().enumerate() {
            hits.push(Hit {
                det: d,
                video: vi,
                tp: m.pred_to_gt[k].is_some(),
            });
        }
    }
    for (vid, p) in preds {
        if !truths.iter().any(|t| &t.video_id == vid) {
            for d in p.iter().filter(|d| keep(d.category)) {
                hits.push(Hit {
                    det: d,
                    video: truths.len(),
                    tp: false,
                });
            }
        }
    }
    hits.sort_by(|a, b| {
        b.det
            .confidence
            .total_cmp(&a.det.confidence)
            .then(a.video.cmp(&b.video))
            .then_with(|| rank_order(a.det, b.det))
    });
    (hits, num_gts)
}

/// AP at one IoU threshold; `None` when there is no ground truth.
pub fn average_precision(preds: &Predictions, truths: &[VideoTruth], iou_threshold: f64, mode: ApMode) -> Option<f64> {
    match mode {
        ApMode::Spotting | ApMode::DetectionPooled => {
            let (hits, n) = ranked_hits(preds, truths, iou_threshold, mode != ApMode::Spotting, None);
            (n > 0).then(|| interpolated_ap(&hits.iter().map(|h| h.tp).collect::<Vec<_>>(), n))
        }
        ApMode::Detection => {
            let mut cats: Vec<usize> = truths.iter().flat_map(|t| t.categories.iter().copied()).collect();
            cats.sort_unstable();
            cats.dedup();
            if cats.is_empty() {
                return None;
            }
            let sum: f64 = cats
                .iter()
                .map(|&c| {
                    let (hits, n) = ranked_hits(preds, truths, iou_threshold, true, Some(c));
                    interpolated_ap(&hits.iter().map(|h| h.tp).collect::<Vec<_>>(), n)
                })
                .sum();
            Some(sum / cats.len() as f64)
        }
    }
}

/// AP at each of [`iou_thresholds`] and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApCurve {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub map: f64,
}

/// `None` when there is no ground truth.
pub fn map_range(preds: &Predictions, truths: &[VideoTruth], mode: ApMode) -> Option<ApCurve> {
    let thresholds = iou_thresholds();
    let ap: Vec<f64> = thresholds
        .iter()
        .map(|&t| average_precision(preds, truths, t, mode))
        .collect::<Option<_>>()?;
    let map = ap.iter().sum::<f64>() / ap.len() as f64;
    Some(ApCurve { thresholds, ap, map })
}

/// Everything reported for one set of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: SpottingCounts,
    pub recognition_f1: Option<f64>,
    pub spotting: Option<ApCurve>,
    pub detection: Option<ApCurve>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn spotting_map(&self) -> Option<f64> {
        self.spotting.as_ref().map(|c| c.map)
    }

    pub fn detection_map(&self) -> Option<f64> {
        self.detection.as_ref().map(|c| c.map)
    }
}

/// Scoring options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub num_categories: usize,
    /// Drop recognition F1 and detection mAP (category-free predictions).
    pub spotting_only: bool,
    pub detection_mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_categories: 4,
            spotting_only: false,
            detection_mode: ApMode::Detection,
        }
    }
}

pub fn evaluate(preds: &Predictions, truths: &[VideoTruth], config: &EvalConfig) -> EvalReport {
    let (counts, pairs) = spotting_f1(preds, truths);
    let spotting = map_range(preds, truths, ApMode::Spotting);
    if config.spotting_only {
        return EvalReport {
            counts,
            recognition_f1: None,
            spotting,
            detection: None,
            confusion: Vec::new(),
        };
    }
    EvalReport {
        counts,
        recognition_f1: recognition_f1(&pairs),
        spotting,
        detection: map_range(preds, truths, config.detection_mode),
        confusion: confusion_matrix(&pairs, config.num_categories),
    }
}

/// Output layout of [`render_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Table,
    Tsv,
}

fn strip_zero(s: String) -> String {
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

/// F1 in hundredths: `0.511 -> "51.1"`.
pub fn format_f1(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", v * 100.0))
}

/// mAP in thousandths: `0.106 -> "106"`, `0.0995 -> "99.5"`.
pub fn format_map(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| strip_zero(format!("{:.1}", v * 1000.0)))
}

const COLUMNS: [&str; 8] = ["run", "TP", "FP", "FN", "F1 S", "F1 R", "mAP S", "mAP D"];

fn row_cells(label: &str, r: &EvalReport) -> Vec<String> {
    vec![
        label.to_string(),
        r.counts.tp.to_string(),
        r.counts.fp.to_string(),
        r.counts.fn_.to_string(),
        format_f1(Some(r.counts.f1)),
        format_f1(r.recognition_f1),
        format_map(r.spotting_map()),
        format_map(r.detection_map()),
    ]
}

/// One row per labelled report; an empty slice renders the header only.
pub fn render_report(rows: &[(String, EvalReport)], format: ReportFormat) -> String {
    let mut table: Vec<Vec<String>> = vec![COLUMNS.iter().map(|s| s.to_string()).collect()];
    table.extend(rows.iter().map(|(l, r)| row_cells(l, r)));
    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            for row in &table {
                writeln!(out, "{}", row.join("\t")).unwrap();
            }
        }
        ReportFormat::Table => {
            let widths: Vec<usize> = (0..COLUMNS.len())
                .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
                .collect();
            for row in &table {
                let cells: Vec<String> = row
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (cell, &w))| {
                        if i == 0 {
                            format!("{cell:<w$}")
                        } else {
                            format!("{cell:>w$}")
                        }
                    })
                    .collect();
                writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
            }
        }
    }
    out
}

/// AP-vs-IoU table with spotting and detection columns (×10³).
pub fn render_ap_curve(report: &EvalReport) -> String {
    let mut out = String::from("iou\tAP S\tAP D\n");
    for (i, t) in iou_thresholds().iter().enumerate() {
        let s = report.spotting.as_ref().map(|c| c.ap[i]);
        let d = report.detection.as_ref().map(|c| c.ap[i]);
        writeln!(out, "{t:.2}\t{}\t{}", format_map(s), format_map(d)).unwrap();
    }
    out
}

/// Confusion matrix with true categories as rows.
pub fn render_confusion(matrix: &[Vec<usize>]) -> String {
    let mut out = String::from("true\\pred");
    for c in 0..matrix.len() {
        write!(out, "\t{c}").unwrap();
    }
    out.push('\n');
    for (t, row) in matrix.iter().enumerate() {
        write!(out, "{t}").unwrap();
        for v in row {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    out
}
