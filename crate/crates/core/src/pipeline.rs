//! Video-level inference: sliding windows, slot decoding, pooling and NMS.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{decode_raw_with_jacobian, AnchorTable};
use crate::data::FrameFeatureSequence;
use crate::error::{Error, Result};
use crate::geometry::{nms, Interval, ScoredDetection};
use crate::network::{DetectionNetwork, NetworkConfig, RawWindowPrediction, WindowFeatures};

/// Post-processing thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Slots below this confidence are dropped before NMS.
    pub confidence_threshold: f64,
    /// NMS suppresses overlaps with IoU strictly above this.
    pub nms_threshold: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.3,
            nms_threshold: 0.3,
        }
    }
}

/// Placement of sliding windows over one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub window_starts: Vec<usize>,
    pub frames_per_window: usize,
    pub segments: usize,
    pub frames_per_segment: usize,
    pub segment_stride: usize,
    pub window_hop: usize,
}

/// Windows every `frames_per_window / 2` frames from 0, plus a final window
/// aligned to the end of the video. Short videos get a single window at 0.
pub fn plan_windows(num_frames: usize, config: &NetworkConfig) -> WindowPlan {
    let fpw = config.frames_per_window();
    let hop = (fpw / 2).max(1);
    let last = num_frames.saturating_sub(fpw);
    let mut starts: Vec<usize> = (0..=last).step_by(hop).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    WindowPlan {
        window_starts: starts,
        frames_per_window: fpw,
        segments: config.segments,
        frames_per_segment: config.frames_per_segment,
        segment_stride: config.segment_stride(),
        window_hop: hop,
    }
}

/// Cuts the window starting at `start` into `s x f x d` segment features.
/// Frames past the end of the video repeat the final frame.
pub fn slice_window(features: &FrameFeatureSequence, start: usize, plan: &WindowPlan) -> WindowFeatures {
    let d = features.dim;
    let last = features.num_frames.saturating_sub(1);
    let mut data = Vec::with_capacity(plan.segments * plan.frames_per_segment * d);
    for j in 0..plan.segments {
        for i in 0..plan.frames_per_segment {
            let t = (start + j * plan.segment_stride + i).min(last);
            data.extend(features.frame(t).iter().map(|&v| f64::from(v)));
        }
    }
    WindowFeatures {
        segments: plan.segments,
        frames: plan.frames_per_segment,
        dim: d,
        data,
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Turns raw slot outputs into window-normalized detections.
///
/// Category scores are `sigmoid(logits)` and the confidence is the top score.
/// With a confidence branch the confidence is `sigmoid` of its logit and the
/// category scores are a softmax, matching how that variant is trained.
pub fn decode_window(
    raw: &RawWindowPrediction,
    anchors: &AnchorTable,
    confidence_threshold: f64,
) -> Vec<ScoredDetection> {
    let mut out = Vec::new();
    for (slot, anchor) in anchors.slots().iter().enumerate() {
        let logits = raw.slot_logits(slot);
        let det = match raw.confidence_logit(slot) {
            Some(z) => {
                let conf = sigmoid(z);
                if conf < confidence_threshold {
                    continue;
                }
                let (interval, _) = decode_raw_with_jacobian(raw.interval_params(slot), anchor);
                ScoredDetection::with_confidence(interval, conf, softmax(logits))
            }
            None => {
                let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
                if scores.iter().all(|&p| p < confidence_threshold) {
                    continue;
                }
                let (interval, _) = decode_raw_with_jacobian(raw.interval_params(slot), anchor);
                ScoredDetection::from_scores(interval, scores)
            }
        };
        out.push(det);
    }
    out
}

/// Maps a window-normalized interval into frames, clipped to `[0, N]` and at
/// least one frame long.
pub fn to_video_frames(
    interval: &Interval,
    window_start: usize,
    frames_per_window: usize,
    num_frames: usize,
) -> Interval {
    let n = num_frames as f64;
    let map = |v: f64| (window_start as f64 + v * frames_per_window as f64).clamp(0.0, n);
    let (mut s, mut e) = (map(interval.start()), map(interval.end()));
    if e - s < 1.0 {
        e = (s + 1.0).min(n);
        s = e - 1.0;
    }
    Interval::new(s.max(0.0), e).expect("videos have at least one frame")
}

/// Runs the network over every window of a video and merges the results.
/// Output is sorted by onset.
pub fn detect_video(
    features: &FrameFeatureSequence,
    network: &DetectionNetwork,
    config: &DetectConfig,
) -> Result<Vec<ScoredDetection>> {
    let net_cfg = network.config();
    if features.dim != net_cfg.input_dim {
        return Err(Error::Shape(format!(
            "video {} has {}-dimensional features, network expects {}",
            features.video_id, features.dim, net_cfg.input_dim
        )));
    }
    if features.num_frames == 0 {
        return Ok(Vec::new());
    }
    let anchors = net_cfg.anchors()?;
    let plan = plan_windows(features.num_frames, net_cfg);
    let per_window: Vec<Vec<ScoredDetection>> = plan
        .window_starts
        .par_iter()
        .map(|&start| -> Result<Vec<ScoredDetection>> {
            let raw = network.predict(&slice_window(features, start, &plan))?;
            Ok(decode_window(&raw, &anchors, config.confidence_threshold)
                .into_iter()
                .map(|mut d| {
                    d.interval = to_video_frames(&d.interval, start, plan.frames_per_window, features.num_frames);
                    d
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let pooled: Vec<ScoredDetection> = per_window.into_iter().flatten().collect();
    let mut kept = nms(&pooled, config.nms_threshold);
    kept.sort_by(|a, b| {
        a.interval
            .start()
            .total_cmp(&b.interval.start())
            .then(b.confidence.total_cmp(&a.confidence))
            .then(a.category.cmp(&b.category))
    });
    Ok(kept)
}

/// Detections per video id.
pub type Predictions = BTreeMap<String, Vec<ScoredDetection>>;

/// Runs [`detect_video`] on every video.
pub fn detect_all(
    videos: &[FrameFeatureSequence],
    network: &DetectionNetwork,
    config: &DetectConfig,
) -> Result<Predictions> {
    videos
        .iter()
        .map(|v| Ok((v.video_id.clone(), detect_video(v, network, config)?)))
        .collect()
}

/// `video_id<TAB>onset<TAB>offset<TAB>confidence<TAB>category` per line.
pub fn format_predictions(predictions: &Predictions) -> String {
    let mut out = String::new();
    for (vid, dets) in predictions {
        for d in dets {
            writeln!(
                out,
                "{vid}\t{}\t{}\t{:.6}\t{}",
                d.interval.start(),
                d.interval.end(),
                d.confidence,
                d.category
            )
            .unwrap();
        }
    }
    out
}

pub fn save_predictions(path: &Path, predictions: &Predictions) -> Result<()> {
    fs::write(path, format_predictions(predictions))?;
    Ok(())
}

/// Parses a prediction file. Per-category scores are not stored, so parsed
/// detections carry an empty score vector.
pub fn parse_predictions(text: &str, origin: &Path) -> Result<Predictions> {
    let mut out = Predictions::new();
    for (i, raw) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = raw.split('\t').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", f.len())));
        }
        let real = |idx: usize, name: &str| -> Result<f64> {
            f[idx]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("{name} `{}` is not a number", f[idx])))
        };
        let interval = Interval::new(real(1, "onset")?, real(2, "offset")?).map_err(|e| err(e.to_string()))?;
        let confidence = real(3, "confidence")?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(err(format!("confidence {confidence} outside [0, 1]")));
        }
        let category = f[4]
            .parse::<usize>()
            .map_err(|_| err(format!("category `{}` is not a nonnegative integer", f[4])))?;
        out.entry(f[0].to_string()).or_default().push(ScoredDetection {
            interval,
            confidence,
            category_scores: Vec::new(),
            category,
        });
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Predictions> {
    parse_predictions(&fs::read_to_string(path)?, path)
}
