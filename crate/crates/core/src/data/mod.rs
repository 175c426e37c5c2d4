//! Synthetic long sequences with planted expression events.
//!
//! Each video is a sequence of per-frame feature vectors: unit Gaussian
//! background noise plus, inside every event, a category-specific direction
//! whose amplitude ramps linearly from zero at onset to `snr` at the apex and
//! back to zero at offset. Categories use fixed orthonormal directions, so a
//! single SNR knob controls both localization and recognition difficulty.

mod io;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Interval;

pub use io::{
    load_annotations, load_dataset, load_features, parse_annotations, save_annotations, save_dataset, save_features,
    write_annotations, ANNOTATIONS_FILE, FEATURES_DIR, FEATURE_MAGIC,
};

/// One planted event. Frames `[onset, offset)` belong to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionEvent {
    pub onset: usize,
    pub offset: usize,
    pub apex: usize,
    pub category: usize,
}

impl ExpressionEvent {
    pub fn interval(&self) -> Interval {
        Interval::new(self.onset as f64, self.offset as f64).expect("events satisfy onset < offset")
    }

    pub fn duration(&self) -> usize {
        self.offset - self.onset
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub subject_id: String,
    pub num_frames: usize,
    pub events: Vec<ExpressionEvent>,
}

impl VideoAnnotation {
    /// Checks ordering, non-overlap and bounds of the events.
    pub fn validate(&self) -> Result<()> {
        let mut prev_offset = 0;
        for (i, e) in self.events.iter().enumerate() {
            if !(e.onset < e.apex && e.apex < e.offset) {
                return Err(Error::DatasetConfig(format!(
                    "{}: event {i} violates onset < apex < offset",
                    self.video_id
                )));
            }
            if e.offset > self.num_frames {
                return Err(Error::DatasetConfig(format!(
                    "{}: event {i} ends after the last frame",
                    self.video_id
                )));
            }
            if i > 0 && e.onset < prev_offset {
                return Err(Error::DatasetConfig(format!(
                    "{}: event {i} overlaps or precedes its predecessor",
                    self.video_id
                )));
            }
            prev_offset = e.offset;
        }
        Ok(())
    }
}

/// Per-frame features of one video, stored as `f32` row-major `N x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    pub video_id: String,
    pub num_frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FrameFeatureSequence {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_subjects: usize,
    pub videos_per_subject: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Minimum number of background frames between consecutive events.
    pub min_gap: usize,
    pub num_categories: usize,
    pub category_weights: Vec<f64>,
    pub feature_dim: usize,
    pub snr: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_subjects: 10,
            videos_per_subject: 2,
            min_frames: 600,
            max_frames: 1200,
            min_events: 2,
            max_events: 6,
            min_duration: 30,
            max_duration: 150,
            min_gap: 10,
            num_categories: 4,
            category_weights: vec![116.0, 16.0, 105.0, 63.0],
            feature_dim: 64,
            snr: 8.0,
            seed: 0,
        }
    }
}

const MAX_PACKING_ATTEMPTS: usize = 1000;

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::DatasetConfig(m));
        if self.num_subjects == 0 || self.videos_per_subject == 0 {
            return bad("need at least one subject and one video per subject".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range [{}, {}] is empty",
                self.min_frames, self.max_frames
            ));
        }
        if self.min_events > self.max_events {
            return bad("min_events exceeds max_events".into());
        }
        if self.min_duration < 3 || self.min_duration > self.max_duration {
            return bad("durations must satisfy 3 <= min_duration <= max_duration".into());
        }
        if self.num_categories == 0 || self.category_weights.len() != self.num_categories {
            return bad(format!(
                "category_weights has {} entries for {} categories",
                self.category_weights.len(),
                self.num_categories
            ));
        }
        if self.category_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.category_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("category weights must be nonnegative with a positive sum".into());
        }
        if self.num_categories > self.feature_dim {
            return bad("need feature_dim >= num_categories for orthonormal directions".into());
        }
        if !self.snr.is_finite() || self.snr < 0.0 {
            return bad("snr must be finite and nonnegative".into());
        }
        let k = self.max_events;
        if k > 0 && k * self.min_duration + (k - 1) * self.min_gap > self.min_frames {
            return Err(Error::InfeasiblePacking(format!(
                "{k} events of at least {} frames with gaps of {} cannot fit in {} frames",
                self.min_duration, self.min_gap, self.min_frames
            )));
        }
        Ok(())
    }
}

/// Annotations and features of a generated corpus, in the same video order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub annotations: Vec<VideoAnnotation>,
    pub features: Vec<FrameFeatureSequence>,
}

impl Dataset {
    pub fn num_categories(&self) -> usize {
        self.annotations
            .iter()
            .flat_map(|a| a.events.iter().map(|e| e.category + 1))
            .max()
            .unwrap_or(1)
    }

    /// The subset of videos at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            annotations: indices.iter().map(|&i| self.annotations[i].clone()).collect(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
        }
    }
}

/// One leave-one-subject-out fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub held_out_subject: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits videos by subject: one fold per distinct subject, in order of first
/// appearance.
pub fn loso_folds(annotations: &[VideoAnnotation]) -> Vec<Fold> {
    let mut subjects: Vec<&str> = Vec::new();
    for a in annotations {
        if !subjects.contains(&a.subject_id.as_str()) {
            subjects.push(&a.subject_id);
        }
    }
    subjects
        .into_iter()
        .map(|subject| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..annotations.len()).partition(|&i| annotations[i].subject_id == subject);
            Fold {
                held_out_subject: subject.to_string(),
                train,
                test,
            }
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent per-stream seed derived from the corpus seed and a label.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut z = seed ^ fnv1a(label.as_bytes());
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn video_id(subject: usize, video: usize) -> String {
    format!("s{subject:02}_v{video:02}")
}

pub fn subject_id(subject: usize) -> String {
    format!("s{subject:02}")
}

/// Samples the event layout of one video.
pub fn sample_annotation(config: &DatasetConfig, video_id: &str, subject_id: &str) -> Result<VideoAnnotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, &format!("events/{video_id}")));
    let num_frames = rng.random_range(config.min_frames..=config.max_frames);
    let k = rng.random_range(config.min_events..=config.max_events);
    let weights = WeightedIndex::new(&config.category_weights).map_err(|e| Error::DatasetConfig(e.to_string()))?;

    let mut events = Vec::with_capacity(k);
    if k > 0 {
        let gaps = (k - 1) * config.min_gap;
        let mut durations = Vec::new();
        let mut packed = false;
        for _ in 0..MAX_PACKING_ATTEMPTS {
            durations = (0..k)
                .map(|_| rng.random_range(config.min_duration..=config.max_duration))
                .collect();
            if durations.iter().sum::<usize>() + gaps <= num_frames {
                packed = true;
                break;
            }
        }
        if !packed {
            return Err(Error::InfeasiblePacking(format!(
                "{video_id}: could not fit {k} events into {num_frames} frames"
            )));
        }
        // Spread the free frames over the k + 1 gaps uniformly at random.
        let slack = num_frames - durations.iter().sum::<usize>() - gaps;
        let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut cursor = 0;
        let mut prev_cut = 0;
        for (i, (&d, &cut)) in durations.iter().zip(&cuts).enumerate() {
            cursor += cut - prev_cut;
            prev_cut = cut;
            if i > 0 {
                cursor += config.min_gap;
            }
            let onset = cursor;
            let offset = onset + d;
            let apex = rng.random_range(onset + 1..offset);
            let category = weights.sample(&mut rng);
            events.push(ExpressionEvent {
                onset,
                offset,
                apex,
                category,
            });
            cursor = offset;
        }
    }
    let annotation = VideoAnnotation {
        video_id: video_id.to_string(),
        subject_id: subject_id.to_string(),
        num_frames,
        events,
    };
    annotation.validate()?;
    Ok(annotation)
}

/// `C` orthonormal directions in `R^d`, deterministic in the corpus seed.
pub fn category_directions(config: &DatasetConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "directions"));
    let d = config.feature_dim;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(config.num_categories);
    while basis.len() < config.num_categories {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Planted amplitude of `event` at frame `t` (zero outside the event).
pub fn event_amplitude(event: &ExpressionEvent, t: usize, snr: f64) -> f64 {
    if t < event.onset || t >= event.offset {
        0.0
    } else if t <= event.apex {
        snr * (t - event.onset) as f64 / (event.apex - event.onset) as f64
    } else {
        snr * (event.offset - t) as f64 / (event.offset - event.apex) as f64
    }
}

/// Renders the features of one annotated video.
pub fn render_features(annotation: &VideoAnnotation, config: &DatasetConfig) -> FrameFeatureSequence {
    let directions = category_directions(config);
    render_with_directions(annotation, config, &directions)
}

fn render_with_directions(
    annotation: &VideoAnnotation,
    config: &DatasetConfig,
    directions: &[Vec<f64>],
) -> FrameFeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, &format!("noise/{}", annotation.video_id)));
    let d = config.feature_dim;
    let n = annotation.num_frames;
    let mut data = Vec::with_capacity(n * d);
    let mut events = annotation.events.iter().peekable();
    for t in 0..n {
        while events.peek().is_some_and(|e| e.offset <= t) {
            events.next();
        }
        let planted = events
            .peek()
            .filter(|e| e.onset <= t)
            .map(|e| (event_amplitude(e, t, config.snr), &directions[e.category]));
        for j in 0..d {
            let mut v: f64 = rng.sample(StandardNormal);
            if let Some((amp, dir)) = planted {
                v += amp * dir[j];
            }
            data.push(v as f32);
        }
    }
    FrameFeatureSequence {
        video_id: annotation.video_id.clone(),
        num_frames: n,
        dim: d,
        data,
    }
}

/// Generates the full corpus. Deterministic in `config`.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let ids: Vec<(String, String)> = (0..config.num_subjects)
        .flat_map(|s| (0..config.videos_per_subject).map(move |v| (video_id(s, v), subject_id(s))))
        .collect();
    let annotations = ids
        .par_iter()
        .map(|(vid, sid)| sample_annotation(config, vid, sid))
        .collect::<Result<Vec<_>>>()?;
    let directions = category_directions(config);
    let features = annotations
        .par_iter()
        .map(|a| render_with_directions(a, config, &directions))
        .collect();
    Ok(Dataset { annotations, features })
}
