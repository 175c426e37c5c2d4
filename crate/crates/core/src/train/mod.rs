//! Optimization, leave-one-subject-out evaluation and the ablation matrix.

mod config;
mod loso;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign_targets, AnchorTable, AssignmentResult};
use crate::autograd::{Graph, Tensor};
use crate::data::{sub_seed, Dataset, VideoAnnotation};
use crate::error::{Error, Result};
use crate::geometry::Interval;
use crate::loss::{total_loss, Objective};
use crate::network::{DetectionNetwork, NetworkConfig, ParamMap};
use crate::pipeline::{plan_windows, slice_window};

pub use config::{EvalSettings, TrainConfig, TrainSettings};
pub use loso::{ablate, eval_config, loso, AblationRow, AblationVariant, FoldResult, LosoResult, RunManifest};

/// One training window and its slot targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    /// Index of the video in the dataset.
    pub video: usize,
    pub start: usize,
    /// Window-normalized ground truth kept for this window, with categories.
    pub targets: Vec<(Interval, usize)>,
    pub assignment: AssignmentResult,
}

impl TrainingWindow {
    pub fn has_event(&self) -> bool {
        !self.targets.is_empty()
    }
}

/// Window-normalized ground truth of the window `[start, start + len)`.
/// Events with less than `min_fraction` of their length inside are dropped.
pub fn window_targets(
    annotation: &VideoAnnotation,
    start: usize,
    frames_per_window: usize,
    min_fraction: f64,
    spotting_only: bool,
) -> Vec<(Interval, usize)> {
    let lo = start as f64;
    let hi = (start + frames_per_window) as f64;
    let len = frames_per_window as f64;
    annotation
        .events
        .iter()
        .filter_map(|e| {
            let (on, off) = (e.onset as f64, e.offset as f64);
            let inside = (off.min(hi) - on.max(lo)).max(0.0);
            if inside < min_fraction * (off - on) || inside <= 0.0 {
                return None;
            }
            let iv = Interval::new((on.max(lo) - lo) / len, (off.min(hi) - lo) / len).ok()?;
            Some((iv, if spotting_only { 0 } else { e.category }))
        })
        .collect()
}

/// Every planned window of every video with its slot assignment.
pub fn make_training_batches(
    dataset: &Dataset,
    network: &NetworkConfig,
    anchors: &AnchorTable,
    min_fraction: f64,
) -> Vec<TrainingWindow> {
    let categories = network.output_categories();
    dataset
        .annotations
        .iter()
        .enumerate()
        .flat_map(|(video, a)| {
            let plan = plan_windows(a.num_frames, network);
            plan.window_starts
                .into_iter()
                .map(move |start| (video, start, plan.frames_per_window))
        })
        .map(|(video, start, fpw)| {
            let targets = window_targets(
                &dataset.annotations[video],
                start,
                fpw,
                min_fraction,
                network.spotting_only,
            );
            let assignment = assign_targets(anchors, &targets, categories, network.positive_iou);
            TrainingWindow {
                video,
                start,
                targets,
                assignment,
            }
        })
        .collect()
}

/// Per-epoch window order: every event window plus `ratio` times as many
/// background windows (all of them if fewer exist), shuffled.
fn epoch_order(windows: &[TrainingWindow], ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (mut events, mut background): (Vec<usize>, Vec<usize>) =
        (0..windows.len()).partition(|&i| windows[i].has_event());
    background.shuffle(rng);
    let take = if events.is_empty() {
        background.len()
    } else {
        ((events.len() as f64 * ratio).round() as usize).min(background.len())
    };
    events.extend_from_slice(&background[..take]);
    events.shuffle(rng);
    events
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    first: ParamMap,
    second: ParamMap,
}

impl AdamW {
    pub fn new(settings: &TrainSettings) -> Self {
        Self {
            learning_rate: settings.learning_rate,
            weight_decay: settings.weight_decay,
            beta1: settings.beta1,
            beta2: settings.beta2,
            epsilon: settings.epsilon,
            step: 0,
            first: ParamMap::new(),
            second: ParamMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape.clone()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape.clone()));
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + self.epsilon);
                p.data[i] -= self.learning_rate * (update + self.weight_decay * p.data[i]);
            }
        }
    }
}

/// Trained network and its loss curves.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: DetectionNetwork,
    /// Mean batch loss before each optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean of the step losses of each epoch.
    pub epoch_losses: Vec<f64>,
    pub wall_clock_seconds: f64,
}

fn batch_gradient(
    network: &DetectionNetwork,
    dataset: &Dataset,
    windows: &[&TrainingWindow],
    anchors: &AnchorTable,
    objective: &Objective,
) -> Result<(f64, ParamMap)> {
    let plans: Vec<_> = windows
        .iter()
        .map(|w| plan_windows(dataset.annotations[w.video].num_frames, network.config()))
        .collect();
    let per_window: Vec<(f64, ParamMap)> = windows
        .par_iter()
        .zip(plans.par_iter())
        .map(|(w, plan)| -> Result<(f64, ParamMap)> {
            let input = slice_window(&dataset.features[w.video], w.start, plan);
            let mut graph = Graph::new();
            let vars = network.forward(&mut graph, &input)?;
            let raw = network.collect(&graph, &vars);
            let (loss, out_grad) = total_loss(&raw, anchors, &w.assignment, objective)?;
            Ok((loss.total, network.backward(&graph, &vars, &out_grad)))
        })
        .collect::<Result<_>>()?;
    // Sequential reduction in window order keeps the sum reproducible.
    let scale = 1.0 / windows.len() as f64;
    let mut loss = 0.0;
    let mut total: ParamMap = network
        .params()
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape.clone())))
        .collect();
    for (l, grads) in per_window {
        loss += l;
        for (name, g) in grads {
            let acc = total.get_mut(&name).expect("gradients name known parameters");
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += scale * b;
            }
        }
    }
    Ok((loss * scale, total))
}

/// Trains a freshly initialized network on `dataset`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let settings = &config.train;
    let clock = Instant::now();
    let mut network = DetectionNetwork::new(config.network.clone(), sub_seed(settings.seed, "init"))?;
    let anchors = config.network.anchors()?;
    let objective = Objective::from(&config.network);
    let windows = make_training_batches(dataset, &config.network, &anchors, settings.min_gt_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(settings.seed, "order"));
    let mut optimizer = AdamW::new(settings);
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let max_steps = settings.max_steps.unwrap_or(usize::MAX);

    'epochs: for _ in 0..settings.epochs {
        let order = epoch_order(&windows, settings.background_ratio, &mut rng);
        if order.is_empty() {
            break;
        }
        let first_step = step_losses.len();
        for chunk in order.chunks(settings.batch_windows) {
            if step_losses.len() >= max_steps {
                break;
            }
            let batch: Vec<&TrainingWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let (loss, grads) = batch_gradient(&network, dataset, &batch, &anchors, &objective)?;
            if !loss.is_finite() || grads.values().any(|g| g.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    step: step_losses.len() + 1,
                });
            }
            optimizer.step(network.params_mut(), &grads);
            step_losses.push(loss);
        }
        let epoch = &step_losses[first_step..];
        if !epoch.is_empty() {
            epoch_losses.push(epoch.iter().sum::<f64>() / epoch.len() as f64);
        }
        if step_losses.len() >= max_steps {
            break 'epochs;
        }
    }
    Ok(TrainOutcome {
        network,
        step_losses,
        epoch_losses,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Loss curves of a run, for plotting and manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

impl From<&TrainOutcome> for LossCurve {
    fn from(o: &TrainOutcome) -> Self {
        Self {
            step_losses: o.step_losses.clone(),
            epoch_losses: o.epoch_losses.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig, ExpressionEvent};

    fn annotation(events: &[(usize, usize)]) -> VideoAnnotation {
        VideoAnnotation {
            video_id: "v".into(),
            subject_id: "s".into(),
            num_frames: 1000,
            events: events
                .iter()
                .map(|&(onset, offset)| ExpressionEvent {
                    onset,
                    offset,
                    apex: (onset + offset) / 2,
                    category: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn straddling_events_follow_the_half_rule() {
        // 40 of 100 frames inside [0, 134): dropped; the neighbour keeps it.
        let a = annotation(&[(94, 194)]);
        assert!(window_targets(&a, 0, 134, 0.5, false).is_empty());
        let t = window_targets(&a, 67, 134, 0.5, false);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].0, Interval::new(27.0 / 134.0, 127.0 / 134.0).unwrap());
        assert_eq!(t[0].1, 1);
        assert_eq!(window_targets(&a, 67, 134, 0.5, true)[0].1, 0);
        assert!(window_targets(&a, 500, 134, 0.5, false).is_empty());
    }

    #[test]
    fn training_windows_assign_positives_only_with_events() {
        let cfg = NetworkConfig::tiny();
        let data = DatasetConfig {
            num_subjects: 1,
            videos_per_subject: 1,
            feature_dim: 16,
            num_categories: 3,
            category_weights: vec![1.0; 3],
            min_duration: 10,
            max_duration: 20,
            min_frames: 300,
            max_frames: 300,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&data).unwrap();
        let anchors = cfg.anchors().unwrap();
        let windows = make_training_batches(&ds, &cfg, &anchors, 0.5);
        assert!(windows.iter().any(|w| w.has_event()));
        for w in &windows {
            assert_eq!(w.has_event(), w.assignment.num_positive() > 0);
        }
    }

    #[test]
    fn epoch_order_balances_windows() {
        let mk = |has: bool| TrainingWindow {
            video: 0,
            start: 0,
            targets: if has {
                vec![(Interval::new(0.0, 0.5).unwrap(), 0)]
            } else {
                Vec::new()
            },
            assignment: AssignmentResult::all_negative(1, 1),
        };
        let windows: Vec<TrainingWindow> = (0..20).map(|i| mk(i % 5 == 0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let order = epoch_order(&windows, 1.0, &mut rng);
        assert_eq!(order.len(), 8);
        assert_eq!(order.iter().filter(|&&i| windows[i].has_event()).count(), 4);
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let settings = TrainSettings {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainSettings::default()
        };
        let mut opt = AdamW::new(&settings);
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::new(vec![2], vec![1.0, -1.0]));
        let mut grads = ParamMap::new();
        grads.insert("w".into(), Tensor::new(vec![2], vec![3.0, -0.5]));
        opt.step(&mut params, &grads);
        let w = &params["w"].data;
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);

        let mut decay = AdamW::new(&TrainSettings {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..TrainSettings::default()
        });
        let mut p = ParamMap::new();
        p.insert("w".into(), Tensor::new(vec![1], vec![2.0]));
        let mut g = ParamMap::new();
        g.insert("w".into(), Tensor::new(vec![1], vec![0.0]));
        decay.step(&mut p, &g);
        assert!((p["w"].data[0] - 1.9).abs() < 1e-12);
    }
}
