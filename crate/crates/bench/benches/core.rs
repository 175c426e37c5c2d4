use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use teds_core::autograd::Graph;
use teds_core::data::{generate_dataset, DatasetConfig};
use teds_core::eval::{map_range, truths_from_annotations, ApMode};
use teds_core::geometry::{diou_loss_with_grad, nms};
use teds_core::network::{DetectionNetwork, NetworkConfig, WindowFeatures};
use teds_core::pipeline::{detect_video, DetectConfig, Predictions};
use teds_core::{Interval, ScoredDetection};

/// Deterministic pseudo-random values in [0, 1).
fn lcg(state: &mut u64) -> f64 {
    *state = state
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    (*state >> 11) as f64 / (1u64 << 53) as f64
}

fn detections(n: usize, seed: u64) -> Vec<ScoredDetection> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            let start = lcg(&mut s) * 1000.0;
            let len = 5.0 + lcg(&mut s) * 60.0;
            ScoredDetection {
                interval: Interval::new(start, start + len).unwrap(),
                confidence: lcg(&mut s),
                category_scores: Vec::new(),
                category: (lcg(&mut s) * 4.0) as usize,
            }
        })
        .collect()
}

fn small_network() -> NetworkConfig {
    NetworkConfig {
        segments: 64,
        frames_per_segment: 8,
        frame_overlap: 6,
        input_dim: 64,
        neck_dim: 32,
        head_dim: 16,
        num_categories: 4,
        attention_heads: 2,
        ..NetworkConfig::default()
    }
}

fn geometry(c: &mut Criterion) {
    let p = Interval::new(3.0, 11.5).unwrap();
    let g = Interval::new(5.0, 14.0).unwrap();
    c.bench_function("diou_loss_with_grad", |b| {
        b.iter(|| diou_loss_with_grad(black_box(&p), black_box(&g)))
    });
    let dets = detections(500, 1);
    c.bench_function("nms_500", |b| b.iter(|| nms(black_box(&dets), 0.3)));
}

fn network(c: &mut Criterion) {
    let cfg = small_network();
    let net = DetectionNetwork::new(cfg.clone(), 0).unwrap();
    let mut s = 7;
    let n = cfg.segments * cfg.frames_per_segment * cfg.input_dim;
    let window = WindowFeatures::new(
        cfg.segments,
        cfg.frames_per_segment,
        cfg.input_dim,
        (0..n).map(|_| lcg(&mut s) - 0.5).collect(),
    )
    .unwrap();
    c.bench_function("forward_window_s64", |b| {
        b.iter(|| net.predict(black_box(&window)).unwrap())
    });
    c.bench_function("forward_backward_window_s64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let vars = net.forward(&mut g, &window).unwrap();
            let raw = net.collect(&g, &vars);
            net.backward(&g, &vars, &raw)
        })
    });

    let data = DatasetConfig {
        num_subjects: 1,
        videos_per_subject: 1,
        min_frames: 900,
        max_frames: 900,
        min_events: 2,
        max_events: 4,
        min_duration: 20,
        max_duration: 60,
        ..DatasetConfig::default()
    };
    let video = generate_dataset(&data).unwrap().features.remove(0);
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("detect_video_900_frames", |b| {
        b.iter(|| detect_video(black_box(&video), &net, &DetectConfig::default()).unwrap())
    });
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let data = DatasetConfig {
        num_subjects: 4,
        videos_per_subject: 5,
        ..DatasetConfig::default()
    };
    let truths = truths_from_annotations(&generate_dataset(&data).unwrap().annotations);
    let preds: Predictions = truths
        .iter()
        .enumerate()
        .map(|(i, t)| (t.video_id.clone(), detections(40, i as u64)))
        .collect::<BTreeMap<_, _>>();
    c.bench_function("map_range_detection_20_videos", |b| {
        b.iter(|| map_range(black_box(&preds), &truths, ApMode::Detection))
    });
}

criterion_group!(benches, geometry, network, evaluation);
criterion_main!(benches);
