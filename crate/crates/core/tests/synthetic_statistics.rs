use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use teds_core::data::{
    category_directions, generate_dataset, render_features, sample_annotation, DatasetConfig, ExpressionEvent,
    VideoAnnotation,
};

fn long_video(events: Vec<ExpressionEvent>, n: usize) -> VideoAnnotation {
    VideoAnnotation {
        video_id: "probe".into(),
        subject_id: "s".into(),
        num_frames: n,
        events,
    }
}

#[test]
fn background_frames_have_chi_norm() {
    let cfg = DatasetConfig::default();
    let video = render_features(&long_video(Vec::new(), 4000), &cfg);
    let mean_norm = (0..video.num_frames)
        .map(|t| video.frame(t).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / video.num_frames as f64;
    let expected = (cfg.feature_dim as f64).sqrt();
    assert!((mean_norm / expected - 1.0).abs() < 0.05, "mean norm {mean_norm}");
}

#[test]
fn apex_projection_recovers_snr() {
    let cfg = DatasetConfig::default();
    let dirs = category_directions(&cfg);
    // Many short events so the apex estimate averages out the unit noise.
    let events: Vec<ExpressionEvent> = (0..400)
        .map(|i| ExpressionEvent {
            onset: 20 * i,
            offset: 20 * i + 10,
            apex: 20 * i + 5,
            category: i % cfg.num_categories,
        })
        .collect();
    let video = render_features(&long_video(events.clone(), 8000), &cfg);
    let mean: f64 = events
        .iter()
        .map(|e| {
            video
                .frame(e.apex)
                .iter()
                .zip(&dirs[e.category])
                .map(|(&x, u)| f64::from(x) * u)
                .sum::<f64>()
        })
        .sum::<f64>()
        / events.len() as f64;
    assert!((mean - cfg.snr).abs() < 0.2, "mean apex projection {mean}");
}

#[test]
fn zero_snr_events_are_invisible() {
    let cfg = DatasetConfig {
        snr: 0.0,
        ..DatasetConfig::default()
    };
    let e = ExpressionEvent {
        onset: 10,
        offset: 50,
        apex: 30,
        category: 2,
    };
    assert_eq!(
        render_features(&long_video(vec![e], 100), &cfg),
        render_features(&long_video(Vec::new(), 100), &cfg)
    );
}

#[test]
fn category_frequencies_follow_weights() {
    let cfg = DatasetConfig {
        min_events: 5,
        max_events: 5,
        min_duration: 10,
        max_duration: 20,
        ..DatasetConfig::default()
    };
    let mut counts = [0usize; 4];
    let mut total = 0;
    let mut v = 0;
    while total < 10_000 {
        let a = sample_annotation(&cfg, &format!("v{v}"), "s").unwrap();
        for e in &a.events {
            counts[e.category] += 1;
            total += 1;
        }
        v += 1;
    }
    let sum: f64 = cfg.category_weights.iter().sum();
    for (c, &n) in counts.iter().enumerate() {
        let observed = n as f64 / total as f64;
        let expected = cfg.category_weights[c] / sum;
        assert!(
            (observed - expected).abs() < 0.03,
            "category {c}: {observed} vs {expected}"
        );
    }

    // Oracle: the weighted sampler itself at the same sample size.
    let w = WeightedIndex::new(&cfg.category_weights).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let direct = (0..10_000).filter(|_| w.sample(&mut rng) == 1).count() as f64 / 10_000.0;
    assert!((direct - 16.0 / 300.0).abs() < 0.03);
}

#[test]
fn generated_corpus_respects_every_constraint() {
    let cfg = DatasetConfig::default();
    let ds = generate_dataset(&cfg).unwrap();
    assert_eq!(ds.annotations.len(), cfg.num_subjects * cfg.videos_per_subject);
    for (a, f) in ds.annotations.iter().zip(&ds.features) {
        assert_eq!(a.num_frames, f.num_frames);
        assert!(f.data.iter().all(|v| v.is_finite()));
        for w in a.events.windows(2) {
            assert!(w[1].onset >= w[0].offset + cfg.min_gap);
        }
        for e in &a.events {
            assert!((cfg.min_duration..=cfg.max_duration).contains(&e.duration()));
            assert!(e.onset < e.apex && e.apex < e.offset && e.offset <= a.num_frames);
        }
    }
}
