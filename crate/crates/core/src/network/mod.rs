//! The trainable detection network.
//!
//! ```text
//! (s, f, d) --segment attention & fusion--> (s, d)
//!           --sliding-window attention----> (s, d)
//!           --2 strided conv blocks-------> (s/2, d1) -> (s/4, d1)
//!           --neck------------------------> (s/4, d1) (s/8, d1) (s/16, d1) (s/32, d1)
//!           --per-level heads-------------> 6 slots x (2 interval params + C logits)
//! ```

mod checkpoint;
mod config;
mod layers;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{NUM_LEVELS, SLOTS_PER_POSITION};
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::NetworkConfig;
use layers::Binder;

/// Features of one sliding window: `segments x frames x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFeatures {
    pub segments: usize,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl WindowFeatures {
    pub fn new(segments: usize, frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != segments * frames * dim {
            return Err(Error::Shape(format!(
                "window data has {} values, expected {segments} x {frames} x {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("window features must be finite".into()));
        }
        Ok(Self {
            segments,
            frames,
            dim,
            data,
        })
    }
}

/// Raw head outputs of one window, flattened in anchor-table order
/// (level-major, then position, then slot).
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindowPrediction {
    pub num_categories: usize,
    /// Two values per slot: `(dc, dl)` or anchor-free start/end offsets.
    pub interval: Vec<f64>,
    /// `num_categories` logits per slot.
    pub logits: Vec<f64>,
    /// One confidence logit per slot, when the confidence branch is enabled.
    pub confidence: Option<Vec<f64>>,
}

impl RawWindowPrediction {
    pub fn zeros(num_slots: usize, num_categories: usize, with_confidence: bool) -> Self {
        Self {
            num_categories,
            interval: vec![0.0; 2 * num_slots],
            logits: vec![0.0; num_categories * num_slots],
            confidence: with_confidence.then(|| vec![0.0; num_slots]),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.interval.len() / 2
    }

    pub fn interval_params(&self, slot: usize) -> [f64; 2] {
        [self.interval[2 * slot], self.interval[2 * slot + 1]]
    }

    pub fn slot_logits(&self, slot: usize) -> &[f64] {
        let c = self.num_categories;
        &self.logits[slot * c..(slot + 1) * c]
    }

    pub fn confidence_logit(&self, slot: usize) -> Option<f64> {
        self.confidence.as_ref().map(|c| c[slot])
    }
}

/// Shapes of every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: Vec<usize>,
    pub fused: Vec<usize>,
    pub windowed: Vec<usize>,
    pub backbone: [Vec<usize>; 2],
    pub levels: Vec<Vec<usize>>,
    /// Per level: `[positions, slots, 2]`.
    pub interval_outputs: Vec<Vec<usize>>,
    /// Per level: `[positions, slots, categories]`.
    pub recognition_outputs: Vec<Vec<usize>>,
}

/// Attention weights recorded during a forward pass (for inspection).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Per segment, softmax scores over its frames (`segments x frames`).
    pub segment_scores: Option<Vec<f64>>,
    /// Softmax scores over window positions (`segments`).
    pub window_scores: Option<Vec<f64>>,
}

/// Output handles of a forward pass recorded on a graph.
pub struct ForwardVars {
    pub levels: Vec<LevelVars>,
    pub bound: BTreeMap<String, Var>,
    pub shapes: ShapeTrace,
    pub attention: AttentionTrace,
}

pub struct LevelVars {
    pub positions: usize,
    pub interval: Var,
    pub logits: Var,
    pub confidence: Option<Var>,
}

pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform Glorot with the given fan-in and fan-out.
    Glorot(usize, usize),
    Uniform(f64),
    Constant(f64),
    /// Zero for the first `n` entries, the log-odds of [`PRIOR_PROBABILITY`] after.
    PriorAfter(usize),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Prior probability used to initialize category and confidence biases.
const PRIOR_PROBABILITY: f64 = 0.01;

fn push_linear(specs: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![fan_in, fan_out],
        init: Init::Glorot(fan_in, fan_out),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![fan_out],
        init: Init::Constant(0.0),
    });
}

fn push_output(specs: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, bias: Init) {
    specs.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![fan_in, fan_out],
        init: Init::Uniform(0.01),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![fan_out],
        init: bias,
    });
}

fn push_attention(specs: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    for p in ["q", "k", "v", "o"] {
        push_linear(specs, &format!("{prefix}.{p}"), dim, dim);
    }
}

fn push_conv_block(specs: &mut Vec<ParamSpec>, prefix: &str, c_in: usize, c_out: usize) {
    push_linear(specs, &format!("{prefix}.conv"), layers::KERNEL * c_in, c_out);
    specs.push(ParamSpec {
        name: format!("{prefix}.norm.g"),
        shape: vec![c_out],
        init: Init::Constant(1.0),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.norm.b"),
        shape: vec![c_out],
        init: Init::Constant(0.0),
    });
}

fn param_specs(config: &NetworkConfig) -> Vec<ParamSpec> {
    let (d, d1, d2) = (config.input_dim, config.neck_dim, config.head_dim);
    let c = config.output_categories();
    let mut specs = Vec::new();
    if config.use_segment_attention {
        push_attention(&mut specs, "segment.attention", d);
        push_linear(&mut specs, "segment.score", 2 * d, 1);
        push_linear(&mut specs, "segment.reduce", 2 * d, d);
    }
    if config.use_window_attention {
        push_linear(&mut specs, "window.conv", layers::KERNEL * d, 1);
    }
    push_conv_block(&mut specs, "backbone.0", d, d1);
    push_conv_block(&mut specs, "backbone.1", d1, d1);
    for level in 1..NUM_LEVELS {
        push_conv_block(&mut specs, &format!("neck.{level}"), d1, d1);
    }
    for level in 0..NUM_LEVELS {
        let h = format!("head.{level}");
        push_attention(&mut specs, &format!("{h}.attention"), d1);
        push_conv_block(&mut specs, &format!("{h}.trunk"), d1, d2);
        if config.decoupled_head {
            push_conv_block(&mut specs, &format!("{h}.interval"), d2, d2);
            push_output(
                &mut specs,
                &format!("{h}.interval.out"),
                d2,
                SLOTS_PER_POSITION * 2,
                Init::Constant(0.0),
            );
            push_conv_block(&mut specs, &format!("{h}.recognition"), d2, d2);
            push_output(
                &mut specs,
                &format!("{h}.recognition.out"),
                d2,
                SLOTS_PER_POSITION * c,
                Init::PriorAfter(0),
            );
            if config.with_confidence_branch {
                push_output(
                    &mut specs,
                    &format!("{h}.confidence.out"),
                    d2,
                    SLOTS_PER_POSITION,
                    Init::PriorAfter(0),
                );
            }
        } else {
            push_conv_block(&mut specs, &format!("{h}.shared"), d2, d2);
            // Columns: interval params, then logits, then confidence.
            let conf = usize::from(config.with_confidence_branch);
            let cols = SLOTS_PER_POSITION * (2 + c + conf);
            push_output(
                &mut specs,
                &format!("{h}.shared.out"),
                d2,
                cols,
                Init::PriorAfter(SLOTS_PER_POSITION * 2),
            );
        }
    }
    specs
}

/// Network parameters plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionNetwork {
    config: NetworkConfig,
    params: ParamMap,
}

impl DetectionNetwork {
    /// Seeded initialization.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        let mut params = ParamMap::new();
        for spec in param_specs(&config) {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Glorot(fan_in, fan_out) => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..a)).collect(),
                Init::Constant(v) => vec![v; n],
                Init::PriorAfter(zeros) => {
                    let mut b = vec![prior; n];
                    b[..zeros].fill(0.0);
                    b
                }
            };
            params.insert(spec.name, Tensor::new(spec.shape, data));
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_parts(config: NetworkConfig, params: ParamMap) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter groups, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            match params.get(&spec.name) {
                Some(t) if t.shape == spec.shape => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name, t.shape, spec.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {}", spec.name))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records the forward pass of one window on `graph`.
    pub fn forward(&self, graph: &mut Graph, window: &WindowFeatures) -> Result<ForwardVars> {
        let cfg = &self.config;
        if window.segments != cfg.segments || window.frames != cfg.frames_per_segment || window.dim != cfg.input_dim {
            return Err(Error::Shape(format!(
                "window is {} x {} x {}, network expects {} x {} x {}",
                window.segments, window.frames, window.dim, cfg.segments, cfg.frames_per_segment, cfg.input_dim
            )));
        }
        let (s, f, d) = (cfg.segments, cfg.frames_per_segment, cfg.input_dim);
        let mut b = Binder::new(graph, &self.params, cfg.activation);

        let input = b.graph.leaf(Tensor::new(vec![s * f, d], window.data.clone()));
        let (fused, segment_scores) = if cfg.use_segment_attention {
            let (out, scores) = layers::segment_attention_fusion(&mut b, input, s, f, d, cfg.attention_heads);
            (out, Some(b.graph.value(scores).data.clone()))
        } else {
            let x = b.graph.reshape(input, vec![s, f, d]);
            (b.graph.mean_middle(x), None)
        };
        let fused_shape = b.graph.shape(fused).to_vec();

        let (windowed, window_scores) = if cfg.use_window_attention {
            let (out, scores) = layers::sliding_window_attention(&mut b, fused, s, d);
            (out, Some(b.graph.value(scores).data.clone()))
        } else {
            (fused, None)
        };
        let windowed_shape = b.graph.shape(windowed).to_vec();

        let c1 = b.conv_block(windowed, "backbone.0", 2);
        let c2 = b.conv_block(c1, "backbone.1", 2);
        let backbone = [b.graph.shape(c1).to_vec(), b.graph.shape(c2).to_vec()];

        let mut levels = vec![c2];
        for level in 1..NUM_LEVELS {
            let prev = levels[level - 1];
            levels.push(b.conv_block(prev, &format!("neck.{level}"), 2));
        }
        let level_shapes: Vec<Vec<usize>> = levels.iter().map(|&v| b.graph.shape(v).to_vec()).collect();

        let c = cfg.output_categories();
        let mut outputs = Vec::with_capacity(NUM_LEVELS);
        for (level, &feat) in levels.iter().enumerate() {
            let positions = b.graph.shape(feat)[0];
            let out = layers::head(&mut b, feat, level, cfg, c);
            outputs.push(LevelVars {
                positions,
                interval: out.0,
                logits: out.1,
                confidence: out.2,
            });
        }
        let shapes = ShapeTrace {
            input: vec![s, f, d],
            fused: fused_shape,
            windowed: windowed_shape,
            backbone,
            levels: level_shapes,
            interval_outputs: outputs
                .iter()
                .map(|o| vec![o.positions, SLOTS_PER_POSITION, 2])
                .collect(),
            recognition_outputs: outputs
                .iter()
                .map(|o| vec![o.positions, SLOTS_PER_POSITION, c])
                .collect(),
        };
        let bound = b.into_bound();
        Ok(ForwardVars {
            levels: outputs,
            bound,
            shapes,
            attention: AttentionTrace {
                segment_scores,
                window_scores,
            },
        })
    }

    /// Collects the flat raw prediction from a recorded forward pass.
    pub fn collect(&self, graph: &Graph, vars: &ForwardVars) -> RawWindowPrediction {
        let mut raw = RawWindowPrediction {
            num_categories: self.config.output_categories(),
            interval: Vec::new(),
            logits: Vec::new(),
            confidence: self.config.with_confidence_branch.then(Vec::new),
        };
        for level in &vars.levels {
            raw.interval.extend_from_slice(&graph.value(level.interval).data);
            raw.logits.extend_from_slice(&graph.value(level.logits).data);
            if let (Some(conf), Some(v)) = (raw.confidence.as_mut(), level.confidence) {
                conf.extend_from_slice(&graph.value(v).data);
            }
        }
        raw
    }

    /// Inference for one window.
    pub fn predict(&self, window: &WindowFeatures) -> Result<RawWindowPrediction> {
        let mut graph = Graph::new();
        let vars = self.forward(&mut graph, window)?;
        Ok(self.collect(&graph, &vars))
    }

    /// Back-propagates gradients of the raw outputs into parameter gradients.
    pub fn backward(&self, graph: &Graph, vars: &ForwardVars, output_grad: &RawWindowPrediction) -> ParamMap {
        let c = self.config.output_categories();
        let mut seeds = Vec::new();
        let mut slot_offset = 0;
        for level in &vars.levels {
            let n = level.positions * SLOTS_PER_POSITION;
            let range = slot_offset..slot_offset + n;
            seeds.push((
                level.interval,
                Tensor::new(
                    graph.shape(level.interval).to_vec(),
                    output_grad.interval[2 * range.start..2 * range.end].to_vec(),
                ),
            ));
            seeds.push((
                level.logits,
                Tensor::new(
                    graph.shape(level.logits).to_vec(),
                    output_grad.logits[c * range.start..c * range.end].to_vec(),
                ),
            ));
            if let (Some(v), Some(g)) = (level.confidence, output_grad.confidence.as_ref()) {
                seeds.push((v, Tensor::new(graph.shape(v).to_vec(), g[range.clone()].to_vec())));
            }
            slot_offset += n;
        }
        let mut grads = graph.backward(seeds);
        vars.bound
            .iter()
            .map(|(name, &var)| {
                let g = grads
                    .take(var)
                    .unwrap_or_else(|| Tensor::zeros(self.params[name].shape.clone()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::SLOTS_PER_POSITION;

    fn random_window(cfg: &NetworkConfig, seed: u64) -> WindowFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.segments * cfg.frames_per_segment * cfg.input_dim;
        WindowFeatures::new(
            cfg.segments,
            cfg.frames_per_segment,
            cfg.input_dim,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn tiny_forward_shapes() {
        let cfg = NetworkConfig::tiny();
        let net = DetectionNetwork::new(cfg.clone(), 0).unwrap();
        let mut g = Graph::new();
        let vars = net.forward(&mut g, &random_window(&cfg, 1)).unwrap();
        assert_eq!(vars.shapes.fused, vec![32, 16]);
        assert_eq!(vars.shapes.windowed, vec![32, 16]);
        assert_eq!(vars.shapes.backbone, [vec![16, 16], vec![8, 16]]);
        assert_eq!(
            vars.shapes.levels,
            vec![vec![8, 16], vec![4, 16], vec![2, 16], vec![1, 16]]
        );
        let raw = net.collect(&g, &vars);
        assert_eq!(raw.num_slots(), SLOTS_PER_POSITION * 15);
        assert_eq!(raw.logits.len(), raw.num_slots() * 3);
        assert!(raw.confidence.is_none());
    }

    #[test]
    fn attention_scores_are_distributions() {
        let cfg = NetworkConfig::tiny();
        let net = DetectionNetwork::new(cfg.clone(), 0).unwrap();
        let mut g = Graph::new();
        let vars = net.forward(&mut g, &random_window(&cfg, 2)).unwrap();
        let seg = vars.attention.segment_scores.unwrap();
        for row in seg.chunks(cfg.frames_per_segment) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let win = vars.attention.window_scores.unwrap();
        assert_eq!(win.len(), cfg.segments);
        assert!((win.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_is_deterministic() {
        let cfg = NetworkConfig::tiny();
        let a = DetectionNetwork::new(cfg.clone(), 5).unwrap();
        let b = DetectionNetwork::new(cfg.clone(), 5).unwrap();
        let w = random_window(&cfg, 3);
        assert_eq!(a.predict(&w).unwrap(), b.predict(&w).unwrap());
    }

    #[test]
    fn rejects_mismatched_window() {
        let cfg = NetworkConfig::tiny();
        let net = DetectionNetwork::new(cfg.clone(), 0).unwrap();
        let w = WindowFeatures::new(32, 4, 8, vec![0.0; 32 * 4 * 8]).unwrap();
        assert!(matches!(net.predict(&w), Err(Error::Shape(_))));
    }

    #[test]
    fn ablations_remove_expected_parameters() {
        let base = NetworkConfig::tiny();
        let full = DetectionNetwork::new(base.clone(), 0).unwrap().num_parameters();
        let d = base.input_dim;
        let no_seg = DetectionNetwork::new(
            NetworkConfig {
                use_segment_attention: false,
                ..base.clone()
            },
            0,
        )
        .unwrap()
        .num_parameters();
        let mha = 4 * (d * d + d);
        let branches = (2 * d + 1) + (2 * d * d + d);
        assert_eq!(full - no_seg, mha + branches);
        let no_sw = DetectionNetwork::new(
            NetworkConfig {
                use_window_attention: false,
                ..base.clone()
            },
            0,
        )
        .unwrap()
        .num_parameters();
        assert_eq!(full - no_sw, 3 * d + 1);
    }

    #[test]
    fn spotting_only_emits_one_logit_per_slot() {
        let cfg = NetworkConfig {
            spotting_only: true,
            ..NetworkConfig::tiny()
        };
        let net = DetectionNetwork::new(cfg.clone(), 0).unwrap();
        let raw = net.predict(&random_window(&cfg, 4)).unwrap();
        assert_eq!(raw.num_categories, 1);
        assert_eq!(raw.logits.len(), raw.num_slots());
    }

    #[test]
    fn coupled_head_and_confidence_branch_shapes() {
        let cfg = NetworkConfig {
            decoupled_head: false,
            with_confidence_branch: true,
            ..NetworkConfig::tiny()
        };
        let net = DetectionNetwork::new(cfg.clone(), 0).unwrap();
        let raw = net.predict(&random_window(&cfg, 4)).unwrap();
        assert_eq!(raw.confidence.as_ref().unwrap().len(), raw.num_slots());
        assert_eq!(raw.logits.len(), raw.num_slots() * 3);
        // Interval outputs start at the anchors; logits start near the prior.
        assert!(raw.interval.iter().all(|v| v.abs() < 0.5));
        assert!(raw.logits.iter().all(|v| *v < -3.0));
    }
}
