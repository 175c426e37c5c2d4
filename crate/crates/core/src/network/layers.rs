use std::collections::BTreeMap;
use std::rc::Rc;

use super::{NetworkConfig, ParamMap};
use crate::anchors::SLOTS_PER_POSITION;
use crate::autograd::{im2col_index, permute_index, Activation, Graph, Var};

/// Temporal convolution kernel size (padding is `KERNEL / 2`).
pub(super) const KERNEL: usize = 3;

/// Binds named parameters to graph leaves on first use.
pub(super) struct Binder<'a> {
    pub graph: &'a mut Graph,
    params: &'a ParamMap,
    bound: BTreeMap<String, Var>,
    activation: Activation,
}

impl<'a> Binder<'a> {
    pub fn new(graph: &'a mut Graph, params: &'a ParamMap, activation: Activation) -> Self {
        Self {
            graph,
            params,
            bound: BTreeMap::new(),
            activation,
        }
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not defined for this configuration"))
            .clone();
        let v = self.graph.leaf(t);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn into_bound(self) -> BTreeMap<String, Var> {
        self.bound
    }

    /// `x W + b` over the last axis of a `[rows, in]` input.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        let y = self.graph.matmul(x, w);
        self.graph.add_bias(y, b)
    }

    /// Zero-padded convolution along the sequence axis of `[len, c_in]`.
    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize) -> Var {
        let (len, c_in) = {
            let s = self.graph.shape(x);
            (s[0], s[1])
        };
        let (out_len, index) = im2col_index(len, c_in, KERNEL, stride, KERNEL / 2);
        let patches = self.graph.gather(x, Rc::new(index), vec![out_len, KERNEL * c_in]);
        self.linear(patches, prefix)
    }

    /// Convolution, activation, then normalization over channels.
    pub fn conv_block(&mut self, x: Var, prefix: &str, stride: usize) -> Var {
        let y = self.conv(x, &format!("{prefix}.conv"), stride);
        let y = self.graph.activation(y, self.activation);
        let g = self.param(&format!("{prefix}.norm.g"));
        let b = self.param(&format!("{prefix}.norm.b"));
        self.graph.layer_norm(y, g, b)
    }

    /// Multi-head self-attention applied independently to `batch` sequences of
    /// length `len`. `x` is `[batch * len, dim]`; so is the result.
    pub fn self_attention(&mut self, x: Var, prefix: &str, batch: usize, len: usize, heads: usize) -> Var {
        let dim = self.graph.shape(x)[1];
        let head_dim = dim / heads;
        let (split_shape, split_index) = permute_index(&[batch, len, heads, head_dim], &[0, 2, 1, 3]);
        let split_index = Rc::new(split_index);
        let project = |b: &mut Self, name: &str| {
            let y = b.linear(x, &format!("{prefix}.{name}"));
            let y = b.graph.gather(y, split_index.clone(), split_shape.clone());
            b.graph.reshape(y, vec![batch * heads, len, head_dim])
        };
        let q = project(self, "q");
        let k = project(self, "k");
        let v = project(self, "v");
        let scores = self.graph.batch_matmul(q, k, true);
        let scores = self.graph.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let weights = self.graph.softmax(scores);
        let ctx = self.graph.batch_matmul(weights, v, false);
        let (_, merge_index) = permute_index(&[batch, heads, len, head_dim], &[0, 2, 1, 3]);
        let ctx = self.graph.gather(ctx, Rc::new(merge_index), vec![batch * len, dim]);
        self.linear(ctx, &format!("{prefix}.o"))
    }
}

/// Aggregates the `f` frames of each segment into one vector.
///
/// Per segment: self-attention over its frames, averaged into a global
/// vector; the global vector is appended to every frame; one affine map
/// scores each frame (softmax over frames), another reduces it back to `d`;
/// the output is the score-weighted sum of the reduced frames.
///
/// Returns the `[s, d]` output and the `[s, f]` frame scores.
pub(super) fn segment_attention_fusion(
    b: &mut Binder<'_>,
    input: Var,
    s: usize,
    f: usize,
    d: usize,
    heads: usize,
) -> (Var, Var) {
    let attended = b.self_attention(input, "segment.attention", s, f, heads);
    let attended = b.graph.reshape(attended, vec![s, f, d]);
    let global = b.graph.mean_middle(attended);
    let repeat: Vec<usize> = (0..s * f)
        .flat_map(|row| {
            let seg = row / f;
            (0..d).map(move |c| seg * d + c)
        })
        .collect();
    let tiled = b.graph.gather(global, Rc::new(repeat), vec![s * f, d]);
    let joined = b.graph.concat(input, tiled);

    let logits = b.linear(joined, "segment.score");
    let logits = b.graph.reshape(logits, vec![s, f]);
    let scores = b.graph.softmax(logits);
    let weights = b.graph.reshape(scores, vec![s, 1, f]);

    let reduced = b.linear(joined, "segment.reduce");
    let reduced = b.graph.reshape(reduced, vec![s, f, d]);
    let out = b.graph.batch_matmul(weights, reduced, false);
    (b.graph.reshape(out, vec![s, d]), scores)
}

/// Reweights window positions by a softmax over a one-channel convolution.
///
/// Row `p` of the output is row `p` of the input times `s * score_p`, so
/// uniform scores leave the input unchanged. Returns the output and the scores.
pub(super) fn sliding_window_attention(b: &mut Binder<'_>, x: Var, s: usize, _d: usize) -> (Var, Var) {
    let logits = b.conv(x, "window.conv", 1);
    let logits = b.graph.reshape(logits, vec![1, s]);
    let scores = b.graph.softmax(logits);
    let scaled = b.graph.scale(scores, s as f64);
    let scaled = b.graph.reshape(scaled, vec![s]);
    (b.graph.row_scale(x, scaled), scores)
}

/// Column-range selection `[rows, total] -> [rows, hi - lo]`.
fn columns(b: &mut Binder<'_>, x: Var, lo: usize, hi: usize) -> Var {
    let (rows, total) = {
        let s = b.graph.shape(x);
        (s[0], s[1])
    };
    let index: Vec<usize> = (0..rows).flat_map(|r| (lo..hi).map(move |c| r * total + c)).collect();
    b.graph.gather(x, Rc::new(index), vec![rows, hi - lo])
}

/// One pyramid level's head. Returns `[l, 6*2]` interval parameters,
/// `[l, 6*C]` category logits and optionally `[l, 6]` confidence logits.
pub(super) fn head(
    b: &mut Binder<'_>,
    x: Var,
    level: usize,
    cfg: &NetworkConfig,
    categories: usize,
) -> (Var, Var, Option<Var>) {
    let prefix = format!("head.{level}");
    let len = b.graph.shape(x)[0];
    let refined = b.self_attention(x, &format!("{prefix}.attention"), 1, len, cfg.attention_heads);
    let refined = b.graph.add(x, refined);
    let trunk = b.conv_block(refined, &format!("{prefix}.trunk"), 1);
    let n_int = SLOTS_PER_POSITION * 2;
    let n_cls = SLOTS_PER_POSITION * categories;
    if cfg.decoupled_head {
        let reg = b.conv_block(trunk, &format!("{prefix}.interval"), 1);
        let interval = b.linear(reg, &format!("{prefix}.interval.out"));
        let cls = b.conv_block(trunk, &format!("{prefix}.recognition"), 1);
        let logits = b.linear(cls, &format!("{prefix}.recognition.out"));
        let confidence = cfg
            .with_confidence_branch
            .then(|| b.linear(cls, &format!("{prefix}.confidence.out")));
        (interval, logits, confidence)
    } else {
        let shared = b.conv_block(trunk, &format!("{prefix}.shared"), 1);
        let out = b.linear(shared, &format!("{prefix}.shared.out"));
        let interval = columns(b, out, 0, n_int);
        let logits = columns(b, out, n_int, n_int + n_cls);
        let confidence = cfg
            .with_confidence_branch
            .then(|| columns(b, out, n_int + n_cls, n_int + n_cls + SLOTS_PER_POSITION));
        (interval, logits, confidence)
    }
}
