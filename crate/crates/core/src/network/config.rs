use serde::{Deserialize, Serialize};

use crate::anchors::{build_anchors, AnchorTable, PyramidLayout, ANCHORS_PER_POSITION, DEFAULT_SCALE_MULTIPLIERS};
use crate::autograd::Activation;
use crate::error::{Error, Result};
use crate::geometry::IouVariant;

/// Architecture, ablation switches and objective weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Segments per sliding window (`s`).
    pub segments: usize,
    /// Frames per segment (`f`).
    pub frames_per_segment: usize,
    /// Frames shared by consecutive segments; the segment stride is `f - overlap`.
    pub frame_overlap: usize,
    /// Per-frame feature size (`d`).
    pub input_dim: usize,
    /// Backbone and neck channels (`d1`).
    pub neck_dim: usize,
    /// Head hidden channels (`d2`).
    pub head_dim: usize,
    pub num_categories: usize,
    pub attention_heads: usize,
    pub use_segment_attention: bool,
    pub use_window_attention: bool,
    pub decoupled_head: bool,
    pub with_confidence_branch: bool,
    /// Train without category labels: a single "expression present" class.
    pub spotting_only: bool,
    pub loss_variant: IouVariant,
    /// Interval loss weight.
    pub alpha: f64,
    /// Recognition loss weight.
    pub beta: f64,
    pub activation: Activation,
    pub anchor_multipliers: [f64; ANCHORS_PER_POSITION],
    /// IoU at which a slot becomes a positive during target assignment.
    pub positive_iou: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            segments: 64,
            frames_per_segment: 8,
            frame_overlap: 6,
            input_dim: 512,
            neck_dim: 512,
            head_dim: 256,
            num_categories: 4,
            attention_heads: 8,
            use_segment_attention: true,
            use_window_attention: true,
            decoupled_head: true,
            with_confidence_branch: false,
            spotting_only: false,
            loss_variant: IouVariant::Diou,
            alpha: 1.0,
            beta: 2.0,
            activation: Activation::Gelu,
            anchor_multipliers: DEFAULT_SCALE_MULTIPLIERS,
            positive_iou: 0.5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::NetworkConfig(m));
        PyramidLayout::new(self.segments)?;
        if self.frames_per_segment == 0 || self.frame_overlap >= self.frames_per_segment {
            return bad(format!(
                "frame overlap {} must be smaller than frames per segment {}",
                self.frame_overlap, self.frames_per_segment
            ));
        }
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("neck_dim", self.neck_dim),
            ("head_dim", self.head_dim),
            ("num_categories", self.num_categories),
            ("attention_heads", self.attention_heads),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.input_dim.is_multiple_of(self.attention_heads) || !self.neck_dim.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "attention_heads {} must divide input_dim {} and neck_dim {}",
                self.attention_heads, self.input_dim, self.neck_dim
            ));
        }
        if !(self.positive_iou > 0.0 && self.positive_iou <= 1.0) {
            return bad("positive_iou must lie in (0, 1]".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        self.anchors().map(|_| ())
    }

    pub fn segment_stride(&self) -> usize {
        self.frames_per_segment - self.frame_overlap
    }

    /// Frames spanned by one window: `(s - 1) * k + f`.
    pub fn frames_per_window(&self) -> usize {
        (self.segments - 1) * self.segment_stride() + self.frames_per_segment
    }

    /// Number of category logits per slot (one when spotting only).
    pub fn output_categories(&self) -> usize {
        if self.spotting_only {
            1
        } else {
            self.num_categories
        }
    }

    pub fn layout(&self) -> Result<PyramidLayout> {
        PyramidLayout::new(self.segments)
    }

    pub fn anchors(&self) -> Result<AnchorTable> {
        build_anchors(self.layout()?, self.anchor_multipliers)
    }

    /// Small configuration used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            segments: 32,
            frames_per_segment: 4,
            frame_overlap: 2,
            input_dim: 16,
            neck_dim: 16,
            head_dim: 8,
            num_categories: 3,
            attention_heads: 2,
            ..Self::default()
        }
    }
}
