//! Joint temporal expression spotting and recognition in long sequences.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: 1D intervals, the IoU family with gradients, NMS, matching
//! - [`anchors`]: pyramid anchor layout, interval codec, target assignment
//! - [`data`]: synthetic long-sequence generator and its file formats
//! - [`autograd`]: the reverse-mode tape the network is built on
//! - [`network`]: segment/window attention backbone, pyramid neck, heads
//! - [`loss`]: interval and recognition objectives
//! - [`pipeline`]: sliding-window inference over whole sequences
//! - [`eval`]: F1 protocol, AP/mAP, confusion matrices, reports
//! - [`train`]: optimizer, leave-one-subject-out runs and ablations

pub mod anchors;
pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod network;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Interval, IouVariant, ScoredDetection};
