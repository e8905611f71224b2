//! Video object detection with progressive temporal feature aggregation,
//! built on a self-contained reverse-mode autodiff tensor engine.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: tensors, the gradient tape, and the op set
//! - [`nn`]: linear layers, multi-head attention, layer norm, Adam
//! - [`correlation`]: plain and gated correlation operators
//! - [`encoder`]: conv stem + self-attention frame encoder
//! - [`aggregation`]: TFAM, STAM and progressive aggregation
//! - [`decoder`]: query assembling, decoder, detection heads
//! - [`matching`] / [`map_eval`]: Hungarian matching, losses, mAP
//! - [`synthvid`]: synthetic video dataset generator
//! - [`model`] / [`train`]: the full detector and its training loop
//! - [`gradcheck`]: finite-difference verification of every op

pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod correlation;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod map_eval;
pub mod matching;
pub mod model;
pub mod nn;
pub mod synthvid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
