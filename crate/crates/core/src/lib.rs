//! TauFlow: complexity-adaptive image segmentation with a convolutional
//! liquid-time-constant core.
//!
//! An encoder produces a quarter-resolution feature map. A complexity score
//! decides how many soft groups that map is split into. Each group is gated by
//! τ-attention and evolved by a leaky recurrent cell whose per-pixel time
//! constants are learned. The fused result is decoded back to full resolution.
//! A spike-timing regularizer shapes the cell dynamics during training.
//!
//! Everything runs on the small reverse-mode autodiff in [`tensor`].

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod attention;
pub mod backbone;
pub mod cell;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grouping;
pub mod interface;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod stdp;
pub mod tensor;
pub mod train;
