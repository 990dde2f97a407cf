//! Dual-pathway LiDAR detection backbone that fuses multi-sweep ("dynamic")
//! and current-sweep ("static") bird's-eye-view features with neighborhood
//! cross attention and a dynamic-static interaction module.
//!
//! The crate is self-contained: a small autodiff tensor core, a synthetic
//! LiDAR scene simulator, pillar encoding, the fusion modules, a toy
//! detection head with its losses, center-distance evaluation, and attention
//! cost accounting.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dsi;
pub mod error;
pub mod eval;
pub mod model;
pub mod nca;
pub mod pillars;
pub mod synthlidar;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
