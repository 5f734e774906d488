//! Transparent-object depth completion at desk scale.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod pipeline;
pub mod regions;
pub mod reldepth;
pub mod scene;

pub use error::{Error, ErrorClass, Result};
pub use grid::{DepthMap, Grid, Mask, RgbImage};
