//! Individual-tree forest inventory from airborne LiDAR and hyperspectral
//! imagery: canopy height modelling, crown delineation, band selection,
//! species classification, allometry and plot-level validation.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod allometry;
pub mod chm;
pub mod classify;
pub mod config;
pub mod crowns;
pub mod evaluate;
pub mod geodata;
pub mod pipeline;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
