//! Hybrid rigid + non-rigid multimodal image registration.

pub mod backbone;
pub mod cdap;
pub mod config;
pub mod error;
pub mod geometry;
pub mod hppm;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod plot;
pub mod synthdata;
pub mod train;

pub use error::{HrError, Result};
