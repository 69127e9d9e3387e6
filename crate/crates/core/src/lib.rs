//! Timing and motion separation for repeated functional observations.
//!
//! Curves are decomposed into a shared template, individual templates,
//! serially correlated amplitude effects and random nonlinear time warps,
//! estimated by maximum likelihood. The fitted decomposition drives
//! participant classification, factor analysis of aligned spatial paths and
//! simulation-based validation.

pub mod basis;
pub mod classify;
pub mod cov;
pub mod data;
pub mod error;
pub mod factor;
pub mod mathutil;
pub mod mixedmodel;
pub mod simulate;
pub mod warp;

pub use error::{Error, ErrorClass, Result};
