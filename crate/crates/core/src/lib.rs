//! Identification of binary source regions in stationary advection-diffusion
//! flows from concentration measurements.
//!
//! The pipeline has two stages. A relaxed control problem with bounds
//! `0 <= f <= 1` is solved by a primal-dual active-set (semismooth Newton)
//! method; its solution is rounded to a level-set function, which is then
//! refined by shape optimization with a volume-form shape derivative and
//! level-set transport.

pub mod cli;
pub mod error;
pub mod fem;
pub mod grid;
pub mod levelset;
pub mod linalg;
pub mod relax;
pub mod shapeopt;
pub mod synth;

pub use error::{Error, Result};
