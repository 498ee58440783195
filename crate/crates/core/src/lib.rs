//! Spatial tokens for a toy autoregressive driving planner.
//!
//! Metric 3D coordinates enter the model through one sinusoidal encoder
//! ([`pe`]): added to camera patch tokens after depth back-projection
//! ([`geometry`]), substituted for coordinates written in prompts
//! ([`tokens`]), and regressed back out of hidden states by a small decoder
//! whenever the planner emits an indicator token ([`model`]).

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod pe;
pub mod prompt;
pub mod scene;
pub mod shapes;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
pub use geometry::Coordinate3D;
