//! Attribute-conditioned human figure synthesis at desk scale.

pub mod error;
pub mod grid;
pub mod indexnet;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod sampler;
pub mod stage1;
pub mod synth;
pub mod textattr;
pub mod vq;

pub use error::{Error, Result};
