//! Agent-centric pedestrian trajectory prediction: a belief learner trained
//! with a free-energy objective, refined by a residual diffusion generator.

pub mod belief;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
