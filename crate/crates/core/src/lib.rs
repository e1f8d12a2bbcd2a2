//! Multi-domain, multi-modal image-to-image translation with a Gaussian
//! mixture prior over attribute codes.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
