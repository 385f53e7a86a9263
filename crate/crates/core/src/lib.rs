#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod dataset;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod geom;
pub mod latentops;
pub mod metrics;
pub mod model;
mod nn;
pub mod par;
pub mod shapegen;
pub mod topology;
pub mod training;

pub use error::{Error, Result};
