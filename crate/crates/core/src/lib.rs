//! Stacked random forests for pixel labeling, their exact mapping onto deep
//! sparse networks, gradient refinement, and mapping back to forests.
pub mod autocontext;
pub mod dataset;
pub mod deepnet;
pub mod error;
pub mod features;
pub mod forest;
pub mod grid;
pub mod io;
pub mod mapback;
pub mod metrics;
pub mod pipeline;
pub mod rf2nn;
pub mod synth;

pub use error::{Error, Result};
