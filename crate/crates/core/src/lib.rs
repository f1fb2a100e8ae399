//! Hyperspectral-image classification on superpixel graphs.
//!
//! The pipeline: segment a radiance cube into superpixels, build a node graph
//! (spectral means + adjacency), rebalance minority classes with an
//! adversarially trained feature generator, classify nodes with a graph
//! convolutional network whose final layers carry Gaussian-distributed
//! weights, and use Monte-Carlo confidence intervals over repeated forward
//! passes both to quantify prediction uncertainty and to stop training early.

pub mod bayes;
pub mod config;
pub mod error;
pub mod gan;
pub mod graph;
pub mod hsi;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod slic;
pub mod split;
pub mod synth;
pub mod tape;
pub mod trainer;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use matrix::Matrix;
