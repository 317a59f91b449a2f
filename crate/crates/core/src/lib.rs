//! coVariance neural networks (VNNs) for brain-age estimation.
//!
//! A VNN is a graph convolutional network whose graph shift operator is a sample
//! covariance matrix. Its learned state is a set of polynomial filter taps that do
//! not depend on the number of features, so a model trained on one parcellation can
//! be evaluated on another. This crate covers the whole workflow: cohort I/O,
//! covariance estimation, the network and its exact gradients, ensemble training,
//! age-bias correction and Δ-Age, transfer across scales and sites, the group
//! statistics used to read the results, and a synthetic multi-scale cohort generator.

pub mod brainage;
pub mod cli;
pub mod config;
pub mod covariance;
pub mod dataset;
pub mod error;
pub mod stats;
pub mod synth;
pub mod training;
pub mod transfer;
pub mod vnn;

pub use error::{Error, Result};
