//! Hybrid convolutional + bidirectional selective-scan classifier for
//! benign/malignant mammography ROI classification, together with the data,
//! training and evaluation pipeline around it.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod params;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
