//! Spatial-temporal progressive fusion network for semi-supervised video
//! lesion segmentation, with its own dense tensor and reverse-mode autodiff
//! layer.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod msff;
pub mod nn;
pub mod propagation;
pub mod spatial;
pub mod temporal;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, PoolMode, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
