//! Semi-supervised learning with image-level and feature-level weak-to-strong
//! consistency, small enough to train and verify on a laptop CPU.

pub mod autodiff;
pub mod cbi;
pub mod datahub;
pub mod error;
pub mod experiment;
pub mod featperturb;
pub mod imgperturb;
pub mod nets;
pub mod rng;
pub mod schedulers;
pub mod tensor;
pub mod trainer;

pub use autodiff::{grad_check, GradCheckReport, LinearMap, NormMode, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
