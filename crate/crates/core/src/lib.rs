//! Sharpness-aware quantization-aware training, adaptive perturbations, and a
//! learned per-layer bitwidth search.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod experiment;
pub mod netlib;
pub mod optim;
pub mod probe;
pub mod quantizer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
