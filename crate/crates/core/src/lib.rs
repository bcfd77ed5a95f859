//! Core of the unit-dissection toolkit: hand-written CNN kernels, a portable
//! chain-model format, lesion-labelled patch datasets, SGD training and the
//! dissection of convolutional units into top-activating patch montages.

pub mod dataset;
pub mod dissect;
mod error;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use image::GrayImage;
