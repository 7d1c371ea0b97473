//! Content-aware token mixing for single-image super-resolution.

pub mod flops;
pub mod imaging;
pub mod mixer;
pub mod model;
pub mod predictor;
pub mod tensor;
pub mod train;
