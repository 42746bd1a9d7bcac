//! End-to-end neural speaker diarization with encoder-decoder attractors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activity;
pub mod assignment;
pub mod autodiff;
pub mod checkpoint;
pub mod combine;
pub mod config;
pub mod eda;
pub mod encoder;
pub mod error;
pub mod features;
pub mod inference;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod rttm;
pub mod scoring;
pub mod simulate;
pub mod tensor;
pub mod trainer;

pub use activity::{ActivityMatrix, PosteriorMatrix};
pub use error::{Error, Result};
pub use tensor::Tensor;
