//! Blind quality assessment for omnidirectional (360°) images.
//!
//! The pipeline renders perspective viewports from an equirectangular
//! panorama, encodes each viewport with a multi-axis attention backbone,
//! fuses multi-scale features with learnable generalized-mean pooling,
//! regresses per-viewport scores through a recurrent head and averages them
//! into an image score. Training uses the Norm-in-Norm loss; evaluation
//! reports PLCC/SRCC/RMSE after a five-parameter logistic mapping.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below
//! fix the common choices.

pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod head;
pub mod model;
pub mod ndgrad;
pub mod objective;
pub mod scalar;
pub mod sphere;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = ndgrad::Tensor<f64>;
pub type Tensor32 = ndgrad::Tensor<f32>;
pub type ParamStore64 = ndgrad::ParamStore<f64>;
pub type ParamStore32 = ndgrad::ParamStore<f32>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
