//! Anonymizing learned image codec.
//!
//! A GDN1 convolutional autoencoder with a factorized entropy bottleneck,
//! trained with a rate term, a full-image distortion term, a distortion term
//! over person boxes and an *inverted* distortion term over head boxes, so
//! that decoded images keep people detectable but destroy head regions.
//!
//! The numeric core is generic over [`Scalar`] (`f32` and `f64`); the
//! aliases at the crate root pick the deployment precision.

pub mod bottleneck;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ImageTensor, LatentTensor, Tensor3};

/// Precision used by the command-line tool.
pub type Precision = f32;

pub type Image = ImageTensor<Precision>;
pub type Latent = LatentTensor<Precision>;
pub type Parameters = model::ParameterStore<Precision>;
pub type Model = codec::ModelBundle<Precision>;
pub type TrainingState = trainer::TrainState<Precision>;
pub type Sample = data::AnnotatedImage<Precision>;
