//! Dyadic-transform VAE: a variational autoencoder whose posterior is a
//! diagonal Gaussian pushed through the factored linear map
//! `B = I + eps * U * V`.
//!
//! The rank-k factors turn the posterior into a full-covariance Gaussian
//! while keeping every per-datapoint cost at O(n k^2) or less: the Woodbury
//! identity gives the inverse through a k-by-k capacitance matrix and the
//! Sylvester determinant identity gives the log-determinant from the same
//! matrix. The crate contains the factored operator and its analytic
//! gradients (`dyadic`), the KL divergences (`gaussian`), a small dense
//! linear-algebra core doubling as the test oracle (`linalg`), a minimal
//! MLP stack with Adam (`nn`), the training/evaluation pipeline (`vae`),
//! MNIST-format data handling (`data`), and fixed-seed verification suites
//! (`gradcheck`, `selftest`).

pub mod data;
pub mod dyadic;
pub mod error;
pub mod fixtures;
pub mod gaussian;
pub mod gradcheck;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod selftest;
pub mod vae;

pub use data::{Dataset, GrayImage, Minibatch, MnistDir, IMAGE_PIXELS, IMAGE_SIDE};
pub use dyadic::{DyadicGrads, DyadicTransform};
pub use error::{Error, Result};
pub use gaussian::{DiagGaussian, ReparamSample};
pub use linalg::{LogDet, Matrix, Vector};
pub use nn::{AdamState, DenseLayer, EncoderOutputs, ModelConfig, ModelParams, ParamGrads};
pub use vae::{ElboBreakdown, EpochRecord, EpochSink, NullSink, Split, TrainConfig};
