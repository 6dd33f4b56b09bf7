//! Variational autoencoder for joint reconstruction and forecasting of
//! multichannel time series, with a latent space split into label-supervised
//! marginal dimensions (RBF mixture prior) and Gaussian conditional dimensions,
//! trained by interleaving classifier and main objectives.
//!
//! The crate also carries a numerical verification suite for the identities
//! and bounds the loss function rests on (see [`verification`]).

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
