//! Maximum-likelihood-type estimation for SDEs driven by fractional Brownian
//! motion with H > 1/2, using Malliavin Monte-Carlo density and score estimates
//! inside a Robbins-Monro iteration.

pub mod error;
pub mod estimator;
pub mod fbm;
pub mod likelihood;
pub mod malliavin;
pub mod models;
pub mod pathwise;
pub mod rates;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
