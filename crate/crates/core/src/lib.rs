//! Pilot-free channel covariance estimation from user location and speed.
//!
//! The crate models a single-cell downlink with a uniform planar array at the
//! base station and a single-antenna user moving on a horizontal plane. A
//! deterministic multipath [`scene`] maps user positions to channels, the
//! [`covariance`] module turns a location/speed pair into the covariance of the
//! channels over the user's reachable region, small networks in [`nn`] learn
//! that mapping (and the inverse channel-to-location mapping), [`denoise`]
//! corrects noisy location reports with a Gaussian fusion filter, and
//! [`estimator`] measures the payoff through water-filling pilots and LMMSE
//! channel estimation. [`sim`] ties everything into trajectory experiments.
//!
//! Parallel loops go through [`par::Exec`]; with the `parallel` feature
//! disabled every loop runs sequentially and produces identical results.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod dataset;
pub mod denoise;
mod error;
pub mod estimator;
pub mod geometry;
pub mod linalg;
pub mod nn;
pub mod par;
pub mod rng;
pub mod scene;
pub mod sim;

pub use error::{Error, Result};
pub use num_complex::Complex64;
