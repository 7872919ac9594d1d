//! Seedable simulation and learning toolkit for cascaded channel estimation
//! through a reconfigurable reflecting surface.
//!
//! The crate models the two-hop link user -> reflecting surface -> receiver,
//! simulates the pilot protocol that observes the cascaded channel, provides
//! classical least-squares and linear-MMSE estimators as baselines, and trains
//! a small convolutional denoiser (hand-rolled layers with exact analytic
//! gradients) that cleans up the least-squares estimate. An analytic
//! complexity model and a CLI experiment harness round out the toolkit.
//!
//! Everything stochastic is keyed by `(seed, domain, index)` counter streams,
//! so runs are bit-reproducible regardless of worker scheduling.

pub mod channel;
pub mod complexity;
pub mod config;
pub mod correlation;
pub mod denoiser;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod patching;
pub mod pilots;
pub mod rng;

pub use error::{Error, Result};
