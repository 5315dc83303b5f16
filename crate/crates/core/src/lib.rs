//! Delay-embedded Koopman model reduction with integrated state estimation,
//! and model predictive control on the reduced models.
//!
//! The pipeline: simulate an input-affine plant ([`dynamics`]), cut the
//! record into delay-embedded training windows ([`sampling`]), train an
//! encoder / linear latent dynamics / decoder model ([`model`],
//! [`training`]), and close the loop with receding-horizon control on the
//! reduced model ([`mpc`], [`closedloop`]). [`config`] and [`pipeline`]
//! drive the stages from a single run configuration.

pub mod closedloop;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod mpc;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
