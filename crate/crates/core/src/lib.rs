//! Probabilistic modeling with plate semantics and stochastic variational
//! inference, built on a small tape-based reverse-mode autodiff engine.
//!
//! Layers of the crate, bottom up:
//! - [`tensor`]: dense f64 tensors, broadcasting, gradient tape.
//! - [`rng`]: seeded, splittable random streams.
//! - [`dist`]: distributions with log-density, sampling, reparameterization.
//! - [`model`]: trace-based model definitions with a `plate` replication
//!   construct, observation binding, and log-joint evaluation.
//! - [`nn`]: dense layers (deterministic and Bayesian) and `Sequential`.
//! - [`svi`]: minibatch ELBO, Adam, the fit loop, posterior queries.

pub mod dist;
pub mod error;
pub mod model;
pub mod nn;
pub mod rng;
pub mod svi;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Gradients, Tape, Tensor};
