//! Probabilistic safety certificates for discrete stochastic systems whose
//! logged data was confounded by a latent variable.
//!
//! The crate covers the whole pipeline: ground-truth models and their
//! offline/online transition statistics ([`model`], [`env`]), exact long-term
//! safe probabilities ([`oracle`]), offline data generation and conversion to
//! the absorbing process ([`data`]), front-door fitted-Q estimation
//! ([`causal_q`]), the Q-margin certificate and a barrier-function baseline
//! ([`certificate`]), and the Monte Carlo / exact evaluation harness
//! ([`eval`]) driven by [`runner`].

pub mod causal_q;
pub mod certificate;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod runner;
pub mod tables;

pub use error::{Error, Result};
pub use model::{AugmentedState, ConfoundedMdpModel, MediatorModel, VisibleKernel};
pub use policy::TabularPolicy;
