//! Bidirectional normalizing flows at desk scale.
//!
//! The crate has three legs:
//!
//! - a forward flow of stacked autoregressive affine blocks trained by exact
//!   maximum likelihood ([`flow`]),
//! - its exact sequential inverse with score-based denoising and
//!   classifier-free guidance ([`inverse`]),
//! - a learned feedforward reverse model that approximates that inverse in a
//!   single evaluation ([`reverse`]),
//!
//! plus the synthetic datasets and metrics used to compare them ([`data`],
//! [`eval`]), training-free editing ([`edit`]), and config/checkpoint
//! plumbing ([`io`]). All numeric code runs at 32- or 64-bit through the
//! same generic path ([`numerics`]).

pub mod error;
pub mod numerics;

pub mod data;
pub mod edit;
pub mod eval;
pub mod inverse;
pub mod reverse;
pub mod flow;
pub mod io;

pub use error::{Error, Result};
pub use numerics::{DenseArray, Real, Rng, Tape};
