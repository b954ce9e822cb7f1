//! Layered energy networks trained through bilevel surrogates.
//!
//! Every layer of a network is the argmin of a convex energy. Training
//! replaces the deep bilevel loss with contrastive or linearized surrogates
//! whose gradients only need local state. Backprop is the infinitesimal-step
//! member of the family.
//!
//! Modules, bottom-up:
//! - [`numeric`]: dense vectors and matrices, seeded RNG, initializers, finite differences.
//! - [`energy`]: activations, conjugate pairs, layer energies and losses.
//! - [`bilevel`]: single-level surrogates, directional-derivative QP, implicit gradients.
//! - [`trainers`]: nested surrogates over deep networks and the training step.
//! - [`data`]: MNIST loading, synthetic data, epoch driver and metrics CSV.

pub mod bilevel;
pub mod data;
pub mod energy;
pub mod error;
pub mod numeric;
pub mod trainers;

pub use error::{Error, Result};
