//! Numerics for fractional-Laplacian type operators and the nonlocal
//! Alt-Caffarelli-Friedman functionals built from them.
//!
//! The crate is organised bottom-up:
//!
//! * [`quadrature`]: graded panel rules, rays, angular rules and tail truncation.
//! * [`constants`]: `C_{n,s}`, the Poisson and gradient normalizations.
//! * [`fields`]: test fields with decay metadata and closed-form oracles.
//! * [`operators`]: pointwise `(-Delta)^s`, `G_u`, `grad^s`, `div^s`, the
//!   nonlocal normal derivative, the s-mean and the Poisson kernel.
//! * [`functionals`]: the monotonicity functionals and the experiments built on them.
//! * [`bochner`]: Bochner-type identities, local limits and moment integrals.

pub mod bochner;
pub mod cache_store;
pub mod constants;
pub mod error;
pub mod fields;
pub mod functionals;
pub mod geometry;
pub mod operators;
pub mod quadrature;

pub use constants::{make_params, FracParams};
pub use error::{Error, Result};
pub use fields::{parse_field, ScalarField, VectorField};
pub use geometry::{Ball, Point};
pub use quadrature::{Estimate, QuadratureSpec, TailEnvelope};

/// Library version recorded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
