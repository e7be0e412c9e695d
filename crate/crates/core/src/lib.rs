//! Normalized Kähler-Ricci flow on S¹-invariant metrics of the Riemann sphere.

// `!(a < b)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bergman;
pub mod entropy;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod green;
pub mod ode;
pub mod parabolic;
pub mod spectral;
pub mod verify;

pub use error::{KrfError, Result};
