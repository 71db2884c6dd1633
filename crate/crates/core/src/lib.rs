//! Core of the BRO agent: regularized residual critics, quantile value
//! estimates, a pessimistic/optimistic actor pair, and the small control
//! problems used to check all of it against closed-form answers.
//!
//! Everything numeric is generic over [`Real`] so the same code runs in `f32`
//! for training and in `f64` for exact checks.

pub mod agent;
pub mod distributional;
pub mod envsim;
mod error;
pub mod networks;
pub mod optim;
pub mod policy;
pub mod replay;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;
