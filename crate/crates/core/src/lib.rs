//! Measure estimation in the barycentric coding model.
//!
//! Given reference measures `μ₁, …, μₚ` and a query `μ₀`, find simplex
//! coordinates `λ` whose Wasserstein-2 barycenter best matches the query.

pub mod bcm;
pub mod classify;
pub mod cli;
pub mod config;
pub mod error;
pub mod estimate;
pub mod experiments;
pub mod formats;
pub mod gaussian;
mod linalg;
pub mod measures;
pub mod ot;
pub mod spd;
pub mod synthesis;

pub use error::{BcmError, Result};
