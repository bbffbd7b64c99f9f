//! Numerics for controlled linear stochastic Volterra integral equations with
//! singular non-convolution kernels: forward simulation under causal feedback,
//! the associated backward (adjoint) equation, the quadratic Lyapunov-Volterra
//! system, and Monte Carlo cross-checks.

pub mod ebsvie;
pub mod error;
pub mod expr;
pub mod fields;
pub mod forward;
pub mod grid;
pub mod instances;
pub mod kernels;
pub mod lyapunov;
pub mod montecarlo;
pub mod norms;
pub mod pi;

pub use error::{Result, SvieError};
