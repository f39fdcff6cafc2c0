//! Estimation toolkit for a three-compartment viral dynamics model.
//!
//! The model tracks uninfected target cells, infected cells and free virus:
//!
//! ```text
//! dT_u/dt = lambda - rho * T_u - eta(t) * T_u * V
//! dT_i/dt = eta(t) * T_u * V - delta * T_i
//! dV/dt   = N * delta * T_i - c * V
//! ```
//!
//! with observed total cell count `T_u + T_i` and viral load `V`. The crate
//! provides two estimators for the constant parameters and the time-varying
//! infection rate `eta(t)`, plus the machinery they stand on:
//!
//! - [`mssb`]: a multi-stage smoothing-based estimator that needs no ODE
//!   solving (local polynomial smoothing, then two linear least squares
//!   stages with `eta` expanded in a B-spline basis);
//! - [`snls`]: spline-enhanced nonlinear least squares, integrating the ODE
//!   inside the objective and searching with a global/local hybrid optimizer,
//!   warm-started from the smoothing estimate;
//! - [`simlab`]: simulation studies that score both estimators against a
//!   known truth over replicated noisy data sets.

pub mod bspline;
pub mod data;
pub mod error;
pub mod hiv;
pub mod mssb;
pub mod optim;
pub mod param;
pub mod smoothing;
pub mod snls;
pub mod util;

pub use error::{Error, Result};
