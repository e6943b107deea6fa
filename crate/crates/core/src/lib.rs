//! Tokens on the unit sphere driven by self-attention, and the action
//! functionals, variational residuals and measure-level diagnostics built
//! on top of their trajectories.

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod functionals;
pub mod linalg;
pub mod measures;
pub mod path;
pub mod sphere;
pub mod variational;

pub use error::{Error, Result};

/// Round-trip float format used by every CSV writer (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
