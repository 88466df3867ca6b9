//! Gaussian sum filtering for linear systems driven by Gaussian-mixture noise,
//! together with analytic lower and upper bounds on the MMSE and a Monte Carlo
//! harness that checks them.

pub mod bounds;
pub mod error;
pub mod filters;
pub mod gm;
pub mod numeric;
pub mod quad;
pub mod sim;

pub use error::{Error, Result};
