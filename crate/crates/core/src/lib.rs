//! Value-distribution densities ("M-functions") for the m-th derivative of
//! the logarithmic derivative of Dirichlet L-functions.
//!
//! Every density is built from finite Euler products: a set of prime sites,
//! a local g-function per site, and the uniform measure on the torus of
//! circle variables. The crate constructs the resulting densities several
//! independent ways so they can be checked against each other.

pub mod characters;
pub mod density;
pub mod error;
pub mod injectivity;
pub mod localgf;
pub mod primesys;
pub mod torus;

pub use error::{Error, Result};
