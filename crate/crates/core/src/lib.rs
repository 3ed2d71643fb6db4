//! Numerical laboratory for Gaussian random band matrices with variance
//! profile `J = (-W^2 Delta + 1)^{-1}` on a periodic box.

pub mod analytics;
pub mod ensemble;
pub mod error;
pub mod grassmann;
pub mod harness;
pub mod io;
pub mod kernel;
pub mod lattice;
pub mod linalg;
pub mod quadrature;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod susy_dual;

pub use error::{Error, Result};
pub use num_complex::Complex64;
