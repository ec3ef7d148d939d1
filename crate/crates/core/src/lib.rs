//! Fast solver for 2D Helmholtz scattering from penetrable media via the
//! Lippmann-Schwinger equation.

pub mod aca;
pub mod clock;
pub mod dafmm;
pub mod discretize;
pub mod error;
pub mod grid;
pub mod hodlr;
pub mod krylov;
pub mod nca;
pub mod quad;
pub mod scatter;
pub mod special;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use special::Point2D;
