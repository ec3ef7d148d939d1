//! Bessel functions of order zero and the free-space Helmholtz Green's function in 2D.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2D {
    pub x1: f64,
    pub x2: f64,
}

impl Point2D {
    pub const fn new(x1: f64, x2: f64) -> Self {
        Self { x1, x2 }
    }

    pub fn dist(self, other: Point2D) -> f64 {
        (self.x1 - other.x1).hypot(self.x2 - other.x2)
    }

    pub fn norm(self) -> f64 {
        self.x1.hypot(self.x2)
    }
}

impl std::ops::Add for Point2D {
    type Output = Point2D;
    fn add(self, o: Point2D) -> Point2D {
        Point2D::new(self.x1 + o.x1, self.x2 + o.x2)
    }
}

impl std::ops::Sub for Point2D {
    type Output = Point2D;
    fn sub(self, o: Point2D) -> Point2D {
        Point2D::new(self.x1 - o.x1, self.x2 - o.x2)
    }
}

impl std::ops::Mul<f64> for Point2D {
    type Output = Point2D;
    fn mul(self, s: f64) -> Point2D {
        Point2D::new(self.x1 * s, self.x2 * s)
    }
}

/// J0(x) for finite x ≥ 0.
pub fn bessel_j0(x: f64) -> Result<f64> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::Domain { func: "bessel_j0", value: x });
    }
    Ok(libm::j0(x))
}

/// Y0(x) for finite x > 0.
pub fn bessel_y0(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain { func: "bessel_y0", value: x });
    }
    Ok(libm::y0(x))
}

/// H0^(1)(x) = J0(x) + i Y0(x).
pub fn hankel0_first(x: f64) -> Result<Complex64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain { func: "hankel0_first", value: x });
    }
    Ok(Complex64::new(libm::j0(x), libm::y0(x)))
}

/// (i/4) H0^(1)(κ|x−y|).
pub fn green(kappa: f64, x: Point2D, y: Point2D) -> Result<Complex64> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::Domain { func: "green", value: kappa });
    }
    let r = x.dist(y);
    if r == 0.0 {
        return Err(Error::Singular { x1: x.x1, x2: x.x2 });
    }
    Ok(green_r(kappa * r))
}

/// (i/4) H0^(1)(z) for z > 0, unchecked. Hot path of every kernel evaluation.
#[inline]
pub fn green_r(z: f64) -> Complex64 {
    Complex64::new(-0.25 * libm::y0(z), 0.25 * libm::j0(z))
}

/// Regular part of the Green's function at t·L with the log singularity in t removed:
/// G(κ t L) + (1/2π) J0(κ t L) ln t, returned with J0(κ t L) for reuse.
#[inline]
pub(crate) fn green_log_split(z: f64, ln_t: f64) -> (Complex64, f64) {
    let j0 = libm::j0(z);
    let y0 = libm::y0(z);
    (Complex64::new(-0.25 * y0 + j0 * ln_t / (2.0 * PI), 0.25 * j0), j0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_errors() {
        assert!(bessel_j0(-1.0).is_err());
        assert!(bessel_j0(f64::NAN).is_err());
        assert!(bessel_y0(0.0).is_err());
        assert!(hankel0_first(-2.0).is_err());
        let p = Point2D::new(0.3, 0.1);
        assert!(matches!(green(1.0, p, p), Err(Error::Singular { .. })));
        assert!(green(0.0, p, Point2D::default()).is_err());
    }

    #[test]
    fn split_has_no_log_blowup() {
        // z = κ t L with κ L = 2; the sum stays bounded as t → 0
        let a = green_log_split(2.0 * 1e-12, (1e-12f64).ln()).0;
        let b = green_log_split(2.0 * 1e-10, (1e-10f64).ln()).0;
        assert!((a - b).norm() < 1e-9);
    }
}
