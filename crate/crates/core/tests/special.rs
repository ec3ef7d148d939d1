use std::f64::consts::PI;

use helmscat::special::{bessel_j0, bessel_y0, green, hankel0_first};
use helmscat::{Complex64, Point2D};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Ascending series for J0 and Y0.
fn series(x: f64) -> (f64, f64) {
    let q = -0.25 * x * x;
    let (mut term, mut j0, mut h, mut ysum) = (1.0, 1.0, 0.0, 0.0);
    for k in 1..80 {
        term *= q / (k * k) as f64;
        h += 1.0 / k as f64;
        j0 += term;
        ysum += term * h;
    }
    let y0 = 2.0 / PI * ((0.5 * x).ln() + EULER_GAMMA) * j0 - 2.0 / PI * ysum;
    (j0, y0)
}

/// Hankel asymptotic expansion for large x.
fn asymptotic(x: f64) -> (f64, f64) {
    let mut a = vec![1.0];
    for k in 1..16 {
        let m = (2 * k - 1) as f64;
        a.push(a[k - 1] * (-m * m) / (k as f64 * 8.0));
    }
    let (mut p, mut q) = (0.0, 0.0);
    for (k, ak) in a.iter().enumerate() {
        let t = ak / x.powi(k as i32);
        let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
        if k % 2 == 0 {
            p += sign * t;
        } else {
            q += sign * t;
        }
    }
    let chi = x - 0.25 * PI;
    let s = (2.0 / (PI * x)).sqrt();
    (s * (p * chi.cos() - q * chi.sin()), s * (p * chi.sin() + q * chi.cos()))
}

#[test]
fn small_argument_matches_series() {
    for k in 1..=400 {
        let x = 0.025 * k as f64;
        let (j, y) = series(x);
        assert!((bessel_j0(x).unwrap() - j).abs() < 1e-12, "J0({x})");
        assert!((bessel_y0(x).unwrap() - y).abs() < 1e-12, "Y0({x})");
    }
}

#[test]
fn large_argument_matches_asymptotic() {
    for k in 0..=200 {
        let x = 40.0 + 1.7 * k as f64;
        let (j, y) = asymptotic(x);
        assert!((bessel_j0(x).unwrap() - j).abs() < 1e-13, "J0({x})");
        assert!((bessel_y0(x).unwrap() - y).abs() < 1e-13, "Y0({x})");
    }
}

#[test]
fn hankel_combines_j0_and_y0() {
    let x = 3.7;
    let h = hankel0_first(x).unwrap();
    assert_eq!(h, Complex64::new(bessel_j0(x).unwrap(), bessel_y0(x).unwrap()));
}

#[test]
fn green_is_symmetric_and_scaled() {
    let (a, b) = (Point2D::new(0.1, -0.3), Point2D::new(0.7, 0.2));
    let g = green(12.0, a, b).unwrap();
    assert_eq!(g, green(12.0, b, a).unwrap());
    let h = hankel0_first(12.0 * a.dist(b)).unwrap();
    assert!((g - Complex64::new(0.0, 0.25) * h).norm() < 1e-16);
}

#[test]
fn invalid_arguments_are_errors() {
    assert!(bessel_y0(-1.0).is_err());
    assert!(bessel_j0(f64::INFINITY).is_err());
    assert!(hankel0_first(0.0).is_err());
    let p = Point2D::new(0.0, 0.0);
    assert!(green(5.0, p, p).is_err());
    assert!(green(-1.0, p, Point2D::new(1.0, 0.0)).is_err());
}
