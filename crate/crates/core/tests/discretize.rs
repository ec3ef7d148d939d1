use std::f64::consts::PI;
use std::sync::Arc;

use helmscat::discretize::{interp_matrix, KernelMatrix, KernelMode};
use helmscat::grid::{build_tree, uniform_tree, Tree, TreeConfig};
use helmscat::quad::gauss_legendre_on;
use helmscat::special::green;
use helmscat::{Complex64, Point2D};
use nalgebra::DMatrix;

type C = Complex64;

fn density(x: Point2D) -> f64 {
    1.0 + x.x1 - 2.0 * x.x1 * x.x2 + x.x2.powi(3)
}

/// ∫ over the square of G(κ|x−y|) ψ(y) dy by polar quadrature about x (x inside).
fn polar_oracle(kappa: f64, center: Point2D, h: f64, x: Point2D, psi: impl Fn(Point2D) -> f64) -> C {
    let corners = [
        Point2D::new(center.x1 - h, center.x2 - h),
        Point2D::new(center.x1 + h, center.x2 - h),
        Point2D::new(center.x1 + h, center.x2 + h),
        Point2D::new(center.x1 - h, center.x2 + h),
    ];
    let mut total = C::new(0.0, 0.0);
    for k in 0..4 {
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        let ta = (a.x2 - x.x2).atan2(a.x1 - x.x1);
        let mut tb = (b.x2 - x.x2).atan2(b.x1 - x.x1);
        while tb < ta {
            tb += 2.0 * PI;
        }
        // edge line: outward normal n, distance d
        let e = Point2D::new(b.x1 - a.x1, b.x2 - a.x2);
        let len = e.norm();
        let n = Point2D::new(e.x2 / len, -e.x1 / len);
        let d = (a.x1 - x.x1) * n.x1 + (a.x2 - x.x2) * n.x2;
        let tn = n.x2.atan2(n.x1);
        let panels = 32;
        for p in 0..panels {
            let lo = ta + (tb - ta) * p as f64 / panels as f64;
            let hi = ta + (tb - ta) * (p + 1) as f64 / panels as f64;
            let (tt, tw) = gauss_legendre_on(24, lo, hi);
            for (&th, &wt) in tt.iter().zip(&tw) {
                let r_max = d / (th - tn).cos();
                let (us, uw) = gauss_legendre_on(48, 0.0, 1.0);
                for (&u, &w) in us.iter().zip(&uw) {
                    let r = r_max * u * u;
                    let y = Point2D::new(x.x1 + r * th.cos(), x.x2 + r * th.sin());
                    let g = green(kappa, x, y).unwrap();
                    total += g * psi(y) * r * 2.0 * r_max * u * w * wt;
                }
            }
        }
    }
    total
}

fn kernel(tree: Tree, kappa: f64, mode: KernelMode, q: &[f64]) -> KernelMatrix {
    KernelMatrix::new(Arc::new(tree), kappa, mode, q, 1e-12).unwrap()
}

#[test]
fn potential_of_polynomial_matches_polar_quadrature() {
    let kappa = 20.0;
    let tree = uniform_tree(TreeConfig { p: 6, kappa, ..Default::default() }, 1).unwrap();
    let km = kernel(tree, kappa, KernelMode::Potential, &[]);
    let n = km.n();
    let psi: Vec<C> = km.tree.points.iter().map(|&x| C::new(density(x), 0.0)).collect();
    let all: Vec<usize> = (0..n).collect();
    for i in [0, 7, 40, 71, 100, n - 1] {
        let row = km.block_raw(&[i], &all);
        let got: C = row.iter().zip(&psi).map(|(a, b)| a * b).sum();
        let want = polar_oracle(kappa, Point2D::new(0.0, 0.0), 0.5, km.tree.points[i], density);
        assert!((got - want).norm() <= 1e-9 * want.norm(), "row {i}: {got} vs {want}");
    }
}

#[test]
fn potential_at_off_grid_point_matches_polar_quadrature() {
    let kappa = 15.0;
    let tree = uniform_tree(TreeConfig { p: 6, kappa, ..Default::default() }, 2).unwrap();
    let km = kernel(tree, kappa, KernelMode::Potential, &[]);
    let psi: Vec<C> = km.tree.points.iter().map(|&x| C::new(0.0, density(x))).collect();
    for x in [Point2D::new(0.123, -0.311), Point2D::new(0.25, 0.25), Point2D::new(-0.49, 0.02)] {
        let got = km.volume_potential_at(x, &psi);
        let want = C::new(0.0, 1.0) * polar_oracle(kappa, Point2D::new(0.0, 0.0), 0.5, x, density);
        assert!((got - want).norm() <= 1e-9 * want.norm(), "{x:?}: {got} vs {want}");
    }
}

#[test]
fn operator_entries_scale_the_potential() {
    let kappa = 30.0;
    let cfg = TreeConfig { p: 5, kappa, eps_grid: 1e-4, ..Default::default() };
    let q = |x: Point2D| 1.5 * (-160.0 * (x.x1 * x.x1 + x.x2 * x.x2)).exp();
    let tree = build_tree(&cfg, &q, &|_| C::new(1.0, 0.0)).unwrap();
    let qv: Vec<f64> = tree.points.iter().map(|&x| q(x)).collect();
    let op = kernel(tree.clone(), kappa, KernelMode::Operator, &qv);
    let pot = kernel(tree, kappa, KernelMode::Potential, &[]);
    let n = op.n();
    for &(i, j) in &[(0, 0), (3, 3), (5, 90), (n / 2, n / 2), (n / 2, 1), (n - 1, 0)] {
        let want = if i == j { 1.0 } else { 0.0 } + kappa * kappa * qv[i] * pot.entry(i, j);
        assert!((op.entry(i, j) - want).norm() < 1e-13 * want.norm().max(1.0));
    }
}

#[test]
fn point_mode_is_the_green_function_with_zero_diagonal() {
    let kappa = 25.0;
    let tree = uniform_tree(TreeConfig { p: 4, kappa, ..Default::default() }, 2).unwrap();
    let km = kernel(tree, kappa, KernelMode::Point, &[]);
    let pts = &km.tree.points;
    for &(i, j) in &[(0, 0), (0, 1), (2, 200), (100, 17), (255, 31)] {
        let want = if i == j { C::new(0.0, 0.0) } else { green(kappa, pts[i], pts[j]).unwrap() };
        assert!((km.entry(i, j) - want).norm() < 1e-14);
    }
}

#[test]
fn class_cache_is_transparent() {
    let kappa = 40.0;
    let cfg = TreeConfig { p: 5, kappa, eps_grid: 1e-5, ..Default::default() };
    let q = |x: Point2D| 1.5 * (-160.0 * (x.x1 * x.x1 + x.x2 * x.x2)).exp();
    let tree = build_tree(&cfg, &q, &|_| C::new(1.0, 0.0)).unwrap();
    let qv: Vec<f64> = tree.points.iter().map(|&x| q(x)).collect();
    let km = kernel(tree, kappa, KernelMode::Operator, &qv);
    let p2 = km.p2();
    for (a, near) in km.tree.near.iter().enumerate().step_by(3) {
        for &b in near {
            let lb = km.tree.boxes[b].leaf_index.unwrap();
            for (s, t) in [(0, 0), (p2 - 1, 3), (7, p2 / 2)] {
                let (i, j) = (a * p2 + s, lb * p2 + t);
                assert_eq!(km.entry(i, j), km.entry_uncached(i, j), "near pair ({i}, {j})");
            }
        }
    }
    let n = km.n();
    for &(i, j) in &[(0, n - 1), (n - 1, 0), (10, n / 2 + 3)] {
        let (c, u) = (km.entry(i, j), km.entry_uncached(i, j));
        assert!((c - u).norm() <= 1e-13 * c.norm());
    }
    // every near pair of a uniform tree falls in one of a handful of classes
    let tree = uniform_tree(TreeConfig { p: 4, kappa: 10.0, ..Default::default() }, 4).unwrap();
    let km = kernel(tree, 10.0, KernelMode::Potential, &[]);
    assert_eq!(km.class_count(), 9);
}

#[test]
fn pseudo_inverse_is_a_left_inverse() {
    for p in 2..=9 {
        let op = interp_matrix(p).unwrap();
        let np = p * (p + 1) / 2;
        let eye = &op.qpinv * &op.q;
        assert!((eye - DMatrix::<f64>::identity(np, np)).norm() < 1e-12, "p = {p}");
        let proj = &op.q * &op.qpinv;
        assert!((&proj * &proj - &proj).norm() < 1e-12);
    }
}

#[test]
fn dense_dump_is_row_major_complex_pairs() {
    let tree = uniform_tree(TreeConfig { p: 3, kappa: 5.0, ..Default::default() }, 1).unwrap();
    let km = kernel(tree, 5.0, KernelMode::Potential, &[]);
    let dir = std::env::temp_dir().join(format!("helmscat-dense-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("a.bin");
    km.dump_dense(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let n = km.n();
    assert_eq!(bytes.len(), n * n * 16);
    let read = |k: usize| f64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
    let (i, j) = (5, 30);
    let o = 2 * (i * n + j);
    assert_eq!(C::new(read(o), read(o + 1)), km.entry(i, j));
    std::fs::remove_dir_all(&dir).unwrap();
}
