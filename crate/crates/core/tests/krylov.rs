use helmscat::krylov::{gmres, GmresConfig};
use helmscat::{Complex64, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type C = Complex64;

fn system(n: usize, seed: u64) -> (DMatrix<C>, Vec<C>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::from_fn(n, n, |_, _| C::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) / (n as f64).sqrt());
    for i in 0..n {
        a[(i, i)] += C::new(2.0, 0.5);
    }
    let b = (0..n).map(|_| C::new(rng.gen::<f64>(), rng.gen::<f64>() - 0.5)).collect();
    (a, b)
}

fn mul(a: &DMatrix<C>, x: &[C]) -> Result<Vec<C>> {
    Ok((a * DVector::from_column_slice(x)).iter().copied().collect())
}

fn norm(v: &[C]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

#[test]
fn matches_lu_on_dense_system() {
    let (a, b) = system(200, 1);
    let op = |x: &[C]| mul(&a, x);
    let (x, h) = gmres(&op, &b, &GmresConfig { eps: 1e-12, ..Default::default() }, None).unwrap();
    assert!(h.converged);
    let want = a.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
    let err = (DVector::from_column_slice(&x) - &want).norm() / want.norm();
    assert!(err < 1e-8, "error {err}");
}

#[test]
fn full_gmres_history_is_non_increasing() {
    let (a, b) = system(150, 2);
    let op = |x: &[C]| mul(&a, x);
    let (_, h) = gmres(&op, &b, &GmresConfig { eps: 1e-13, ..Default::default() }, None).unwrap();
    assert_eq!(h.residuals.len(), h.iterations + 1);
    assert!((h.residuals[0] - 1.0).abs() < 1e-15);
    for w in h.residuals.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} > {}", w[1], w[0]);
    }
}

#[test]
fn exit_residual_is_the_true_residual() {
    let (a, b) = system(120, 3);
    let op = |x: &[C]| mul(&a, x);
    let (x, h) = gmres(&op, &b, &GmresConfig { eps: 1e-10, ..Default::default() }, None).unwrap();
    let r: Vec<C> = mul(&a, &x).unwrap().iter().zip(&b).map(|(u, v)| v - u).collect();
    let true_res = norm(&r) / norm(&b);
    assert!((h.final_residual - true_res).abs() <= 1e-12);
    assert_eq!(*h.residuals.last().unwrap(), h.final_residual);
}

#[test]
fn identity_converges_in_one_iteration() {
    let (_, b) = system(50, 4);
    let op = |x: &[C]| Ok(x.to_vec());
    let (x, h) = gmres(&op, &b, &GmresConfig::default(), None).unwrap();
    assert_eq!(h.iterations, 1);
    assert!(h.converged);
    assert!(norm(&x.iter().zip(&b).map(|(u, v)| u - v).collect::<Vec<_>>()) < 1e-14 * norm(&b));
}

#[test]
fn exact_inverse_preconditioner_needs_at_most_two_iterations() {
    let (a, b) = system(100, 5);
    let lu = a.clone().lu();
    let op = |x: &[C]| mul(&a, x);
    let pre = |x: &[C]| Ok(lu.solve(&DVector::from_column_slice(x)).unwrap().iter().copied().collect());
    let (_, h) = gmres(&op, &b, &GmresConfig { eps: 1e-10, ..Default::default() }, Some(&pre)).unwrap();
    assert!(h.converged);
    assert!(h.iterations <= 2, "{} iterations", h.iterations);
}

#[test]
fn restarted_gmres_converges_and_reports_failure_honestly() {
    let (a, b) = system(200, 6);
    let op = |x: &[C]| mul(&a, x);
    let (_, h) = gmres(&op, &b, &GmresConfig { eps: 1e-10, max_iters: 400, restart: Some(10) }, None).unwrap();
    assert!(h.converged);
    assert!(h.final_residual <= 1e-10);
    let (_, h) = gmres(&op, &b, &GmresConfig { eps: 1e-14, max_iters: 3, restart: None }, None).unwrap();
    assert!(!h.converged);
    assert_eq!(h.iterations, 3);
}

#[test]
fn zero_rhs_gives_zero_solution() {
    let (a, _) = system(30, 7);
    let op = |x: &[C]| mul(&a, x);
    let (x, h) = gmres(&op, &vec![C::new(0.0, 0.0); 30], &GmresConfig::default(), None).unwrap();
    assert!(x.iter().all(|v| *v == C::new(0.0, 0.0)));
    assert!(h.converged);
    assert_eq!(h.iterations, 0);
}

#[test]
fn history_csv_has_one_row_per_residual() {
    let (a, b) = system(40, 8);
    let op = |x: &[C]| mul(&a, x);
    let (_, h) = gmres(&op, &b, &GmresConfig::default(), None).unwrap();
    let path = std::env::temp_dir().join(format!("helmscat-conv-{}.csv", std::process::id()));
    h.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iteration,residual"));
    assert_eq!(lines.count(), h.residuals.len());
    std::fs::remove_file(&path).unwrap();
}
