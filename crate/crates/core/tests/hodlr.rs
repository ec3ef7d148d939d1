use helmscat::hodlr::{Hodlr, HodlrConfig, HodlrMode};
use helmscat::Complex64;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type C = Complex64;

/// Diagonally dominant matrix with smooth, numerically low-rank off-diagonal blocks.
fn smooth_system(n: usize) -> DMatrix<C> {
    let t: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    DMatrix::from_fn(n, n, |i, j| {
        let d = (t[i] - t[j]).abs();
        let base = C::new((-3.0 * d).exp(), 0.5 * (4.0 * (t[i] + t[j])).cos()) / (1.0 + d);
        if i == j {
            base + C::new(n as f64, 1.0)
        } else {
            base
        }
    })
}

fn random_vec(n: usize, seed: u64) -> Vec<C> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| C::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect()
}

fn rel(a: &[C], b: &[C]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    d / b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt()
}

fn direct(eps: f64) -> HodlrConfig {
    HodlrConfig { mode: HodlrMode::DirectEps { eps }, leaf_cluster_size: 32, ..Default::default() }
}

#[test]
fn direct_solve_matches_lu() {
    let a = smooth_system(512);
    let b = random_vec(512, 3);
    let h = Hodlr::new(&a, &direct(1e-12)).unwrap();
    let x = h.solve(&b).unwrap();
    let want: Vec<C> = a.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap().iter().copied().collect();
    assert!(rel(&x, &want) < 1e-9, "error {}", rel(&x, &want));
    assert!(h.stats.levels >= 4);
}

#[test]
fn identity_is_solved_exactly() {
    let a = DMatrix::<C>::identity(300, 300);
    let b = random_vec(300, 5);
    let h = Hodlr::new(&a, &direct(1e-10)).unwrap();
    assert_eq!(h.stats.max_rank, 0);
    let x = h.solve(&b).unwrap();
    assert!(rel(&x, &b) < 1e-15);
}

#[test]
fn apply_inverts_solve() {
    let a = smooth_system(400);
    let h = Hodlr::new(&a, &HodlrConfig { mode: HodlrMode::PrecondRank { rank: 4 }, leaf_cluster_size: 50, ..Default::default() }).unwrap();
    let b = random_vec(400, 9);
    let back = h.apply(&h.solve(&b).unwrap()).unwrap();
    assert!(rel(&back, &b) < 1e-12);
}

#[test]
fn fixed_rank_caps_every_block() {
    let a = smooth_system(512);
    for r in [1, 3, 6] {
        let h = Hodlr::new(&a, &HodlrConfig { mode: HodlrMode::PrecondRank { rank: r }, leaf_cluster_size: 32, ..Default::default() }).unwrap();
        let ranks = h.off_diagonal_ranks();
        assert!(!ranks.is_empty());
        assert!(ranks.iter().all(|&(_, r12, r21)| r12 <= r && r21 <= r));
        assert!(h.stats.max_rank <= r);
    }
}

#[test]
fn compressed_matrix_approximates_original() {
    let a = smooth_system(256);
    let h = Hodlr::new(&a, &direct(1e-10)).unwrap();
    assert!((h.to_dense() - &a).norm() < 1e-9 * a.norm());
}

#[test]
fn bad_inputs_are_rejected() {
    let a = smooth_system(64);
    assert!(Hodlr::new(&a, &HodlrConfig { mode: HodlrMode::PrecondRank { rank: 0 }, ..Default::default() }).is_err());
    let h = Hodlr::new(&a, &direct(1e-10)).unwrap();
    assert!(h.solve(&random_vec(63, 1)).is_err());
    assert!(h.apply(&random_vec(65, 1)).is_err());
    let unfactored = Hodlr::build(&a, &direct(1e-10)).unwrap();
    assert!(unfactored.solve(&random_vec(64, 1)).is_err());
}

#[test]
fn singular_leaf_is_reported() {
    let mut a = smooth_system(128);
    for j in 0..128 {
        a[(5, j)] = C::new(0.0, 0.0);
    }
    assert!(Hodlr::new(&a, &direct(1e-10)).is_err());
}
