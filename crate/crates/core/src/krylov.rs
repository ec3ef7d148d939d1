//! GMRES with modified Gram-Schmidt Arnoldi, Givens rotations and optional left
//! preconditioning.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::Result;

type C64 = Complex64;

/// Linear operator callback.
pub type Operator<'a> = dyn Fn(&[C64]) -> Result<Vec<C64>> + Sync + 'a;

#[derive(Debug, Clone)]
pub struct GmresConfig {
    /// Stop when ‖b − A x‖/‖b‖ ≤ eps.
    pub eps: f64,
    pub max_iters: usize,
    /// Restart length; `None` runs full GMRES.
    pub restart: Option<usize>,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self { eps: 1e-10, max_iters: 400, restart: None }
    }
}

/// Relative residuals of the unpreconditioned system, one per iteration plus the initial one.
#[derive(Debug, Clone, Default, Serialize)]
pub struct History {
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// ‖b − A x‖/‖b‖ recomputed with an explicit product at exit.
    pub final_residual: f64,
    /// Arnoldi breakdown with a nonzero residual.
    pub stagnated: bool,
}

impl History {
    /// Writes `iteration,residual` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iteration,residual")?;
        for (i, r) in self.residuals.iter().enumerate() {
            writeln!(f, "{i},{r:.17e}")?;
        }
        f.flush()?;
        Ok(())
    }
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn axpy(alpha: C64, x: &[C64], y: &mut [C64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Complex Givens rotation zeroing b in (a, b).
fn givens(a: C64, b: C64) -> (f64, C64) {
    let (na, nb) = (a.norm(), b.norm());
    if nb == 0.0 {
        return (1.0, C64::new(0.0, 0.0));
    }
    if na == 0.0 {
        return (0.0, C64::new(1.0, 0.0));
    }
    let r = na.hypot(nb);
    let c = na / r;
    let s = (a / na) * b.conj() / r;
    (c, s)
}

fn back_substitute(h: &[Vec<C64>], g: &[C64], k: usize) -> Vec<C64> {
    let mut y = vec![C64::new(0.0, 0.0); k];
    for i in (0..k).rev() {
        let mut s = g[i];
        for j in i + 1..k {
            s -= h[j][i] * y[j];
        }
        y[i] = s / h[i][i];
    }
    y
}

fn residual(a: &Operator, b: &[C64], x: &[C64], bnorm: f64) -> Result<f64> {
    let ax = a(x)?;
    let r: Vec<C64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    Ok(norm(&r) / bnorm)
}

/// Solves A x = b from a zero initial guess. With `precond` = M⁻¹ the iteration runs on
/// M⁻¹A x = M⁻¹b, while convergence and the history use the true residual.
pub fn gmres(a: &Operator, b: &[C64], cfg: &GmresConfig, precond: Option<&Operator>) -> Result<(Vec<C64>, History)> {
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![C64::new(0.0, 0.0); n];
    let mut hist = History { residuals: vec![1.0], ..Default::default() };
    if bnorm == 0.0 {
        hist.residuals = vec![0.0];
        hist.converged = true;
        return Ok((x, hist));
    }
    let restart = cfg.restart.unwrap_or(cfg.max_iters).max(1);
    let apply_m = |v: Vec<C64>| -> Result<Vec<C64>> {
        match precond {
            Some(m) => m(&v),
            None => Ok(v),
        }
    };
    let mut true_r: Vec<C64> = b.to_vec();
    let mut total = 0usize;
    'outer: while total < cfg.max_iters {
        let z = apply_m(true_r.clone())?;
        let beta = norm(&z);
        if beta == 0.0 {
            break;
        }
        let mut vs: Vec<Vec<C64>> = vec![z.iter().map(|v| v / beta).collect()];
        // A v_j, kept to track the true residual without extra products
        let mut avs: Vec<Vec<C64>> = Vec::new();
        let mut h: Vec<Vec<C64>> = Vec::new();
        let mut cs: Vec<(f64, C64)> = Vec::new();
        let mut g = vec![C64::new(beta, 0.0)];
        let x0 = x.clone();
        let r0 = true_r.clone();
        let mut k = 0;
        while k < restart && total < cfg.max_iters {
            let av = a(&vs[k])?;
            let mut w = apply_m(av.clone())?;
            if precond.is_some() {
                avs.push(av);
            }
            let wnorm0 = norm(&w);
            let mut col = vec![C64::new(0.0, 0.0); k + 2];
            for (j, v) in vs.iter().enumerate() {
                let hj = dot(v, &w);
                col[j] = hj;
                axpy(-hj, v, &mut w);
            }
            let hn = norm(&w);
            col[k + 1] = C64::new(hn, 0.0);
            for (j, &(c, s)) in cs.iter().enumerate() {
                let (a0, a1) = (col[j], col[j + 1]);
                col[j] = a0 * c + s * a1;
                col[j + 1] = -s.conj() * a0 + a1 * c;
            }
            let (c, s) = givens(col[k], col[k + 1]);
            let (a0, a1) = (col[k], col[k + 1]);
            col[k] = a0 * c + s * a1;
            col[k + 1] = C64::new(0.0, 0.0);
            debug_assert!((-s.conj() * a0 + a1 * c).norm() <= 1e-10 * (a0.norm() + a1.norm()) + 1e-300);
            cs.push((c, s));
            let gk = g[k];
            g[k] = gk * c;
            g.push(-s.conj() * gk);
            h.push(col);
            k += 1;
            total += 1;

            let breakdown = hn <= 1e-14 * wnorm0.max(1e-300);
            let y_now = |k: usize| back_substitute(&h, &g, k);
            let est = if precond.is_some() {
                let y = y_now(k);
                let mut r = r0.clone();
                for (yj, avj) in y.iter().zip(&avs) {
                    axpy(-yj, avj, &mut r);
                }
                norm(&r) / bnorm
            } else {
                g[k].norm() / bnorm
            };
            hist.residuals.push(est);
            if est <= cfg.eps || breakdown {
                let y = y_now(k);
                let mut xc = x0.clone();
                for (yj, v) in y.iter().zip(&vs) {
                    axpy(*yj, v, &mut xc);
                }
                let tr = residual(a, b, &xc, bnorm)?;
                if tr <= cfg.eps {
                    x = xc;
                    hist.converged = true;
                    break 'outer;
                }
                if breakdown {
                    x = xc;
                    hist.stagnated = true;
                    break 'outer;
                }
            }
            if k < restart {
                vs.push(w.iter().map(|v| v / hn).collect());
            }
        }
        // restart (or budget exhausted): form the iterate
        let y = back_substitute(&h, &g, k);
        for (yj, v) in y.iter().zip(&vs) {
            axpy(*yj, v, &mut x);
        }
        let ax = a(&x)?;
        true_r = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    }
    hist.iterations = hist.residuals.len() - 1;
    hist.final_residual = residual(a, b, &x, bnorm)?;
    if let Some(last) = hist.residuals.last_mut() {
        *last = hist.final_residual;
    }
    hist.converged = hist.final_residual <= cfg.eps;
    Ok((x, hist))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_converges_in_one_step() {
        let b: Vec<C64> = (0..10).map(|i| C64::new(i as f64, 1.0)).collect();
        let id = |v: &[C64]| -> Result<Vec<C64>> { Ok(v.to_vec()) };
        let (x, h) = gmres(&id, &b, &GmresConfig::default(), None).unwrap();
        assert_eq!(h.iterations, 1);
        assert!(h.converged);
        for (xi, bi) in x.iter().zip(&b) {
            assert!((xi - bi).norm() < 1e-14);
        }
    }

    #[test]
    fn zero_rhs() {
        let id = |v: &[C64]| -> Result<Vec<C64>> { Ok(v.to_vec()) };
        let (x, h) = gmres(&id, &[C64::new(0.0, 0.0); 4], &GmresConfig::default(), None).unwrap();
        assert!(h.converged && h.iterations == 0);
        assert!(x.iter().all(|v| v.norm() == 0.0));
    }
}
