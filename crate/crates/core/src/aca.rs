//! Partially pivoted adaptive cross approximation.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::discretize::{ColGroups, KernelMatrix, KernelMode};

type C64 = Complex64;

/// Row and column access to a sub-block A[rows, cols], addressed by position.
pub trait CrossSource {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn row(&mut self, i: usize) -> Vec<C64>;
    fn col(&mut self, j: usize) -> Vec<C64>;
}

/// Dense matrix as a cross source.
pub struct DenseCross<'a>(pub &'a DMatrix<C64>);

impl CrossSource for DenseCross<'_> {
    fn nrows(&self) -> usize {
        self.0.nrows()
    }
    fn ncols(&self) -> usize {
        self.0.ncols()
    }
    fn row(&mut self, i: usize) -> Vec<C64> {
        self.0.row(i).iter().copied().collect()
    }
    fn col(&mut self, j: usize) -> Vec<C64> {
        self.0.column(j).iter().copied().collect()
    }
}

/// Sub-block of the unscaled kernel K, or of A itself when built with `scaled`. Columns
/// are fetched per source leaf and cached, since a full leaf of weights costs about as
/// much as a single one.
pub struct KernelCross<'a> {
    km: &'a KernelMatrix,
    scaled: bool,
    rows: &'a [usize],
    groups: ColGroups,
    col_leaf: Vec<(usize, usize)>,
    cache: HashMap<usize, Vec<C64>>,
    cached_bytes: usize,
}

const CACHE_LIMIT: usize = 64 << 20;

/// Crosses contributing less than this fraction of ‖Ã‖_F are rounding noise.
pub const ROUNDOFF: f64 = 1e-13;

/// A residual row below this fraction of the raw row has cancelled to rounding level:
/// the row is already represented and a cross on it would divide by noise.
pub const ROW_CANCELLATION: f64 = 1e-12;

/// Consecutive represented rows after which the approximation is taken as converged.
pub const MAX_REPRESENTED_ROWS: usize = 8;

impl<'a> KernelCross<'a> {
    pub fn new(km: &'a KernelMatrix, rows: &'a [usize], cols: &'a [usize]) -> Self {
        let groups = km.group_cols(cols);
        let col_leaf = cols
            .iter()
            .map(|&j| {
                let leaf = km.tree.point_leaf[j] as usize;
                (leaf, j - km.tree.boxes[km.tree.leaves[leaf]].range.start)
            })
            .collect();
        Self { km, scaled: false, rows, groups, col_leaf, cache: HashMap::new(), cached_bytes: 0 }
    }

    /// Entries of A = I + diag(rowscale)·K rather than K.
    pub fn scaled(km: &'a KernelMatrix, rows: &'a [usize], cols: &'a [usize]) -> Self {
        Self { scaled: true, ..Self::new(km, rows, cols) }
    }

    fn finish(&self, i: usize, j: usize, k: C64) -> C64 {
        if !self.scaled {
            return k;
        }
        let v = k * self.km.rowscale[i];
        if self.km.mode == KernelMode::Operator && i == j {
            v + 1.0
        } else {
            v
        }
    }
}

impl CrossSource for KernelCross<'_> {
    fn nrows(&self) -> usize {
        self.rows.len()
    }
    fn ncols(&self) -> usize {
        self.groups.cols.len()
    }
    fn row(&mut self, i: usize) -> Vec<C64> {
        let gi = self.rows[i];
        let mut out = vec![C64::new(0.0, 0.0); self.groups.cols.len()];
        if self.scaled && self.km.rowscale[gi] == 0.0 {
            // only the identity survives
            if self.km.mode == KernelMode::Operator {
                if let Some(q) = self.groups.cols.iter().position(|&j| j == gi) {
                    out[q] = C64::new(1.0, 0.0);
                }
            }
            return out;
        }
        if self.scaled {
            self.km.row_into(gi, &self.groups, &mut out);
        } else {
            self.km.row_raw_into(gi, &self.groups, &mut out);
        }
        out
    }
    fn col(&mut self, j: usize) -> Vec<C64> {
        let gj = self.groups.cols[j];
        if self.km.mode == KernelMode::Point {
            let g = self.km.group_cols(&[gj]);
            let mut out = vec![C64::new(0.0, 0.0); 1];
            return self
                .rows
                .iter()
                .map(|&i| {
                    self.km.row_raw_into(i, &g, &mut out);
                    self.finish(i, gj, out[0])
                })
                .collect();
        }
        let (leaf, b) = self.col_leaf[j];
        let p2 = self.km.p2();
        if !self.cache.contains_key(&leaf) {
            let start = self.km.tree.boxes[self.km.tree.leaves[leaf]].range.start;
            let all: Vec<usize> = (start..start + p2).collect();
            let g = self.km.group_cols(&all);
            let mut data = vec![C64::new(0.0, 0.0); self.rows.len() * p2];
            for (r, &i) in self.rows.iter().enumerate() {
                self.km.row_raw_into(i, &g, &mut data[r * p2..(r + 1) * p2]);
            }
            let bytes = data.len() * 16;
            if self.cached_bytes + bytes > CACHE_LIMIT {
                self.cache.clear();
                self.cached_bytes = 0;
            }
            self.cached_bytes += bytes;
            self.cache.insert(leaf, data);
        }
        let data = &self.cache[&leaf];
        (0..self.rows.len()).map(|r| self.finish(self.rows[r], gj, data[r * p2 + b])).collect()
    }
}

/// Outcome of a cross approximation A ≈ U·V.
#[derive(Debug, Clone)]
pub struct AcaResult {
    /// Positions (into the row list) of the pivot rows, in selection order.
    pub row_pivots: Vec<usize>,
    pub col_pivots: Vec<usize>,
    pub rank: usize,
    /// ‖u_k‖‖v_k‖/‖Ã_k‖_F at the last cross.
    pub achieved_eps: f64,
    /// The rank cap stopped the iteration before the tolerance was met.
    pub capped: bool,
    pub u: DMatrix<C64>,
    pub v: DMatrix<C64>,
}

fn argmax_unused(v: &[C64], used: &[bool]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, x) in v.iter().enumerate() {
        if used[k] {
            continue;
        }
        let a = x.norm();
        if best.map_or(true, |(_, b)| a > b) {
            best = Some((k, a));
        }
    }
    best
}

/// Partially pivoted ACA. Starts at row position 0; ties pick the smallest position.
/// Stops when ‖u_k‖‖v_k‖ ≤ eps·‖Ã_k‖_F or at `max_rank` crosses. With eps = 0 it runs
/// to `max_rank` unless the residual drops to rounding level. Rows whose residual has
/// cancelled to rounding level are skipped; several in a row end the iteration.
pub fn aca_partial(src: &mut dyn CrossSource, eps: f64, max_rank: usize) -> AcaResult {
    let (m, n) = (src.nrows(), src.ncols());
    let cap = max_rank.min(m).min(n);
    let mut us: Vec<Vec<C64>> = Vec::new();
    let mut vs: Vec<Vec<C64>> = Vec::new();
    let mut rows_used = vec![false; m];
    let mut cols_used = vec![false; n];
    let mut row_pivots = Vec::new();
    let mut col_pivots = Vec::new();
    let mut norm2 = 0.0f64;
    let mut achieved = 0.0;
    let mut converged = cap == 0;
    let mut next_row = if m > 0 { Some(0) } else { None };
    let mut represented = 0usize;
    while us.len() < cap {
        let Some(i) = next_row else {
            converged = true;
            break;
        };
        rows_used[i] = true;
        let mut r = src.row(i);
        let raw_max = r.iter().map(|x| x.norm()).fold(0.0, f64::max);
        for (u, v) in us.iter().zip(&vs) {
            let ui = u[i];
            if ui != C64::new(0.0, 0.0) {
                for (rk, vk) in r.iter_mut().zip(v) {
                    *rk -= ui * vk;
                }
            }
        }
        let piv = argmax_unused(&r, &cols_used);
        let Some((j, mag)) = piv.filter(|&(_, a)| a > 0.0) else {
            // zero residual row: move to the next unused row in index order
            next_row = rows_used.iter().position(|&used| !used);
            if next_row.is_none() {
                converged = true;
            }
            continue;
        };
        if !us.is_empty() && mag <= ROW_CANCELLATION * raw_max {
            represented += 1;
            if represented >= MAX_REPRESENTED_ROWS {
                converged = true;
                break;
            }
            next_row = argmax_unused(us.last().unwrap(), &rows_used)
                .map(|(k, _)| k)
                .or_else(|| rows_used.iter().position(|&used| !used));
            if next_row.is_none() {
                converged = true;
            }
            continue;
        }
        represented = 0;
        let inv = r[j].inv();
        let v: Vec<C64> = r.iter().map(|x| x * inv).collect();
        let mut c = src.col(j);
        for (u, vv) in us.iter().zip(&vs) {
            let vj = vv[j];
            if vj != C64::new(0.0, 0.0) {
                for (ck, uk) in c.iter_mut().zip(u) {
                    *ck -= vj * uk;
                }
            }
        }
        cols_used[j] = true;
        let un2: f64 = c.iter().map(|x| x.norm_sqr()).sum();
        let vn2: f64 = v.iter().map(|x| x.norm_sqr()).sum();
        let mut cross = 0.0;
        for (u, vv) in us.iter().zip(&vs) {
            let a: C64 = u.iter().zip(&c).map(|(x, y)| x.conj() * y).sum();
            let b: C64 = vv.iter().zip(&v).map(|(x, y)| x.conj() * y).sum();
            cross += (a * b).re;
        }
        let new_norm2 = (norm2 + 2.0 * cross + un2 * vn2).max(0.0);
        if (un2 * vn2).sqrt() <= ROUNDOFF * new_norm2.sqrt() {
            // the residual is numerical noise; a cross on it would be singular
            converged = true;
            break;
        }
        norm2 = new_norm2;
        row_pivots.push(i);
        col_pivots.push(j);
        us.push(c);
        vs.push(v);
        achieved = if norm2 > 0.0 { (un2 * vn2).sqrt() / norm2.sqrt() } else { 0.0 };
        if achieved <= eps {
            converged = true;
            break;
        }
        next_row = argmax_unused(us.last().unwrap(), &rows_used).map(|(k, _)| k);
    }
    let rank = us.len();
    let u = DMatrix::from_fn(m, rank, |i, k| us[k][i]);
    let v = DMatrix::from_fn(rank, n, |k, j| vs[k][j]);
    AcaResult { row_pivots, col_pivots, rank, achieved_eps: achieved, capped: !converged && rank == cap && cap < m.min(n), u, v }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_is_exact() {
        let a = DMatrix::from_fn(7, 5, |i, j| C64::new((i + 1) as f64, 0.5) * C64::new(1.0, (j as f64).sin()));
        let r = aca_partial(&mut DenseCross(&a), 1e-2, 10);
        assert_eq!(r.rank, 1);
        assert!((&r.u * &r.v - &a).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn zero_block_has_rank_zero() {
        let a = DMatrix::<C64>::zeros(4, 6);
        let r = aca_partial(&mut DenseCross(&a), 1e-8, 10);
        assert_eq!(r.rank, 0);
        assert!(!r.capped);
    }

    #[test]
    fn identity_needs_full_rank() {
        let a = DMatrix::<C64>::identity(10, 10);
        let r = aca_partial(&mut DenseCross(&a), 1e-10, 200);
        assert_eq!(r.rank, 10);
        let mut rp = r.row_pivots.clone();
        rp.sort_unstable();
        rp.dedup();
        assert_eq!(rp.len(), 10);
    }
}
