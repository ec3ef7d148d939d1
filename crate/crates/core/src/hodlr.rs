//! HODLR matrices: recursive two-way partition with low-rank off-diagonal blocks, factorized
//! by nested Woodbury updates. Used as a direct solver and as a fixed-rank preconditioner.

use std::ops::Range;
use crate::clock::Stopwatch;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::aca::{aca_partial, CrossSource, DenseCross, KernelCross};
use crate::discretize::KernelMatrix;
use crate::error::{Error, Result};

type C64 = Complex64;

/// Entry access needed to build a HODLR matrix.
pub trait HodlrSource: Sync {
    fn size(&self) -> usize;
    /// Split points must be multiples of this.
    fn align(&self) -> usize {
        1
    }
    fn dense(&self, rows: Range<usize>, cols: Range<usize>) -> DMatrix<C64>;
    /// Low-rank factors (U, V) of the block with A ≈ U·V.
    fn compress(&self, rows: Range<usize>, cols: Range<usize>, eps: f64, max_rank: usize) -> (DMatrix<C64>, DMatrix<C64>);
}

impl HodlrSource for DMatrix<C64> {
    fn size(&self) -> usize {
        self.nrows()
    }
    fn dense(&self, rows: Range<usize>, cols: Range<usize>) -> DMatrix<C64> {
        self.view((rows.start, cols.start), (rows.len(), cols.len())).into_owned()
    }
    fn compress(&self, rows: Range<usize>, cols: Range<usize>, eps: f64, max_rank: usize) -> (DMatrix<C64>, DMatrix<C64>) {
        let b = self.dense(rows, cols);
        let r = aca_partial(&mut DenseCross(&b) as &mut dyn CrossSource, eps, max_rank);
        (r.u, r.v)
    }
}

impl HodlrSource for KernelMatrix {
    fn size(&self) -> usize {
        self.n()
    }
    fn align(&self) -> usize {
        self.p2()
    }
    fn dense(&self, rows: Range<usize>, cols: Range<usize>) -> DMatrix<C64> {
        let r: Vec<usize> = rows.collect();
        let c: Vec<usize> = cols.collect();
        self.block(&r, &c)
    }
    fn compress(&self, rows: Range<usize>, cols: Range<usize>, eps: f64, max_rank: usize) -> (DMatrix<C64>, DMatrix<C64>) {
        let r: Vec<usize> = rows.collect();
        let c: Vec<usize> = cols.collect();
        let res = aca_partial(&mut KernelCross::scaled(self, &r, &c), eps, max_rank);
        (res.u, res.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HodlrMode {
    /// Off-diagonal blocks compressed to relative accuracy eps.
    DirectEps { eps: f64 },
    /// Off-diagonal blocks truncated at a fixed rank.
    PrecondRank { rank: usize },
}

#[derive(Debug, Clone)]
pub struct HodlrConfig {
    pub mode: HodlrMode,
    pub leaf_cluster_size: usize,
    /// Rank cap in direct mode.
    pub max_rank: usize,
}

impl Default for HodlrConfig {
    fn default() -> Self {
        Self { mode: HodlrMode::DirectEps { eps: 1e-10 }, leaf_cluster_size: 256, max_rank: 1000 }
    }
}

enum Kind {
    Leaf {
        a: DMatrix<C64>,
        lu: Option<nalgebra::linalg::LU<C64, nalgebra::Dyn, nalgebra::Dyn>>,
    },
    Inner {
        left: Box<HodlrNode>,
        right: Box<HodlrNode>,
        /// A12 ≈ u12·v12, A21 ≈ u21·v21.
        u12: DMatrix<C64>,
        v12: DMatrix<C64>,
        u21: DMatrix<C64>,
        v21: DMatrix<C64>,
        /// D⁻¹U, with U = diag(u12, u21).
        y: Option<DMatrix<C64>>,
        /// LU of I + V D⁻¹ U.
        k: Option<nalgebra::linalg::LU<C64, nalgebra::Dyn, nalgebra::Dyn>>,
    },
}

/// One node of the HODLR partition.
pub struct HodlrNode {
    pub range: Range<usize>,
    kind: Kind,
}

/// Build and factorization statistics.
#[derive(Debug, Clone, Default, Serialize)]
pub struct HodlrStats {
    pub build_seconds: f64,
    pub factor_seconds: f64,
    pub max_rank: usize,
    pub levels: usize,
}

pub struct Hodlr {
    pub root: HodlrNode,
    pub stats: HodlrStats,
}

fn split_point(range: &Range<usize>, align: usize) -> usize {
    let mid = (range.start + range.end) / 2;
    let lo = range.start + ((mid - range.start) / align) * align;
    let hi = (lo + align).min(range.end);
    let best = if mid - lo <= hi - mid { lo } else { hi };
    if best == range.start || best == range.end {
        // the range is a single aligned cluster; fall back to the plain midpoint
        mid
    } else {
        best
    }
}

fn lu_singular(lu: &nalgebra::linalg::LU<C64, nalgebra::Dyn, nalgebra::Dyn>) -> bool {
    let d = lu.u().diagonal();
    let mx = d.iter().map(|x| x.norm()).fold(0.0, f64::max);
    d.iter().any(|x| !(x.norm() > 1e-14 * mx)) || !mx.is_finite()
}

impl HodlrNode {
    fn build(src: &dyn HodlrSource, range: Range<usize>, cfg: &HodlrConfig, depth: usize, stats: &mut (usize, usize)) -> Self {
        stats.1 = stats.1.max(depth);
        if range.len() <= cfg.leaf_cluster_size.max(1) {
            return Self { kind: Kind::Leaf { a: src.dense(range.clone(), range.clone()), lu: None }, range };
        }
        let mid = split_point(&range, src.align());
        let (r1, r2) = (range.start..mid, mid..range.end);
        let (eps, cap) = match cfg.mode {
            HodlrMode::DirectEps { eps } => (eps, cfg.max_rank),
            HodlrMode::PrecondRank { rank } => (0.0, rank),
        };
        let (u12, v12) = src.compress(r1.clone(), r2.clone(), eps, cap);
        let (u21, v21) = src.compress(r2.clone(), r1.clone(), eps, cap);
        stats.0 = stats.0.max(u12.ncols()).max(u21.ncols());
        let left = Box::new(Self::build(src, r1, cfg, depth + 1, stats));
        let right = Box::new(Self::build(src, r2, cfg, depth + 1, stats));
        Self { range, kind: Kind::Inner { left, right, u12, v12, u21, v21, y: None, k: None } }
    }

    fn factorize(&mut self) -> Result<()> {
        let range = self.range.clone();
        match &mut self.kind {
            Kind::Leaf { a, lu } => {
                let f = a.clone().lu();
                if lu_singular(&f) {
                    return Err(Error::SingularBlock { start: range.start, end: range.end });
                }
                *lu = Some(f);
            }
            Kind::Inner { left, right, u12, v12, u21, v21, y, k } => {
                left.factorize()?;
                right.factorize()?;
                let (r1, r2) = (u12.ncols(), u21.ncols());
                let (n1, n2) = (left.range.len(), right.range.len());
                let y1 = left.solve_mat(u12.clone());
                let y2 = right.solve_mat(u21.clone());
                let mut ym = DMatrix::zeros(n1 + n2, r1 + r2);
                ym.view_mut((0, 0), (n1, r1)).copy_from(&y1);
                ym.view_mut((n1, r1), (n2, r2)).copy_from(&y2);
                // I + V Y with V = [[0, v12], [v21, 0]]
                let mut km = DMatrix::<C64>::identity(r1 + r2, r1 + r2);
                if r1 > 0 && r2 > 0 {
                    let a = &*v12 * &y2;
                    let b = &*v21 * &y1;
                    let mut t = km.view_mut((0, r1), (r1, r2));
                    t += a;
                    let mut t = km.view_mut((r1, 0), (r2, r1));
                    t += b;
                }
                let f = km.lu();
                if r1 + r2 > 0 && lu_singular(&f) {
                    return Err(Error::SingularBlock { start: range.start, end: range.end });
                }
                *y = Some(ym);
                *k = Some(f);
            }
        }
        Ok(())
    }

    /// Ã⁻¹ B for a block of right-hand sides.
    fn solve_mat(&self, mut b: DMatrix<C64>) -> DMatrix<C64> {
        match &self.kind {
            Kind::Leaf { lu, .. } => {
                lu.as_ref().expect("factorized").solve_mut(&mut b);
                b
            }
            Kind::Inner { left, right, v12, v21, y, k, u12, u21 } => {
                let n1 = left.range.len();
                let nc = b.ncols();
                let z1 = left.solve_mat(b.rows(0, n1).into_owned());
                let z2 = right.solve_mat(b.rows(n1, b.nrows() - n1).into_owned());
                let (r1, r2) = (u12.ncols(), u21.ncols());
                let mut z = b;
                z.rows_mut(0, n1).copy_from(&z1);
                let n2 = z.nrows() - n1;
                z.rows_mut(n1, n2).copy_from(&z2);
                if r1 + r2 == 0 {
                    return z;
                }
                let mut vz = DMatrix::zeros(r1 + r2, nc);
                if r1 > 0 {
                    vz.rows_mut(0, r1).copy_from(&(v12 * &z2));
                }
                if r2 > 0 {
                    vz.rows_mut(r1, r2).copy_from(&(v21 * &z1));
                }
                k.as_ref().expect("factorized").solve_mut(&mut vz);
                z -= y.as_ref().expect("factorized") * vz;
                z
            }
        }
    }

    fn apply_mat(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        match &self.kind {
            Kind::Leaf { a, .. } => a * x,
            Kind::Inner { left, right, u12, v12, u21, v21, .. } => {
                let n1 = left.range.len();
                let x1 = x.rows(0, n1).into_owned();
                let x2 = x.rows(n1, x.nrows() - n1).into_owned();
                let mut y1 = left.apply_mat(&x1);
                let mut y2 = right.apply_mat(&x2);
                if u12.ncols() > 0 {
                    y1 += u12 * (v12 * &x2);
                }
                if u21.ncols() > 0 {
                    y2 += u21 * (v21 * &x1);
                }
                let mut y = DMatrix::zeros(x.nrows(), x.ncols());
                y.rows_mut(0, n1).copy_from(&y1);
                let n2 = x.nrows() - n1;
                y.rows_mut(n1, n2).copy_from(&y2);
                y
            }
        }
    }

    fn ranks(&self, out: &mut Vec<(usize, usize, usize)>, depth: usize) {
        if let Kind::Inner { left, right, u12, u21, .. } = &self.kind {
            out.push((depth, u12.ncols(), u21.ncols()));
            left.ranks(out, depth + 1);
            right.ranks(out, depth + 1);
        }
    }
}

impl Hodlr {
    /// Builds the partition and compresses all off-diagonal blocks.
    pub fn build(src: &dyn HodlrSource, cfg: &HodlrConfig) -> Result<Self> {
        let n = src.size();
        if n == 0 {
            return Err(Error::Config("empty matrix".into()));
        }
        if let HodlrMode::PrecondRank { rank } = cfg.mode {
            if rank == 0 {
                return Err(Error::Config("preconditioner rank must be positive".into()));
            }
        }
        let t = Stopwatch::start();
        let mut st = (0, 0);
        let root = HodlrNode::build(src, 0..n, cfg, 0, &mut st);
        let stats = HodlrStats { build_seconds: t.seconds(), max_rank: st.0, levels: st.1, ..Default::default() };
        Ok(Self { root, stats })
    }

    pub fn factorize(&mut self) -> Result<()> {
        let t = Stopwatch::start();
        self.root.factorize()?;
        self.stats.factor_seconds = t.seconds();
        Ok(())
    }

    /// Build followed by factorization.
    pub fn new(src: &dyn HodlrSource, cfg: &HodlrConfig) -> Result<Self> {
        let mut h = Self::build(src, cfg)?;
        h.factorize()?;
        Ok(h)
    }

    pub fn n(&self) -> usize {
        self.root.range.len()
    }

    /// x with Ã x = b.
    pub fn solve(&self, b: &[C64]) -> Result<Vec<C64>> {
        if b.len() != self.n() {
            return Err(Error::Dimension { expected: self.n(), got: b.len() });
        }
        if matches!(&self.root.kind, Kind::Leaf { lu: None, .. } | Kind::Inner { k: None, .. }) {
            return Err(Error::Config("HODLR matrix is not factorized".into()));
        }
        let x = self.root.solve_mat(DMatrix::from_column_slice(b.len(), 1, b));
        Ok(x.column(0).iter().copied().collect())
    }

    /// Ã x.
    pub fn apply(&self, x: &[C64]) -> Result<Vec<C64>> {
        if x.len() != self.n() {
            return Err(Error::Dimension { expected: self.n(), got: x.len() });
        }
        let y = self.root.apply_mat(&DMatrix::from_column_slice(x.len(), 1, x));
        Ok(y.column(0).iter().copied().collect())
    }

    /// Dense Ã, for tests.
    pub fn to_dense(&self) -> DMatrix<C64> {
        self.root.apply_mat(&DMatrix::identity(self.n(), self.n()))
    }

    /// (depth, rank of A12, rank of A21) for every inner node.
    pub fn off_diagonal_ranks(&self) -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        self.root.ranks(&mut v, 0);
        v
    }
}
