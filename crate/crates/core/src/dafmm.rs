//! Fast matrix-vector product: nested far-field passes plus the tabulated near field.

use std::sync::Arc;
use crate::clock::Stopwatch;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::discretize::{KernelMatrix, KernelMode};
use crate::error::{Error, Result};
use crate::nca::{Nca, NcaConfig};

type C64 = Complex64;

/// Wall-clock seconds spent in each pass of one product.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PassTimes {
    pub upward: f64,
    pub m2l: f64,
    pub downward: f64,
    pub near: f64,
    pub total: f64,
}

/// Matrix-vector product plan for one kernel matrix.
pub struct Dafmm {
    pub km: Arc<KernelMatrix>,
    pub nca: Nca,
    /// For each node: (parent node, position of this node among the parent's children).
    parent_slots: Vec<Vec<(usize, usize)>>,
    pub build_seconds: f64,
}

fn gemv(m: &DMatrix<C64>, x: &[C64], out: &mut [C64]) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return;
    }
    let r = m * DVector::from_column_slice(x);
    for (o, v) in out.iter_mut().zip(r.iter()) {
        *o += v;
    }
}

impl Dafmm {
    pub fn new(km: Arc<KernelMatrix>, cfg: &NcaConfig) -> Result<Self> {
        let t0 = Stopwatch::start();
        let nca = Nca::build(&km, cfg)?;
        let mut parent_slots = vec![Vec::new(); nca.nodes.len()];
        for (pid, p) in nca.nodes.iter().enumerate() {
            for (k, &c) in p.children.iter().enumerate() {
                parent_slots[c].push((pid, k));
            }
        }
        Ok(Self { km, nca, parent_slots, build_seconds: t0.seconds() })
    }

    pub fn n(&self) -> usize {
        self.km.n()
    }

    fn check(&self, x: &[C64]) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::Dimension { expected: self.n(), got: x.len() });
        }
        if let Some(i) = x.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(())
    }

    /// y = A x.
    pub fn matvec(&self, x: &[C64]) -> Result<Vec<C64>> {
        Ok(self.matvec_profiled(x)?.0)
    }

    /// y = A x with per-pass timings.
    pub fn matvec_profiled(&self, x: &[C64]) -> Result<(Vec<C64>, PassTimes)> {
        self.check(x)?;
        let t0 = Stopwatch::start();
        let (mut y, mut times) = self.far_field(x, true);
        let t_near = Stopwatch::start();
        self.add_near(x, &mut y, true);
        times.near = t_near.seconds();
        times.total = t0.seconds();
        Ok((y, times))
    }

    /// y = K x with the unscaled kernel: the discrete volume potential V[x] at the grid
    /// points in operator or potential mode, the plain N-body sum in point mode.
    pub fn potential(&self, x: &[C64]) -> Result<Vec<C64>> {
        self.check(x)?;
        let (mut y, _) = self.far_field(x, false);
        self.add_near(x, &mut y, false);
        Ok(y)
    }

    /// Far-field contribution only.
    pub fn far_only(&self, x: &[C64]) -> Result<Vec<C64>> {
        self.check(x)?;
        Ok(self.far_field(x, true).0)
    }

    /// Near-field contribution only (including the identity in operator mode).
    pub fn near_only(&self, x: &[C64]) -> Result<Vec<C64>> {
        self.check(x)?;
        let mut y = vec![C64::new(0.0, 0.0); self.n()];
        self.add_near(x, &mut y, true);
        Ok(y)
    }

    fn far_field(&self, x: &[C64], scaled: bool) -> (Vec<C64>, PassTimes) {
        let tree = &*self.km.tree;
        let nodes = &self.nca.nodes;
        let mut times = PassTimes::default();
        let mut out_w: Vec<Vec<C64>> = nodes.iter().map(|n| vec![C64::new(0.0, 0.0); n.rank_out()]).collect();
        let mut in_w: Vec<Vec<C64>> = nodes.iter().map(|n| vec![C64::new(0.0, 0.0); n.rank_in()]).collect();

        let t = Stopwatch::start();
        for level in (1..self.nca.by_level.len()).rev() {
            let ids = &self.nca.by_level[level];
            let vals: Vec<Vec<C64>> = ids
                .par_iter()
                .map(|&id| {
                    let n = &nodes[id];
                    let mut w = vec![C64::new(0.0, 0.0); n.rank_out()];
                    if n.is_leaf {
                        let r = tree.boxes[n.box_id].range.clone();
                        gemv(&n.v, &x[r], &mut w);
                    } else {
                        for (k, &c) in n.children.iter().enumerate() {
                            gemv(&n.t_ops[k], &out_w[c], &mut w);
                        }
                    }
                    w
                })
                .collect();
            for (&id, w) in ids.iter().zip(vals) {
                out_w[id] = w;
            }
        }
        times.upward = t.seconds();

        let t = Stopwatch::start();
        in_w.par_iter_mut().enumerate().for_each(|(id, w)| {
            let n = &nodes[id];
            for (k, &y) in n.il.iter().enumerate() {
                gemv(&n.m2l[k], &out_w[y], w);
            }
        });
        times.m2l = t.seconds();

        let t = Stopwatch::start();
        for level in 2..self.nca.by_level.len() {
            let ids = &self.nca.by_level[level];
            let vals: Vec<Vec<C64>> = ids
                .par_iter()
                .map(|&id| {
                    let mut w = in_w[id].clone();
                    for &(p, k) in &self.parent_slots[id] {
                        gemv(&nodes[p].c_ops[k], &in_w[p], &mut w);
                    }
                    w
                })
                .collect();
            for (&id, w) in ids.iter().zip(vals) {
                in_w[id] = w;
            }
        }
        let mut y = vec![C64::new(0.0, 0.0); self.n()];
        let leaf_vals: Vec<(usize, Vec<C64>)> = nodes
            .par_iter()
            .enumerate()
            .filter(|(_, n)| n.is_leaf)
            .map(|(id, n)| {
                let mut v = vec![C64::new(0.0, 0.0); n.u.nrows()];
                gemv(&n.u, &in_w[id], &mut v);
                (n.box_id, v)
            })
            .collect();
        for (bid, v) in leaf_vals {
            let start = tree.boxes[bid].range.start;
            for (k, val) in v.into_iter().enumerate() {
                y[start + k] += if scaled { val * self.km.rowscale[start + k] } else { val };
            }
        }
        times.downward = t.seconds();
        (y, times)
    }

    fn add_near(&self, x: &[C64], y: &mut [C64], scaled: bool) {
        let km = &*self.km;
        let tree = &*km.tree;
        let p2 = km.p2();
        y.par_chunks_mut(p2).enumerate().for_each(|(t, yt)| {
            let r0 = tree.boxes[tree.leaves[t]].range.start;
            debug_assert_eq!(tree.boxes[tree.leaves[t]].range.len(), p2);
            let mut acc = vec![C64::new(0.0, 0.0); p2];
            for (s, cls) in km.near_list(t) {
                let c0 = tree.boxes[tree.leaves[*s]].range.start;
                let xs = &x[c0..c0 + p2];
                for (a, ac) in acc.iter_mut().enumerate() {
                    let row = &cls[a * p2..(a + 1) * p2];
                    *ac += row.iter().zip(xs).map(|(k, v)| k * v).sum::<C64>();
                }
            }
            for (a, (yv, ac)) in yt.iter_mut().zip(acc).enumerate() {
                if !scaled {
                    *yv += ac;
                    continue;
                }
                *yv += ac * km.rowscale[r0 + a];
                if km.mode == KernelMode::Operator {
                    *yv += x[r0 + a];
                }
            }
        });
    }
}
