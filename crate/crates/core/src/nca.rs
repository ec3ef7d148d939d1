//! Nested cross approximation: nested skeleton bases for every box (and every active
//! direction of high-frequency boxes), with translation and M2L operators built only from
//! kernel entries.
//!
//! Far blocks of the operator are diag(κ²q)·K, so the compression is built for the unscaled
//! kernel K and the row scale is applied after the far-field passes.

use std::collections::HashMap;
use crate::clock::Stopwatch;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::aca::{aca_partial, KernelCross};
use crate::discretize::KernelMatrix;
use crate::error::{Error, Result};
use crate::grid::{Regime, Tree};

type C64 = Complex64;

#[derive(Debug, Clone)]
pub struct NcaConfig {
    /// ACA tolerance.
    pub eps: f64,
    pub max_rank: usize,
    /// Raw proxy points taken from each far box when a search set is augmented
    /// (0 selects 2p²).
    pub proxy_per_box: usize,
}

impl Default for NcaConfig {
    fn default() -> Self {
        Self { eps: 1e-8, max_rank: 200, proxy_per_box: 0 }
    }
}

/// Per-node statistics.
#[derive(Debug, Clone, Default, Serialize)]
pub struct NodeDiag {
    pub box_id: usize,
    pub level: u32,
    pub dir: Option<u32>,
    pub rank_in: usize,
    pub rank_out: usize,
    pub search_in: (usize, usize),
    pub search_out: (usize, usize),
    pub achieved_in: f64,
    pub achieved_out: f64,
    pub capped: bool,
    pub augmented: bool,
    /// Trailing ACA pivots dropped because they made the cross matrix singular.
    pub dropped_pivots: usize,
}

/// A box, or a (box, direction) pair for boxes in the high-frequency regime.
#[derive(Debug, Clone)]
pub struct Node {
    pub box_id: usize,
    pub level: u32,
    pub dir: Option<u32>,
    pub is_leaf: bool,
    /// Node indices of the children used to nest this node's bases.
    pub children: Vec<usize>,
    pub parents: Vec<usize>,
    /// Source nodes whose far interaction with this node is handled at this level.
    pub il: Vec<usize>,
    pub t_in: Vec<usize>,
    pub s_in: Vec<usize>,
    pub t_out: Vec<usize>,
    pub s_out: Vec<usize>,
    /// Leaf incoming basis, p² × r_in.
    pub u: DMatrix<C64>,
    /// Leaf outgoing basis, r_out × p².
    pub v: DMatrix<C64>,
    /// Per child: r_in(child) × r_in.
    pub c_ops: Vec<DMatrix<C64>>,
    /// Per child: r_out × r_out(child).
    pub t_ops: Vec<DMatrix<C64>>,
    /// Per entry of `il`: r_in × r_out(source).
    pub m2l: Vec<DMatrix<C64>>,
    pub diag: NodeDiag,
}

impl Node {
    fn new(tree: &Tree, box_id: usize, dir: Option<u32>) -> Self {
        let b = &tree.boxes[box_id];
        Self {
            box_id,
            level: b.level,
            dir,
            is_leaf: b.is_leaf(),
            children: Vec::new(),
            parents: Vec::new(),
            il: Vec::new(),
            t_in: Vec::new(),
            s_in: Vec::new(),
            t_out: Vec::new(),
            s_out: Vec::new(),
            u: DMatrix::zeros(0, 0),
            v: DMatrix::zeros(0, 0),
            c_ops: Vec::new(),
            t_ops: Vec::new(),
            m2l: Vec::new(),
            diag: NodeDiag { box_id, level: b.level, dir, ..Default::default() },
        }
    }

    pub fn rank_in(&self) -> usize {
        self.t_in.len()
    }

    pub fn rank_out(&self) -> usize {
        self.s_out.len()
    }
}

/// The compressed far field.
pub struct Nca {
    pub nodes: Vec<Node>,
    /// Node indices per tree level.
    pub by_level: Vec<Vec<usize>>,
    index: HashMap<(usize, Option<u32>), usize>,
    pub eps: f64,
    pub pivot_seconds: f64,
    pub operator_seconds: f64,
}

struct Pivots {
    t_in: Vec<usize>,
    s_in: Vec<usize>,
    t_out: Vec<usize>,
    s_out: Vec<usize>,
    diag: NodeDiag,
}

fn sorted_union(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Full-pivot LU of a cross matrix; `right` solves X·M = B, otherwise M·X = B.
struct CrossLu {
    lu: Option<nalgebra::linalg::FullPivLU<C64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl CrossLu {
    fn new(m: DMatrix<C64>, transpose: bool, box_id: usize, dir: Option<u32>) -> Result<Self> {
        if m.nrows() == 0 {
            return Ok(Self { lu: None });
        }
        if is_singular(&m) {
            return Err(Error::SingularCross { box_id, dir });
        }
        let lu = if transpose { m.transpose() } else { m }.full_piv_lu();
        Ok(Self { lu: Some(lu) })
    }

    /// M⁻¹ B.
    fn left(&self, b: DMatrix<C64>) -> DMatrix<C64> {
        match &self.lu {
            None => DMatrix::zeros(0, b.ncols()),
            Some(lu) => lu.solve(&b).expect("checked nonsingular"),
        }
    }

    /// B M⁻¹, for an LU built from Mᵀ.
    fn right(&self, b: DMatrix<C64>) -> DMatrix<C64> {
        match &self.lu {
            None => DMatrix::zeros(b.nrows(), 0),
            Some(lu) => lu.solve(&b.transpose()).expect("checked nonsingular").transpose(),
        }
    }
}

/// Numerical singularity test, invariant under row and column scaling.
fn is_singular(m: &DMatrix<C64>) -> bool {
    let mut e = m.clone();
    for mut r in e.row_iter_mut() {
        let s = r.iter().map(|x| x.norm()).fold(0.0, f64::max);
        if s > 0.0 {
            r /= C64::new(s, 0.0);
        }
    }
    for mut c in e.column_iter_mut() {
        let s = c.iter().map(|x| x.norm()).fold(0.0, f64::max);
        if s > 0.0 {
            c /= C64::new(s, 0.0);
        }
    }
    let lu = e.full_piv_lu();
    let d = lu.u().diagonal();
    let mx = d.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let mn = d.iter().map(|x| x.norm()).fold(f64::INFINITY, f64::min);
    !(mn > SINGULAR_RATIO * mx)
}

const SINGULAR_RATIO: f64 = 1e-14;

/// Largest k such that the leading k × k cross of the ACA pivots is nonsingular. ACA
/// pivots come in selection order, so a singular cross means a late pivot picked up
/// rounding noise; dropping it loses only a noise-level term.
fn nonsingular_prefix(km: &KernelMatrix, t: &[usize], s: &[usize]) -> usize {
    if t.is_empty() {
        return 0;
    }
    let full = km.block_raw(t, s);
    let mut k = t.len();
    while k > 0 && is_singular(&full.view((0, 0), (k, k)).into_owned()) {
        k -= 1;
    }
    k
}

impl Nca {
    /// Builds pivots, then translation and M2L operators, for all active nodes.
    pub fn build(km: &KernelMatrix, cfg: &NcaConfig) -> Result<Self> {
        let tree = &*km.tree;
        let mut nca = Self::skeleton(tree);
        nca.eps = cfg.eps;
        let t0 = Stopwatch::start();
        let proxy_cap = if cfg.proxy_per_box == 0 { 2 * km.p2() } else { cfg.proxy_per_box };
        for level in (1..nca.by_level.len()).rev() {
            let ids = nca.by_level[level].clone();
            let piv: Vec<Result<Pivots>> =
                ids.par_iter().map(|&id| nca.node_pivots(km, id, cfg, proxy_cap)).collect();
            for (&id, p) in ids.iter().zip(piv) {
                let p = p?;
                let n = &mut nca.nodes[id];
                n.t_in = p.t_in;
                n.s_in = p.s_in;
                n.t_out = p.t_out;
                n.s_out = p.s_out;
                n.diag = p.diag;
            }
        }
        nca.pivot_seconds = t0.seconds();
        let t1 = Stopwatch::start();
        let ops: Vec<Result<_>> = (0..nca.nodes.len()).into_par_iter().map(|id| nca.node_operators(km, id)).collect();
        for (id, op) in ops.into_iter().enumerate() {
            let (u, v, c, t, m) = op?;
            let n = &mut nca.nodes[id];
            n.u = u;
            n.v = v;
            n.c_ops = c;
            n.t_ops = t;
            n.m2l = m;
        }
        nca.operator_seconds = t1.seconds();
        Ok(nca)
    }

    /// Active nodes and their links, without pivots.
    pub fn skeleton(tree: &Tree) -> Self {
        let depth = tree.levels.len();
        let mut nodes: Vec<Node> = Vec::new();
        let mut index: HashMap<(usize, Option<u32>), usize> = HashMap::new();
        let mut by_level = vec![Vec::new(); depth];
        // nodes of each box, for parent lookups
        let mut box_nodes: Vec<Vec<usize>> = vec![Vec::new(); tree.boxes.len()];
        for level in 1..depth {
            for &bid in &tree.levels[level] {
                let b = &tree.boxes[bid];
                let parent = b.parent.expect("non-root");
                let pnodes = &box_nodes[parent];
                let mut dirs: Vec<Option<u32>> = Vec::new();
                match b.regime {
                    Regime::Low => {
                        if !b.il_low.is_empty() || !pnodes.is_empty() {
                            dirs.push(None);
                        }
                    }
                    Regime::High => {
                        let n_c = tree.cone_counts[level];
                        let n_p = tree.cone_counts[level - 1].max(1);
                        let mut act: Vec<u32> = b.il_high.iter().filter(|(_, v)| !v.is_empty()).map(|(&d, _)| d).collect();
                        for &pn in pnodes {
                            if let Some(k) = nodes[pn].dir {
                                act.push((u64::from(k) * u64::from(n_c) / u64::from(n_p)) as u32);
                            }
                        }
                        act.sort_unstable();
                        act.dedup();
                        dirs.extend(act.into_iter().map(Some));
                    }
                }
                for d in dirs {
                    let id = nodes.len();
                    nodes.push(Node::new(tree, bid, d));
                    index.insert((bid, d), id);
                    box_nodes[bid].push(id);
                    by_level[level].push(id);
                }
            }
        }
        // parent/child links
        for id in 0..nodes.len() {
            let (bid, dir) = (nodes[id].box_id, nodes[id].dir);
            let b = &tree.boxes[bid];
            let Some(ch) = b.children else { continue };
            let level = b.level as usize;
            let mut kids = Vec::with_capacity(4);
            for c in ch {
                let cd = match (tree.boxes[c].regime, dir) {
                    (Regime::High, Some(k)) => {
                        let n_c = tree.cone_counts[level + 1];
                        let n_p = tree.cone_counts[level];
                        Some((u64::from(k) * u64::from(n_c) / u64::from(n_p)) as u32)
                    }
                    _ => None,
                };
                let cid = *index.get(&(c, cd)).expect("children of active nodes are active");
                kids.push(cid);
            }
            for &k in &kids {
                nodes[k].parents.push(id);
            }
            nodes[id].children = kids;
        }
        // interaction lists
        for id in 0..nodes.len() {
            let b = &tree.boxes[nodes[id].box_id];
            let il: Vec<usize> = match nodes[id].dir {
                None => b.il_low.iter().map(|&y| index[&(y, None)]).collect(),
                Some(d) => b.il_high.get(&d).map_or(Vec::new(), |v| v.iter().map(|&(y, dy)| index[&(y, Some(dy))]).collect()),
            };
            nodes[id].il = il;
        }
        Self { nodes, by_level, index, eps: 0.0, pivot_seconds: 0.0, operator_seconds: 0.0 }
    }

    pub fn node_of(&self, box_id: usize, dir: Option<u32>) -> Option<usize> {
        self.index.get(&(box_id, dir)).copied()
    }

    fn box_points(tree: &Tree, bid: usize) -> Vec<usize> {
        tree.boxes[bid].range.clone().collect()
    }

    /// Representative sources of a node seen from the far side (outgoing side).
    fn rep_out(&self, tree: &Tree, y: usize) -> Vec<usize> {
        let n = &self.nodes[y];
        if n.is_leaf {
            Self::box_points(tree, n.box_id)
        } else {
            n.children.iter().flat_map(|&c| self.nodes[c].s_out.iter().copied()).collect()
        }
    }

    fn rep_in(&self, tree: &Tree, y: usize) -> Vec<usize> {
        let n = &self.nodes[y];
        if n.is_leaf {
            Self::box_points(tree, n.box_id)
        } else {
            n.children.iter().flat_map(|&c| self.nodes[c].t_in.iter().copied()).collect()
        }
    }

    fn needs_augment(&self, tree: &Tree, id: usize) -> bool {
        let n = &self.nodes[id];
        if n.il.is_empty() {
            return true;
        }
        let parent = tree.boxes[n.box_id].parent.expect("non-root");
        tree.boxes[parent].neighbors.iter().any(|&nb| nb != parent && tree.boxes[nb].is_leaf())
    }

    /// Stride-subsampled raw points of the far boxes of ancestor nodes.
    fn proxies(&self, tree: &Tree, id: usize, cap: usize, out: &mut Vec<usize>) {
        for &pn in &self.nodes[id].parents {
            for &y in &self.nodes[pn].il {
                let r = tree.boxes[self.nodes[y].box_id].range.clone();
                let stride = r.len().div_ceil(cap).max(1);
                out.extend(r.step_by(stride));
            }
            if self.needs_augment(tree, pn) {
                self.proxies(tree, pn, cap, out);
            }
        }
    }

    fn node_pivots(&self, km: &KernelMatrix, id: usize, cfg: &NcaConfig, proxy_cap: usize) -> Result<Pivots> {
        let tree = &*km.tree;
        let n = &self.nodes[id];
        let own_rows: Vec<usize> = if n.is_leaf {
            Self::box_points(tree, n.box_id)
        } else {
            sorted_union(n.children.iter().flat_map(|&c| self.nodes[c].t_in.iter().copied()).collect())
        };
        let own_cols: Vec<usize> = if n.is_leaf {
            Self::box_points(tree, n.box_id)
        } else {
            sorted_union(n.children.iter().flat_map(|&c| self.nodes[c].s_out.iter().copied()).collect())
        };
        let mut far_cols: Vec<usize> = n.il.iter().flat_map(|&y| self.rep_out(tree, y)).collect();
        let mut far_rows: Vec<usize> = n.il.iter().flat_map(|&y| self.rep_in(tree, y)).collect();
        let augmented = self.needs_augment(tree, id);
        if augmented {
            let mut px = Vec::new();
            self.proxies(tree, id, proxy_cap, &mut px);
            far_cols.extend(&px);
            far_rows.extend(&px);
        }
        let far_cols = sorted_union(far_cols);
        let far_rows = sorted_union(far_rows);

        let ain = aca_partial(&mut KernelCross::new(km, &own_rows, &far_cols), cfg.eps, cfg.max_rank);
        let aout = aca_partial(&mut KernelCross::new(km, &far_rows, &own_cols), cfg.eps, cfg.max_rank);
        let mut t_in: Vec<usize> = ain.row_pivots.iter().map(|&k| own_rows[k]).collect();
        let mut s_in: Vec<usize> = ain.col_pivots.iter().map(|&k| far_cols[k]).collect();
        let mut t_out: Vec<usize> = aout.row_pivots.iter().map(|&k| far_rows[k]).collect();
        let mut s_out: Vec<usize> = aout.col_pivots.iter().map(|&k| own_cols[k]).collect();
        let (rank_in, rank_out) = (t_in.len(), t_out.len());
        let k_in = nonsingular_prefix(km, &t_in, &s_in);
        let k_out = nonsingular_prefix(km, &t_out, &s_out);
        if (k_in == 0 && rank_in > 0) || (k_out == 0 && rank_out > 0) {
            return Err(Error::SingularCross { box_id: n.box_id, dir: n.dir });
        }
        t_in.truncate(k_in);
        s_in.truncate(k_in);
        t_out.truncate(k_out);
        s_out.truncate(k_out);
        let diag = NodeDiag {
            box_id: n.box_id,
            level: n.level,
            dir: n.dir,
            rank_in: k_in,
            rank_out: k_out,
            search_in: (own_rows.len(), far_cols.len()),
            search_out: (far_rows.len(), own_cols.len()),
            achieved_in: ain.achieved_eps,
            achieved_out: aout.achieved_eps,
            capped: ain.capped || aout.capped,
            augmented,
            dropped_pivots: rank_in - k_in + rank_out - k_out,
        };
        Ok(Pivots { t_in, s_in, t_out, s_out, diag })
    }

    #[allow(clippy::type_complexity)]
    fn node_operators(
        &self,
        km: &KernelMatrix,
        id: usize,
    ) -> Result<(DMatrix<C64>, DMatrix<C64>, Vec<DMatrix<C64>>, Vec<DMatrix<C64>>, Vec<DMatrix<C64>>)> {
        let tree = &*km.tree;
        let n = &self.nodes[id];
        let lu_in = CrossLu::new(km.block_raw(&n.t_in, &n.s_in), true, n.box_id, n.dir)?;
        let lu_out = CrossLu::new(km.block_raw(&n.t_out, &n.s_out), false, n.box_id, n.dir)?;
        let mut u = DMatrix::zeros(0, 0);
        let mut v = DMatrix::zeros(0, 0);
        let mut c_ops = Vec::new();
        let mut t_ops = Vec::new();
        if n.is_leaf {
            let pts = Self::box_points(tree, n.box_id);
            u = lu_in.right(km.block_raw(&pts, &n.s_in));
            v = lu_out.left(km.block_raw(&n.t_out, &pts));
        } else {
            for &c in &n.children {
                let cn = &self.nodes[c];
                c_ops.push(lu_in.right(km.block_raw(&cn.t_in, &n.s_in)));
                t_ops.push(lu_out.left(km.block_raw(&n.t_out, &cn.s_out)));
            }
        }
        let m2l = n.il.iter().map(|&y| km.block_raw(&n.t_in, &self.nodes[y].s_out)).collect();
        Ok((u, v, c_ops, t_ops, m2l))
    }

    /// Full incoming basis of a node: (rows = all points of the box, |box| × r_in).
    pub fn incoming_basis(&self, tree: &Tree, id: usize) -> (Vec<usize>, DMatrix<C64>) {
        let n = &self.nodes[id];
        if n.is_leaf {
            return (Self::box_points(tree, n.box_id), n.u.clone());
        }
        let mut rows = Vec::new();
        let mut blocks = Vec::new();
        for (k, &c) in n.children.iter().enumerate() {
            let (r, b) = self.incoming_basis(tree, c);
            rows.extend(r);
            blocks.push(b * &n.c_ops[k]);
        }
        (rows, vstack(&blocks, n.rank_in()))
    }

    /// Full outgoing basis: (cols = all points of the box, r_out × |box|).
    pub fn outgoing_basis(&self, tree: &Tree, id: usize) -> (Vec<usize>, DMatrix<C64>) {
        let n = &self.nodes[id];
        if n.is_leaf {
            return (Self::box_points(tree, n.box_id), n.v.clone());
        }
        let mut cols = Vec::new();
        let mut blocks = Vec::new();
        for (k, &c) in n.children.iter().enumerate() {
            let (r, b) = self.outgoing_basis(tree, c);
            cols.extend(r);
            blocks.push(&n.t_ops[k] * b);
        }
        let total: usize = blocks.iter().map(|b| b.ncols()).sum();
        let mut m = DMatrix::zeros(n.rank_out(), total);
        let mut off = 0;
        for b in blocks {
            m.columns_mut(off, b.ncols()).copy_from(&b);
            off += b.ncols();
        }
        (cols, m)
    }

    pub fn max_rank(&self) -> usize {
        self.nodes.iter().map(|n| n.rank_in().max(n.rank_out())).max().unwrap_or(0)
    }

    pub fn any_capped(&self) -> bool {
        self.nodes.iter().any(|n| n.diag.capped)
    }

    /// Node statistics as JSON.
    pub fn diagnostics_json(&self) -> serde_json::Value {
        let nodes: Vec<&NodeDiag> = self.nodes.iter().map(|n| &n.diag).collect();
        serde_json::json!({
            "eps": self.eps,
            "nodes": nodes,
            "max_rank": self.max_rank(),
            "capped": self.any_capped(),
            "pivot_seconds": self.pivot_seconds,
            "operator_seconds": self.operator_seconds,
        })
    }

    /// Mean incoming rank of nodes at each level, with node counts.
    pub fn ranks_by_level(&self) -> Vec<(u32, usize, f64)> {
        self.by_level
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(l, v)| {
                let s: usize = v.iter().map(|&i| self.nodes[i].rank_in()).sum();
                (l as u32, v.len(), s as f64 / v.len() as f64)
            })
            .collect()
    }
}

fn vstack(blocks: &[DMatrix<C64>], ncols: usize) -> DMatrix<C64> {
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut m = DMatrix::zeros(total, ncols);
    let mut off = 0;
    for b in blocks {
        m.rows_mut(off, b.nrows()).copy_from(b);
        off += b.nrows();
    }
    m
}
