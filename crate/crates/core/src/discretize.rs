//! Discrete Lippmann-Schwinger operator: Chebyshev basis, interpolation matrices,
//! leaf quadrature of the Green's function and the lazy entry accessor.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Tree;
use crate::quad::{chebyshev_nodes, chebyshev_t, gauss_legendre, gauss_legendre_on};
use crate::special::{green_log_split, green_r, Point2D};

type C64 = Complex64;

/// Products T_m(η₁)T_n(η₂) with m + n < p, ordered by total degree, constant first.
#[derive(Debug, Clone)]
pub struct BasisSet {
    pub p: usize,
    pub np: usize,
    pub degrees: Vec<(usize, usize)>,
}

impl BasisSet {
    pub fn new(p: usize) -> Self {
        let mut degrees = Vec::with_capacity(p * (p + 1) / 2);
        for d in 0..p {
            for m in (0..=d).rev() {
                degrees.push((m, d - m));
            }
        }
        Self { p, np: degrees.len(), degrees }
    }

    /// All basis values at η; `scratch` needs length 2p.
    #[inline]
    pub fn eval_into(&self, e1: f64, e2: f64, scratch: &mut [f64], out: &mut [f64]) {
        let (t1, t2) = scratch.split_at_mut(self.p);
        chebyshev_t(self.p, e1, t1);
        chebyshev_t(self.p, e2, t2);
        for (o, &(m, n)) in out.iter_mut().zip(&self.degrees) {
            *o = t1[m] * t2[n];
        }
    }

    pub fn eval(&self, e1: f64, e2: f64) -> Vec<f64> {
        let mut s = vec![0.0; 2 * self.p];
        let mut out = vec![0.0; self.np];
        self.eval_into(e1, e2, &mut s, &mut out);
        out
    }
}

/// Q (p² × N_p) and its pseudo-inverse.
#[derive(Debug, Clone)]
pub struct InterpOperator {
    pub q: DMatrix<f64>,
    pub qpinv: DMatrix<f64>,
}

/// Interpolation matrix at the tensor Chebyshev grid of [-1,1]² (x1 fastest) and its
/// pseudo-inverse by column-pivoted QR.
pub fn interp_matrix(p: usize) -> Result<InterpOperator> {
    if p < 2 {
        return Err(Error::Config(format!("p must be at least 2, got {p}")));
    }
    let basis = BasisSet::new(p);
    let nodes = chebyshev_nodes(p);
    let mut q = DMatrix::zeros(p * p, basis.np);
    for (j, &t2) in nodes.iter().enumerate() {
        for (i, &t1) in nodes.iter().enumerate() {
            let v = basis.eval(t1, t2);
            for l in 0..basis.np {
                q[(j * p + i, l)] = v[l];
            }
        }
    }
    let qr = q.clone().col_piv_qr();
    let r = qr.r();
    let r00 = r[(0, 0)].abs();
    for k in 0..basis.np {
        if r[(k, k)].abs() <= 1e-12 * r00 {
            return Err(Error::Config(format!("interpolation matrix rank deficient at pivot {k}")));
        }
    }
    let mut x = qr.q().transpose();
    if !r.solve_upper_triangular_mut(&mut x) {
        return Err(Error::Config("interpolation matrix is singular".into()));
    }
    qr.p().inv_permute_rows(&mut x);
    Ok(InterpOperator { q, qpinv: x })
}

/// How matrix entries are formed from the leaf integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    /// δ_ij + κ² q(x_i) W_j(x_i): the Lippmann-Schwinger matrix.
    Operator,
    /// W_j(x_i): the discrete volume potential.
    Potential,
    /// G_κ(x_i, x_j) with zero diagonal: the point-kernel N-body matrix.
    Point,
}

/// Distance from ξ to [-1,1]².
#[inline]
pub fn gap_ref(xi: [f64; 2]) -> f64 {
    let gx = (xi[0].abs() - 1.0).max(0.0);
    let gy = (xi[1].abs() - 1.0).max(0.0);
    gx.hypot(gy)
}

/// Targets at or beyond this reference gap use a tensor Gauss rule; closer ones use the
/// singularity-split rule.
pub const SMOOTH_GAP: f64 = 0.5;

const NEAR_LADDER: [usize; 9] = [8, 12, 16, 20, 24, 32, 40, 48, 64];
const BUCKET_EDGES: [f64; 13] = [0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.5, 7.0, 11.0, 18.0, 30.0, 60.0, 120.0];

/// Singularity-split rule on one box: sinh-mapped edge nodes and two radial rules.
#[derive(Debug, Clone)]
struct NearRule {
    n: usize,
    v: (Vec<f64>, Vec<f64>),
    a: (Vec<f64>, Vec<f64>),
    b: (Vec<f64>, Vec<f64>),
}

impl NearRule {
    fn new(n: usize) -> Self {
        let a = gauss_legendre_on(n, 0.0, 1.0);
        let (bu, bw) = gauss_legendre_on(n, 0.0, 1.0);
        // ∫ t ln t φ(t) dt with t = u³ becomes ∫ 9 u⁵ ln u φ(u³) du
        let bw: Vec<f64> = bu.iter().zip(&bw).map(|(&u, &w)| w * 9.0 * u.powi(5) * u.ln() / (-2.0 * PI)).collect();
        let bt: Vec<f64> = bu.iter().map(|u| u * u * u).collect();
        Self { n, v: gauss_legendre(n), a, b: (bt, bw) }
    }
}

/// Tensor Gauss rule on [-1,1]² with precomputed basis weights.
#[derive(Debug, Clone)]
struct SmoothRule {
    r_min: f64,
    g: usize,
    nodes: Vec<[f64; 2]>,
    /// g² × N_p: w_k b_l(η_k).
    wb: Vec<f64>,
    /// g² × p²: w_k Σ_l b_l(η_k) Q⁺[l, j'].
    m: Vec<f64>,
}

impl SmoothRule {
    fn new(g: usize, r_min: f64, basis: &BasisSet, qpinv: &DMatrix<f64>) -> Self {
        let (x, w) = gauss_legendre(g);
        let np = basis.np;
        let p2 = qpinv.ncols();
        let mut nodes = Vec::with_capacity(g * g);
        let mut wb = Vec::with_capacity(g * g * np);
        let mut m = Vec::with_capacity(g * g * p2);
        for j in 0..g {
            for i in 0..g {
                let wk = w[i] * w[j];
                nodes.push([x[i], x[j]]);
                let b = basis.eval(x[i], x[j]);
                wb.extend(b.iter().map(|v| wk * v));
                for jp in 0..p2 {
                    let mut s = 0.0;
                    for l in 0..np {
                        s += b[l] * qpinv[(l, jp)];
                    }
                    m.push(wk * s);
                }
            }
        }
        Self { r_min, g, nodes, wb, m }
    }
}

/// Reference-box quadrature for one tree level: ∫_{[-1,1]²} G(k|ξ−η|) b_l(η) dη with k = κβ.
#[derive(Debug, Clone)]
pub struct LevelQuad {
    pub k: f64,
    pub beta: f64,
    near: NearRule,
    smooth: Vec<SmoothRule>,
}

fn near_integrals(k: f64, xi: [f64; 2], rule: &NearRule, basis: &BasisSet) -> Vec<C64> {
    const CORNERS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
    let np = basis.np;
    let mut acc = vec![C64::new(0.0, 0.0); np];
    let mut scratch = vec![0.0; 2 * basis.p];
    let mut bv = vec![0.0; np];
    for e in 0..4 {
        let (p0, p1) = (CORNERS[e], CORNERS[(e + 1) % 4]);
        let tau = [(p1[0] - p0[0]) * 0.5, (p1[1] - p0[1]) * 0.5];
        let nl = [-tau[1], tau[0]];
        let d = (xi[0] - p0[0]) * nl[0] + (xi[1] - p0[1]) * nl[1];
        if d.abs() < 1e-15 {
            continue;
        }
        let foot = [xi[0] - d * nl[0], xi[1] - d * nl[1]];
        let s0 = (p0[0] - foot[0]) * tau[0] + (p0[1] - foot[1]) * tau[1];
        let s1 = (p1[0] - foot[0]) * tau[0] + (p1[1] - foot[1]) * tau[1];
        let pieces: Vec<(f64, f64)> = if s0 < 0.0 && s1 > 0.0 { vec![(s0, 0.0), (0.0, s1)] } else { vec![(s0, s1)] };
        let ad = d.abs();
        for (a, b) in pieces {
            let sign = if a + b < 0.0 { -1.0 } else { 1.0 };
            let (lo, hi) = if sign < 0.0 { (-b, -a) } else { (a, b) };
            let (vlo, vhi) = ((lo / ad).asinh(), (hi / ad).asinh());
            let half = 0.5 * (vhi - vlo);
            let mid = 0.5 * (vhi + vlo);
            for (&vx, &vw) in rule.v.0.iter().zip(&rule.v.1) {
                let v = mid + half * vx;
                let s = sign * ad * v.sinh();
                let ds = ad * v.cosh() * vw * half;
                let ept = [foot[0] + s * tau[0], foot[1] + s * tau[1]];
                let dir = [ept[0] - xi[0], ept[1] - xi[1]];
                let len = d.hypot(s);
                let outer = d * ds;
                // regular part
                for (&t, &w) in rule.a.0.iter().zip(&rule.a.1) {
                    let (g, _) = green_log_split(k * t * len, t.ln());
                    let f = g * (w * t * outer);
                    basis.eval_into(xi[0] + t * dir[0], xi[1] + t * dir[1], &mut scratch, &mut bv);
                    for l in 0..np {
                        acc[l] += f * bv[l];
                    }
                }
                // −(1/2π) t ln t J0 part
                for (&t, &w) in rule.b.0.iter().zip(&rule.b.1) {
                    let f = libm::j0(k * t * len) * w * outer;
                    basis.eval_into(xi[0] + t * dir[0], xi[1] + t * dir[1], &mut scratch, &mut bv);
                    for l in 0..np {
                        acc[l].re += f * bv[l];
                    }
                }
            }
        }
    }
    acc
}

fn smooth_integrals(k: f64, xi: [f64; 2], rule: &SmoothRule, np: usize) -> Vec<C64> {
    let mut acc = vec![C64::new(0.0, 0.0); np];
    for (kk, eta) in rule.nodes.iter().enumerate() {
        let g = green_r(k * (xi[0] - eta[0]).hypot(xi[1] - eta[1]));
        let wb = &rule.wb[kk * np..(kk + 1) * np];
        for l in 0..np {
            acc[l] += g * wb[l];
        }
    }
    acc
}

fn max_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

impl LevelQuad {
    /// Chooses rule orders by a doubling self-test against `quad_tol`.
    pub fn new(kappa: f64, beta: f64, quad_tol: f64, basis: &BasisSet, qpinv: &DMatrix<f64>) -> Result<Self> {
        let k = kappa * beta;
        let t0 = (PI / (2 * basis.p) as f64).cos();
        let h = 1.0 - t0;
        // worst self and adjacent targets: closest nodes to corners and edges
        let targets = [
            [t0, t0],
            [t0, 0.0],
            [0.0, 0.0],
            [1.0 + 0.5 * h, t0],
            [1.0 + 0.5 * h, 1.0 + 0.5 * h],
            [1.0 + h, 0.0],
            [1.0 + 2.0 * h, 1.0 + 2.0 * h],
            [1.0 + 0.45, 1.0 - 0.5 * h],
        ];
        let mut chosen = None;
        'ladder: for w in NEAR_LADDER.windows(2) {
            let (r1, r2) = (NearRule::new(w[0]), NearRule::new(w[1]));
            for &xi in &targets {
                if max_diff(&near_integrals(k, xi, &r1, basis), &near_integrals(k, xi, &r2, basis)) > quad_tol {
                    continue 'ladder;
                }
            }
            chosen = Some(r1);
            break;
        }
        let near = chosen.ok_or(Error::Quadrature { estimate: f64::NAN })?;

        let mut smooth = Vec::new();
        for &r in &BUCKET_EDGES {
            let tg = [[1.0 + r, 0.0], [1.0 + r, 0.5], [1.0 + r, 1.0], [1.0 + r / 2f64.sqrt(), 1.0 + r / 2f64.sqrt()]];
            let mut found = None;
            let mut g = 4;
            while g <= 48 {
                let a = SmoothRule::new(g, r, basis, qpinv);
                let b = SmoothRule::new(g + 8, r, basis, qpinv);
                let err = tg
                    .iter()
                    .map(|&xi| max_diff(&smooth_integrals(k, xi, &a, basis.np), &smooth_integrals(k, xi, &b, basis.np)))
                    .fold(0.0, f64::max);
                if err <= quad_tol {
                    found = Some(a);
                    break;
                }
                g += 2;
            }
            smooth.push(found.ok_or(Error::Quadrature { estimate: quad_tol })?);
        }
        Ok(Self { k, beta, near, smooth })
    }

    pub fn near_order(&self) -> usize {
        self.near.n
    }

    /// Gauss orders per distance bucket as (lower reference gap, order).
    pub fn smooth_orders(&self) -> Vec<(f64, usize)> {
        self.smooth.iter().map(|r| (r.r_min, r.g)).collect()
    }

    fn smooth_rule(&self, gap: f64) -> &SmoothRule {
        let idx = self.smooth.iter().rposition(|r| r.r_min <= gap).unwrap_or(0);
        &self.smooth[idx]
    }

    /// Reference integrals ∫ G(k|ξ−η|) b_l(η) dη for all l.
    pub fn integrals(&self, xi: [f64; 2], basis: &BasisSet) -> Vec<C64> {
        let gap = gap_ref(xi);
        if gap < SMOOTH_GAP {
            near_integrals(self.k, xi, &self.near, basis)
        } else {
            smooth_integrals(self.k, xi, self.smooth_rule(gap), basis.np)
        }
    }

    /// Integrals with an explicitly chosen near-rule order (for convergence studies).
    pub fn integrals_near_order(&self, xi: [f64; 2], basis: &BasisSet, n: usize) -> Vec<C64> {
        near_integrals(self.k, xi, &NearRule::new(n), basis)
    }

    /// W_{j'}(x) for all j', with ξ = (x − c)/β: β² Σ_l Q⁺[l,j'] I_l(ξ).
    pub fn w_all(&self, xi: [f64; 2], basis: &BasisSet, qpinv: &DMatrix<f64>) -> Vec<C64> {
        let p2 = qpinv.ncols();
        let b2 = self.beta * self.beta;
        let gap = gap_ref(xi);
        let mut out = vec![C64::new(0.0, 0.0); p2];
        if gap < SMOOTH_GAP {
            let ints = near_integrals(self.k, xi, &self.near, basis);
            for jp in 0..p2 {
                let mut s = C64::new(0.0, 0.0);
                for l in 0..basis.np {
                    s += ints[l] * qpinv[(l, jp)];
                }
                out[jp] = s * b2;
            }
        } else {
            let rule = self.smooth_rule(gap);
            for (kk, eta) in rule.nodes.iter().enumerate() {
                let g = green_r(self.k * (xi[0] - eta[0]).hypot(xi[1] - eta[1])) * b2;
                let m = &rule.m[kk * p2..(kk + 1) * p2];
                for jp in 0..p2 {
                    out[jp] += g * m[jp];
                }
            }
        }
        out
    }

    /// W_{j'}(x) for a subset of j' (smooth regime only; falls back to w_all when near).
    fn w_select(&self, xi: [f64; 2], js: &[usize], basis: &BasisSet, qpinv: &DMatrix<f64>, out: &mut [C64]) {
        let gap = gap_ref(xi);
        if gap < SMOOTH_GAP || js.len() * 4 > qpinv.ncols() {
            let all = self.w_all(xi, basis, qpinv);
            for (o, &j) in out.iter_mut().zip(js) {
                *o = all[j];
            }
            return;
        }
        let p2 = qpinv.ncols();
        let b2 = self.beta * self.beta;
        let rule = self.smooth_rule(gap);
        for o in out.iter_mut() {
            *o = C64::new(0.0, 0.0);
        }
        for (kk, eta) in rule.nodes.iter().enumerate() {
            let g = green_r(self.k * (xi[0] - eta[0]).hypot(xi[1] - eta[1])) * b2;
            let m = &rule.m[kk * p2..(kk + 1) * p2];
            for (o, &j) in out.iter_mut().zip(js) {
                *o += g * m[j];
            }
        }
    }
}

/// Relative geometry of a (target leaf, source leaf) pair: levels and the integer centre
/// offset in units of the finer half-width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassKey {
    pub target_level: u32,
    pub source_level: u32,
    pub dx: i64,
    pub dy: i64,
}

/// Tabulated p² × p² near-field block of one class (row = target node, col = source node).
pub type ClassBlock = Arc<Vec<C64>>;

/// Lazy accessor for the entries of the discrete operator.
pub struct KernelMatrix {
    pub tree: Arc<Tree>,
    pub kappa: f64,
    pub mode: KernelMode,
    /// κ² q(x_i) in operator mode, 1 otherwise.
    pub rowscale: Vec<f64>,
    pub basis: BasisSet,
    pub interp: InterpOperator,
    pub quad_tol: f64,
    nodes: Vec<f64>,
    quads: BTreeMap<u32, LevelQuad>,
    classes: HashMap<ClassKey, ClassBlock>,
    /// Per target leaf index: (source leaf index, class block), sorted by source.
    near: Vec<Vec<(usize, ClassBlock)>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl KernelMatrix {
    /// Builds the accessor and tabulates every near-field class of the tree.
    pub fn new(tree: Arc<Tree>, kappa: f64, mode: KernelMode, q: &[f64], quad_tol: f64) -> Result<Self> {
        let n = tree.n_points();
        if mode == KernelMode::Operator && q.len() != n {
            return Err(Error::Dimension { expected: n, got: q.len() });
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
        }
        let p = tree.p();
        let basis = BasisSet::new(p);
        let interp = interp_matrix(p)?;
        let rowscale = match mode {
            KernelMode::Operator => q.iter().map(|v| kappa * kappa * v).collect(),
            _ => vec![1.0; n],
        };
        let mut quads = BTreeMap::new();
        if mode != KernelMode::Point {
            let levels: std::collections::BTreeSet<u32> = tree.leaves.iter().map(|&l| tree.boxes[l].level).collect();
            let built: Vec<(u32, Result<LevelQuad>)> = levels
                .into_par_iter()
                .map(|l| {
                    let beta = tree.cfg.domain_half_width / f64::from(1u32 << l);
                    (l, LevelQuad::new(kappa, beta, quad_tol, &basis, &interp.qpinv))
                })
                .collect();
            for (l, q) in built {
                quads.insert(l, q?);
            }
        }
        let mut km = Self {
            tree,
            kappa,
            mode,
            rowscale,
            basis,
            interp,
            quad_tol,
            nodes: chebyshev_nodes(p),
            quads,
            classes: HashMap::new(),
            near: Vec::new(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        };
        km.tabulate();
        Ok(km)
    }

    pub fn n(&self) -> usize {
        self.tree.n_points()
    }

    pub fn p2(&self) -> usize {
        self.tree.p() * self.tree.p()
    }

    pub fn level_quad(&self, level: u32) -> Option<&LevelQuad> {
        self.quads.get(&level)
    }

    pub fn class_key(&self, target_leaf: usize, source_leaf: usize) -> ClassKey {
        let t = &self.tree.boxes[self.tree.leaves[target_leaf]];
        let s = &self.tree.boxes[self.tree.leaves[source_leaf]];
        let lmax = t.level.max(s.level);
        let cx = |i: u32, l: u32| (2 * i as i64 + 1) << (lmax - l);
        ClassKey {
            target_level: t.level,
            source_level: s.level,
            dx: cx(s.ix, s.level) - cx(t.ix, t.level),
            dy: cx(s.iy, s.level) - cx(t.iy, t.level),
        }
    }

    fn beta(&self, level: u32) -> f64 {
        self.tree.cfg.domain_half_width / f64::from(1u32 << level)
    }

    /// Reference coordinates of target node `a` relative to the source box of a class.
    fn class_xi(&self, key: &ClassKey, a: usize) -> [f64; 2] {
        let p = self.tree.p();
        let lmax = key.target_level.max(key.source_level);
        let unit = f64::from(1u32 << (lmax - key.source_level)).recip();
        let st = f64::from(1u32 << key.source_level) / f64::from(1u32 << key.target_level);
        let (n1, n2) = (self.nodes[a % p], self.nodes[a / p]);
        [-(key.dx as f64) * unit + st * n1, -(key.dy as f64) * unit + st * n2]
    }

    /// Kernel values K[a, j'] for one target node of a class (without row scaling / identity).
    fn class_row(&self, key: &ClassKey, a: usize) -> Vec<C64> {
        let p = self.tree.p();
        match self.mode {
            KernelMode::Point => {
                let bs = self.beta(key.source_level);
                let xi = self.class_xi(key, a);
                (0..p * p)
                    .map(|b| {
                        let (m1, m2) = (self.nodes[b % p], self.nodes[b / p]);
                        let r = bs * (xi[0] - m1).hypot(xi[1] - m2);
                        if r == 0.0 {
                            C64::new(0.0, 0.0)
                        } else {
                            green_r(self.kappa * r)
                        }
                    })
                    .collect()
            }
            _ => {
                let quad = &self.quads[&key.source_level];
                quad.w_all(self.class_xi(key, a), &self.basis, &self.interp.qpinv)
            }
        }
    }

    fn class_block(&self, key: &ClassKey) -> Vec<C64> {
        let p2 = self.p2();
        let mut out = Vec::with_capacity(p2 * p2);
        for a in 0..p2 {
            out.extend(self.class_row(key, a));
        }
        out
    }

    fn tabulate(&mut self) {
        let nl = self.tree.leaves.len();
        let mut keys = Vec::new();
        let mut pairs = Vec::with_capacity(nl);
        for t in 0..nl {
            let mut row = Vec::new();
            for &sb in &self.tree.near[t] {
                let s = self.tree.boxes[sb].leaf_index.expect("near list holds leaves");
                let key = self.class_key(t, s);
                keys.push(key);
                row.push((s, key));
            }
            row.sort_by_key(|e| e.0);
            pairs.push(row);
        }
        keys.sort_unstable();
        keys.dedup();
        let blocks: Vec<(ClassKey, ClassBlock)> =
            keys.par_iter().map(|k| (*k, Arc::new(self.class_block(k)))).collect();
        self.classes = blocks.into_iter().collect();
        self.near = pairs
            .into_iter()
            .map(|row| row.into_iter().map(|(s, k)| (s, Arc::clone(&self.classes[&k]))).collect())
            .collect();
    }

    /// Number of distinct tabulated classes.
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Distinct classes whose source leaves lie at `level`.
    pub fn classes_at_level(&self, level: u32) -> Vec<ClassKey> {
        let mut v: Vec<_> = self.classes.keys().filter(|k| k.source_level == level).copied().collect();
        v.sort_unstable();
        v
    }

    /// (cache hits, cache misses) recorded by `near_block` and `entry`.
    pub fn cache_stats(&self) -> (usize, usize) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    pub fn reset_cache_stats(&self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }

    /// Near-field list of a target leaf: (source leaf index, tabulated class).
    pub fn near_list(&self, target_leaf: usize) -> &[(usize, ClassBlock)] {
        &self.near[target_leaf]
    }

    fn near_class(&self, target_leaf: usize, source_leaf: usize) -> Option<&ClassBlock> {
        let row = &self.near[target_leaf];
        row.binary_search_by_key(&source_leaf, |e| e.0).ok().map(|i| &row[i].1)
    }

    #[inline]
    fn finish(&self, i: usize, j: usize, k: C64) -> C64 {
        let v = k * self.rowscale[i];
        if self.mode == KernelMode::Operator && i == j {
            v + 1.0
        } else {
            v
        }
    }

    #[inline]
    fn split_index(&self, i: usize) -> (usize, usize) {
        let leaf = self.tree.point_leaf[i] as usize;
        let start = self.tree.boxes[self.tree.leaves[leaf]].range.start;
        (leaf, i - start)
    }

    /// A_ij, using the tabulated class when the pair is in the near field.
    pub fn entry(&self, i: usize, j: usize) -> C64 {
        let (ti, a) = self.split_index(i);
        let (sj, b) = self.split_index(j);
        if let Some(cls) = self.near_class(ti, sj) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return self.finish(i, j, cls[a * self.p2() + b]);
        }
        self.finish(i, j, self.kernel_far(ti, a, sj, &[b])[0])
    }

    /// A_ij computed from scratch, bypassing the class cache.
    pub fn entry_uncached(&self, i: usize, j: usize) -> C64 {
        let (ti, a) = self.split_index(i);
        let (sj, b) = self.split_index(j);
        self.misses.fetch_add(1, Ordering::Relaxed);
        let key = self.class_key(ti, sj);
        self.finish(i, j, self.class_row(&key, a)[b])
    }

    /// Raw kernel values from target node (ti, a) to source nodes js of leaf sj.
    fn kernel_far(&self, ti: usize, a: usize, sj: usize, js: &[usize]) -> Vec<C64> {
        let key = self.class_key(ti, sj);
        let mut out = vec![C64::new(0.0, 0.0); js.len()];
        match self.mode {
            KernelMode::Point => {
                let row = self.class_row_point_select(&key, a, js);
                out.copy_from_slice(&row);
            }
            _ => {
                let quad = &self.quads[&key.source_level];
                quad.w_select(self.class_xi(&key, a), js, &self.basis, &self.interp.qpinv, &mut out);
            }
        }
        out
    }

    fn class_row_point_select(&self, key: &ClassKey, a: usize, js: &[usize]) -> Vec<C64> {
        let p = self.tree.p();
        let bs = self.beta(key.source_level);
        let xi = self.class_xi(key, a);
        js.iter()
            .map(|&b| {
                let (m1, m2) = (self.nodes[b % p], self.nodes[b / p]);
                let r = bs * (xi[0] - m1).hypot(xi[1] - m2);
                if r == 0.0 {
                    C64::new(0.0, 0.0)
                } else {
                    green_r(self.kappa * r)
                }
            })
            .collect()
    }

    /// Groups column indices by source leaf for repeated row evaluation.
    pub fn group_cols(&self, cols: &[usize]) -> ColGroups {
        let mut map: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (pos, &j) in cols.iter().enumerate() {
            let (leaf, b) = self.split_index(j);
            let e = map.entry(leaf).or_default();
            e.0.push(pos);
            e.1.push(b);
        }
        ColGroups { cols: cols.to_vec(), groups: map.into_iter().map(|(l, (p, b))| (l, p, b)).collect() }
    }

    /// Row i restricted to grouped columns.
    pub fn row_into(&self, i: usize, g: &ColGroups, out: &mut [C64]) {
        self.row_impl(i, g, out, false);
    }

    /// Row i of the unscaled kernel K (A = I + diag(rowscale)·K in operator mode).
    pub fn row_raw_into(&self, i: usize, g: &ColGroups, out: &mut [C64]) {
        self.row_impl(i, g, out, true);
    }

    fn row_impl(&self, i: usize, g: &ColGroups, out: &mut [C64], raw: bool) {
        let (ti, a) = self.split_index(i);
        let p2 = self.p2();
        let fin = |j: usize, k: C64| if raw { k } else { self.finish(i, j, k) };
        for (sj, pos, bs) in &g.groups {
            if let Some(cls) = self.near_class(ti, *sj) {
                self.hits.fetch_add(bs.len(), Ordering::Relaxed);
                for (&q, &b) in pos.iter().zip(bs) {
                    out[q] = fin(g.cols[q], cls[a * p2 + b]);
                }
            } else {
                let vals = self.kernel_far(ti, a, *sj, bs);
                for (k, &q) in pos.iter().enumerate() {
                    out[q] = fin(g.cols[q], vals[k]);
                }
            }
        }
    }

    fn block_impl(&self, rows: &[usize], cols: &[usize], raw: bool) -> DMatrix<C64> {
        let g = self.group_cols(cols);
        let mut m = DMatrix::zeros(rows.len(), cols.len());
        let data: Vec<Vec<C64>> = rows
            .par_iter()
            .map(|&i| {
                let mut r = vec![C64::new(0.0, 0.0); cols.len()];
                self.row_impl(i, &g, &mut r, raw);
                r
            })
            .collect();
        for (ri, r) in data.into_iter().enumerate() {
            for (ci, v) in r.into_iter().enumerate() {
                m[(ri, ci)] = v;
            }
        }
        m
    }

    /// Dense sub-block A[rows, cols].
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<C64> {
        self.block_impl(rows, cols, false)
    }

    /// Dense sub-block of the unscaled kernel K[rows, cols].
    pub fn block_raw(&self, rows: &[usize], cols: &[usize]) -> DMatrix<C64> {
        self.block_impl(rows, cols, true)
    }

    /// Near-field block of (target leaf, source leaf) with row scaling and identity applied.
    pub fn near_block(&self, target_leaf: usize, source_leaf: usize) -> Option<DMatrix<C64>> {
        let cls = self.near_class(target_leaf, source_leaf)?;
        self.hits.fetch_add(1, Ordering::Relaxed);
        let p2 = self.p2();
        let r0 = self.tree.boxes[self.tree.leaves[target_leaf]].range.start;
        let c0 = self.tree.boxes[self.tree.leaves[source_leaf]].range.start;
        Some(DMatrix::from_fn(p2, p2, |a, b| self.finish(r0 + a, c0 + b, cls[a * p2 + b])))
    }

    /// Entire matrix; intended for oracles on small problems.
    pub fn dense(&self) -> DMatrix<C64> {
        let idx: Vec<usize> = (0..self.n()).collect();
        self.block(&idx, &idx)
    }

    /// Row-major little-endian (re, im) f64 pairs of the dense matrix.
    pub fn dump_dense(&self, path: &Path) -> Result<()> {
        let n = self.n();
        if n > 5000 {
            return Err(Error::Config(format!("dense dump limited to N <= 5000, got {n}")));
        }
        let a = self.dense();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for i in 0..n {
            for j in 0..n {
                let v = a[(i, j)];
                f.write_all(&v.re.to_le_bytes())?;
                f.write_all(&v.im.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// W_{j'}(x; B) for an arbitrary point x and leaf index, all j'.
    pub fn potential_weights(&self, x: Point2D, leaf: usize) -> Vec<C64> {
        let b = &self.tree.boxes[self.tree.leaves[leaf]];
        let xi = [(x.x1 - b.center.x1) / b.half_width, (x.x2 - b.center.x2) / b.half_width];
        match self.mode {
            KernelMode::Point => {
                let p = self.tree.p();
                (0..p * p)
                    .map(|k| {
                        let y = Point2D::new(b.center.x1 + b.half_width * self.nodes[k % p], b.center.x2 + b.half_width * self.nodes[k / p]);
                        let r = x.dist(y);
                        if r == 0.0 {
                            C64::new(0.0, 0.0)
                        } else {
                            green_r(self.kappa * r)
                        }
                    })
                    .collect()
            }
            _ => self.quads[&b.level].w_all(xi, &self.basis, &self.interp.qpinv),
        }
    }

    /// Discrete volume potential Σ_B ∫_B G(x,y) ψ^B(y) dy at an arbitrary point.
    pub fn volume_potential_at(&self, x: Point2D, psi: &[C64]) -> C64 {
        let mut s = C64::new(0.0, 0.0);
        for (li, &leaf) in self.tree.leaves.iter().enumerate() {
            let r = self.tree.boxes[leaf].range.clone();
            let w = self.potential_weights(x, li);
            for (k, wk) in w.iter().enumerate() {
                s += wk * psi[r.start + k];
            }
        }
        s
    }
}

/// Column indices grouped by source leaf: (leaf index, positions in `cols`, local indices).
pub struct ColGroups {
    pub cols: Vec<usize>,
    pub groups: Vec<(usize, Vec<usize>, Vec<usize>)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_counts() {
        for p in 2..10 {
            let b = BasisSet::new(p);
            assert_eq!(b.np, p * (p + 1) / 2);
            assert_eq!(b.degrees[0], (0, 0));
            assert!(b.degrees.iter().all(|&(m, n)| m + n < p));
        }
    }

    #[test]
    fn gap_ref_values() {
        assert_eq!(gap_ref([0.5, 0.5]), 0.0);
        assert!((gap_ref([3.0, 0.0]) - 2.0).abs() < 1e-15);
        assert!((gap_ref([4.0, 5.0]) - 5.0).abs() < 1e-15);
    }
}
