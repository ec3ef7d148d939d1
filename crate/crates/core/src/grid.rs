//! Adaptive level-restricted quad-tree with per-leaf Chebyshev grids, frequency regimes,
//! cone hierarchy and (directional) interaction lists.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{chebyshev_nodes, chebyshev_t};
use crate::special::Point2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Low,
    High,
}

/// Scale used by the resolution test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionNorm {
    /// max error ≤ eps.
    Absolute,
    /// max error ≤ eps · max|f| over the box, absolute when that max is below eps.
    RelativeToBox,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeConfig {
    pub domain_center: Point2D,
    pub domain_half_width: f64,
    /// Chebyshev nodes per axis; leaves hold p² points.
    pub p: usize,
    pub kappa: f64,
    pub eps_grid: f64,
    /// A box of width w is high-frequency iff (κw)² > T.
    pub hf_threshold_t: f64,
    pub max_levels: u32,
    /// Refine uniformly down to this level before the adaptive rules apply.
    pub min_level: u32,
    /// Also require the incident field to be resolved on every leaf.
    pub refine_incident: bool,
    pub resolution: ResolutionNorm,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            domain_center: Point2D::new(0.0, 0.0),
            domain_half_width: 0.5,
            p: 8,
            kappa: 40.0,
            eps_grid: 1e-8,
            hf_threshold_t: 100.0,
            max_levels: 12,
            min_level: 0,
            refine_incident: false,
            resolution: ResolutionNorm::Absolute,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::Config(format!("p must be at least 2, got {}", self.p)));
        }
        if !(self.eps_grid > 0.0 && self.eps_grid < 1.0) {
            return Err(Error::Config(format!("eps_grid must lie in (0,1), got {}", self.eps_grid)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.domain_half_width > 0.0) {
            return Err(Error::Config("domain half width must be positive".into()));
        }
        if !(self.hf_threshold_t > 0.0) {
            return Err(Error::Config("hf_threshold_t must be positive".into()));
        }
        if self.min_level > self.max_levels {
            return Err(Error::Config("min_level exceeds max_levels".into()));
        }
        Ok(())
    }
}

/// A cone of directions at one tree level, identified by its axis index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeId {
    pub level: u32,
    pub axis_index: u32,
    pub axis: Point2D,
}

#[derive(Debug, Clone)]
pub struct QBox {
    pub id: usize,
    pub level: u32,
    /// Integer coordinates of the box at its level, in [0, 2^level).
    pub ix: u32,
    pub iy: u32,
    pub center: Point2D,
    pub half_width: f64,
    pub parent: Option<usize>,
    /// Morton order: (−,−), (+,−), (−,+), (+,+).
    pub children: Option<[usize; 4]>,
    pub regime: Regime,
    /// Global point indices owned by the box (contiguous for every box).
    pub range: Range<usize>,
    pub leaf_index: Option<usize>,
    /// Same-level boxes that are not separated, including the box itself.
    pub neighbors: Vec<usize>,
    pub il_low: Vec<usize>,
    /// Cone index of this box → separated same-level boxes with their mutual cone.
    pub il_high: BTreeMap<u32, Vec<(usize, u32)>>,
}

impl QBox {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_width
    }

    pub fn contains(&self, x: Point2D) -> bool {
        (x.x1 - self.center.x1).abs() <= self.half_width * (1.0 + 1e-14)
            && (x.x2 - self.center.x2).abs() <= self.half_width * (1.0 + 1e-14)
    }
}

#[derive(Debug, Clone)]
pub struct Tree {
    pub cfg: TreeConfig,
    /// Boxes in breadth-first order with Morton-ordered siblings; index 0 is the root.
    pub boxes: Vec<QBox>,
    pub levels: Vec<Vec<usize>>,
    /// Leaf box ids in depth-first Morton order.
    pub leaves: Vec<usize>,
    pub points: Vec<Point2D>,
    /// Leaf index (into `leaves`) owning each point.
    pub point_leaf: Vec<u32>,
    /// Number of cones per level (0 for low-frequency levels).
    pub cone_counts: Vec<u32>,
    /// Per leaf index: leaf ids whose interaction is evaluated directly.
    pub near: Vec<Vec<usize>>,
}

/// Tensor Chebyshev grid of a box, x1 fastest.
pub fn chebyshev_grid(center: Point2D, half_width: f64, p: usize) -> Vec<Point2D> {
    let t = chebyshev_nodes(p);
    let mut out = Vec::with_capacity(p * p);
    for &t2 in &t {
        for &t1 in &t {
            out.push(Point2D::new(center.x1 + half_width * t1, center.x2 + half_width * t2));
        }
    }
    out
}

/// Maps nodal values at p Chebyshev points on [-1,1] to interpolant values at the
/// 2p Chebyshev points of the two halves [-1,0] and [0,1].
pub struct ChildInterp {
    p: usize,
    /// (2p) × p row-major.
    e: Vec<f64>,
}

impl ChildInterp {
    pub fn new(p: usize) -> Self {
        let t = chebyshev_nodes(p);
        // values → coefficients: c_m = (2/p) Σ_k f_k T_m(t_k), halved for m = 0
        let mut tv = vec![0.0; p];
        let mut coef = vec![0.0; p * p];
        for (k, &tk) in t.iter().enumerate() {
            chebyshev_t(p, tk, &mut tv);
            for m in 0..p {
                let s = if m == 0 { 1.0 / p as f64 } else { 2.0 / p as f64 };
                coef[m * p + k] = s * tv[m];
            }
        }
        let mut e = vec![0.0; 2 * p * p];
        for half in 0..2 {
            let off = if half == 0 { -0.5 } else { 0.5 };
            for (a, &ta) in t.iter().enumerate() {
                let x = off + 0.5 * ta;
                chebyshev_t(p, x, &mut tv);
                let row = half * p + a;
                for k in 0..p {
                    let mut s = 0.0;
                    for m in 0..p {
                        s += tv[m] * coef[m * p + k];
                    }
                    e[row * p + k] = s;
                }
            }
        }
        Self { p, e }
    }

    /// Interpolant of the p×p nodal values `f` (x1 fastest) evaluated on the 2p×2p child grid,
    /// returned as (2p)×(2p) with x1 fastest.
    pub fn apply<T>(&self, f: &[T]) -> Vec<T>
    where
        T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    {
        let p = self.p;
        let q = 2 * p;
        // tmp[j][a] = Σ_i E[a,i] f[j][i]
        let mut tmp = vec![T::default(); p * q];
        for j in 0..p {
            for a in 0..q {
                let mut s = T::default();
                for i in 0..p {
                    s = s + f[j * p + i] * self.e[a * p + i];
                }
                tmp[j * q + a] = s;
            }
        }
        let mut out = vec![T::default(); q * q];
        for b in 0..q {
            for a in 0..q {
                let mut s = T::default();
                for j in 0..p {
                    s = s + tmp[j * q + a] * self.e[b * p + j];
                }
                out[b * q + a] = s;
            }
        }
        out
    }
}

fn child_grid_points(center: Point2D, half_width: f64, p: usize) -> Vec<Point2D> {
    // the 2p x 2p grid formed by the four children's grids, x1 fastest
    let t = chebyshev_nodes(p);
    let mut c = Vec::with_capacity(2 * p);
    for off in [-0.5, 0.5] {
        for &tk in &t {
            c.push(off + 0.5 * tk);
        }
    }
    let mut out = Vec::with_capacity(4 * p * p);
    for &t2 in &c {
        for &t1 in &c {
            out.push(Point2D::new(center.x1 + half_width * t1, center.x2 + half_width * t2));
        }
    }
    out
}

fn within_tolerance(err: f64, fmax: f64, eps: f64, norm: ResolutionNorm) -> bool {
    match norm {
        ResolutionNorm::Absolute => err <= eps,
        ResolutionNorm::RelativeToBox => {
            if fmax < eps {
                err <= eps
            } else {
                err <= eps * fmax
            }
        }
    }
}

/// Whether the order-p tensor Chebyshev interpolant of `f` on the box reproduces `f`
/// at the grid points of the four children to within `eps`.
pub fn is_resolved(
    center: Point2D,
    half_width: f64,
    f: &dyn Fn(Point2D) -> f64,
    p: usize,
    eps: f64,
    norm: ResolutionNorm,
) -> bool {
    is_resolved_with(&ChildInterp::new(p), center, half_width, f, eps, norm)
}

fn is_resolved_with(
    ci: &ChildInterp,
    center: Point2D,
    half_width: f64,
    f: &dyn Fn(Point2D) -> f64,
    eps: f64,
    norm: ResolutionNorm,
) -> bool {
    let p = ci.p;
    let vals: Vec<f64> = chebyshev_grid(center, half_width, p).into_iter().map(f).collect();
    let interp = ci.apply(&vals);
    let truth: Vec<f64> = child_grid_points(center, half_width, p).into_iter().map(f).collect();
    let mut err = 0.0f64;
    let mut fmax = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in interp.iter().zip(&truth) {
        err = err.max((a - b).abs());
        fmax = fmax.max(b.abs());
    }
    within_tolerance(err, fmax, eps, norm)
}

fn is_resolved_complex(
    ci: &ChildInterp,
    center: Point2D,
    half_width: f64,
    f: &dyn Fn(Point2D) -> Complex64,
    eps: f64,
    norm: ResolutionNorm,
) -> bool {
    let p = ci.p;
    let vals: Vec<Complex64> = chebyshev_grid(center, half_width, p).into_iter().map(f).collect();
    let interp = ci.apply(&vals);
    let truth: Vec<Complex64> = child_grid_points(center, half_width, p).into_iter().map(f).collect();
    let mut err = 0.0f64;
    let mut fmax = vals.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    for (a, b) in interp.iter().zip(&truth) {
        err = err.max((a - b).norm());
        fmax = fmax.max(b.norm());
    }
    within_tolerance(err, fmax, eps, norm)
}

#[derive(Clone)]
struct RawBox {
    level: u32,
    ix: u32,
    iy: u32,
    parent: Option<usize>,
    children: Option<[usize; 4]>,
}

struct Builder<'a> {
    cfg: &'a TreeConfig,
    raw: Vec<RawBox>,
    index: HashMap<(u32, u32, u32), usize>,
}

impl<'a> Builder<'a> {
    fn width(&self, level: u32) -> f64 {
        2.0 * self.cfg.domain_half_width / f64::from(1u32 << level)
    }

    fn center(&self, level: u32, ix: u32, iy: u32) -> Point2D {
        let w = self.width(level);
        let c = self.cfg.domain_center;
        let h = self.cfg.domain_half_width;
        Point2D::new(c.x1 - h + (ix as f64 + 0.5) * w, c.x2 - h + (iy as f64 + 0.5) * w)
    }

    fn split(&mut self, id: usize) -> Result<[usize; 4]> {
        let b = self.raw[id].clone();
        if b.level + 1 > self.cfg.max_levels {
            return Err(Error::Refinement { box_id: id, level: b.level, max_levels: self.cfg.max_levels });
        }
        let mut ids = [0usize; 4];
        for (k, slot) in ids.iter_mut().enumerate() {
            let (bx, by) = ((k & 1) as u32, (k >> 1) as u32);
            let nb = RawBox {
                level: b.level + 1,
                ix: 2 * b.ix + bx,
                iy: 2 * b.iy + by,
                parent: Some(id),
                children: None,
            };
            *slot = self.raw.len();
            self.index.insert((nb.level, nb.ix, nb.iy), *slot);
            self.raw.push(nb);
        }
        self.raw[id].children = Some(ids);
        Ok(ids)
    }

    /// A leaf must split if some adjacent leaf is two or more levels finer.
    fn violates_restriction(&self, id: usize) -> bool {
        let b = &self.raw[id];
        let n = 1i64 << b.level;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (jx, jy) = (b.ix as i64 + dx, b.iy as i64 + dy);
                if jx < 0 || jy < 0 || jx >= n || jy >= n {
                    continue;
                }
                let Some(&nid) = self.index.get(&(b.level, jx as u32, jy as u32)) else {
                    continue;
                };
                let Some(ch) = self.raw[nid].children else { continue };
                for &c in &ch {
                    let cb = &self.raw[c];
                    if cb.children.is_none() {
                        continue;
                    }
                    // child touches b iff its integer box at level+1 is adjacent to b's span
                    let (lo_x, lo_y) = (2 * b.ix as i64 - 1, 2 * b.iy as i64 - 1);
                    let (hi_x, hi_y) = (2 * b.ix as i64 + 2, 2 * b.iy as i64 + 2);
                    let (cx, cy) = (cb.ix as i64, cb.iy as i64);
                    if cx >= lo_x && cx <= hi_x && cy >= lo_y && cy <= hi_y {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// Smallest power of two ≥ x (at least 1).
fn pow2_at_least(x: f64) -> u32 {
    let mut n = 1u32;
    while (n as f64) < x {
        n *= 2;
    }
    n
}

/// Builds the tree, enforces level restriction, orders points and computes all lists.
pub fn build_tree(
    cfg: &TreeConfig,
    q: &dyn Fn(Point2D) -> f64,
    u_inc: &dyn Fn(Point2D) -> Complex64,
) -> Result<Tree> {
    cfg.validate()?;
    let ci = ChildInterp::new(cfg.p);
    let mut b = Builder { cfg, raw: Vec::new(), index: HashMap::new() };
    b.raw.push(RawBox { level: 0, ix: 0, iy: 0, parent: None, children: None });
    b.index.insert((0, 0, 0), 0);
    let mut queue = VecDeque::from([0usize]);
    while let Some(id) = queue.pop_front() {
        let (level, ix, iy) = (b.raw[id].level, b.raw[id].ix, b.raw[id].iy);
        let w = b.width(level);
        let c = b.center(level, ix, iy);
        let h = 0.5 * w;
        let high = (cfg.kappa * w).powi(2) > cfg.hf_threshold_t;
        let split = level < cfg.min_level
            || high
            || !is_resolved_with(&ci, c, h, q, cfg.eps_grid, cfg.resolution)
            || (cfg.refine_incident && !is_resolved_complex(&ci, c, h, u_inc, cfg.eps_grid, cfg.resolution));
        if split {
            for ch in b.split(id)? {
                queue.push_back(ch);
            }
        }
    }
    enforce_level_restriction_raw(&mut b)?;
    finish(cfg, &b.raw)
}

fn enforce_level_restriction_raw(b: &mut Builder) -> Result<()> {
    loop {
        let leaves: Vec<usize> = (0..b.raw.len()).filter(|&i| b.raw[i].children.is_none()).collect();
        let to_split: Vec<usize> = leaves.into_iter().filter(|&i| b.violates_restriction(i)).collect();
        if to_split.is_empty() {
            return Ok(());
        }
        for id in to_split {
            b.split(id)?;
        }
    }
}

/// Splits leaves until adjacent leaves differ by at most one level.
pub fn enforce_level_restriction(tree: &Tree) -> Result<Tree> {
    let cfg = tree.cfg.clone();
    let mut b = Builder { cfg: &cfg, raw: Vec::new(), index: HashMap::new() };
    for bx in &tree.boxes {
        b.index.insert((bx.level, bx.ix, bx.iy), bx.id);
        b.raw.push(RawBox { level: bx.level, ix: bx.ix, iy: bx.iy, parent: bx.parent, children: bx.children });
    }
    enforce_level_restriction_raw(&mut b)?;
    finish(&cfg, &b.raw)
}

/// Builds a tree from an explicit set of leaves given as (level, ix, iy); used by tests
/// and by callers that construct their own refinement. Missing ancestors are created.
pub fn tree_from_leaves(cfg: &TreeConfig, leaves: &[(u32, u32, u32)]) -> Result<Tree> {
    cfg.validate()?;
    let mut b = Builder { cfg, raw: Vec::new(), index: HashMap::new() };
    b.raw.push(RawBox { level: 0, ix: 0, iy: 0, parent: None, children: None });
    b.index.insert((0, 0, 0), 0);
    for &(level, ix, iy) in leaves {
        for l in 1..=level {
            let s = level - l;
            let key = (l, ix >> s, iy >> s);
            if !b.index.contains_key(&key) {
                let pkey = (l - 1, key.1 >> 1, key.2 >> 1);
                let pid = b.index[&pkey];
                b.split(pid)?;
            }
        }
    }
    finish(cfg, &b.raw)
}

/// Uniform tree with all leaves at `levels`.
pub fn uniform_tree(mut cfg: TreeConfig, levels: u32) -> Result<Tree> {
    cfg.min_level = levels;
    cfg.max_levels = cfg.max_levels.max(levels);
    let n = 1u32 << levels;
    let leaves: Vec<_> = (0..n).flat_map(|iy| (0..n).map(move |ix| (levels, ix, iy))).collect();
    let tree = tree_from_leaves(&cfg, &leaves)?;
    if tree.leaves.iter().any(|&l| tree.boxes[l].regime == Regime::High) {
        return Err(Error::Config(format!(
            "uniform tree at level {levels} has high-frequency leaves (kappa {}, T {})",
            cfg.kappa, cfg.hf_threshold_t
        )));
    }
    Ok(tree)
}

fn finish(cfg: &TreeConfig, raw: &[RawBox]) -> Result<Tree> {
    // renumber breadth-first with Morton siblings
    let mut order = Vec::with_capacity(raw.len());
    let mut new_id = vec![usize::MAX; raw.len()];
    let mut queue = VecDeque::from([0usize]);
    while let Some(id) = queue.pop_front() {
        new_id[id] = order.len();
        order.push(id);
        if let Some(ch) = raw[id].children {
            queue.extend(ch);
        }
    }
    let w0 = 2.0 * cfg.domain_half_width;
    let mut boxes: Vec<QBox> = order
        .iter()
        .enumerate()
        .map(|(nid, &old)| {
            let r = &raw[old];
            let w = w0 / f64::from(1u32 << r.level);
            let c = cfg.domain_center;
            let h = cfg.domain_half_width;
            QBox {
                id: nid,
                level: r.level,
                ix: r.ix,
                iy: r.iy,
                center: Point2D::new(c.x1 - h + (r.ix as f64 + 0.5) * w, c.x2 - h + (r.iy as f64 + 0.5) * w),
                half_width: 0.5 * w,
                parent: r.parent.map(|p| new_id[p]),
                children: r.children.map(|ch| ch.map(|c| new_id[c])),
                regime: if (cfg.kappa * w).powi(2) > cfg.hf_threshold_t { Regime::High } else { Regime::Low },
                range: 0..0,
                leaf_index: None,
                neighbors: Vec::new(),
                il_low: Vec::new(),
                il_high: BTreeMap::new(),
            }
        })
        .collect();
    let depth = boxes.iter().map(|b| b.level).max().unwrap_or(0);
    let mut levels = vec![Vec::new(); depth as usize + 1];
    for b in &boxes {
        levels[b.level as usize].push(b.id);
    }

    // depth-first point ordering
    let p = cfg.p;
    let mut leaves = Vec::new();
    let mut points = Vec::new();
    let mut point_leaf = Vec::new();
    fn dfs(
        id: usize,
        boxes: &mut [QBox],
        p: usize,
        leaves: &mut Vec<usize>,
        points: &mut Vec<Point2D>,
        point_leaf: &mut Vec<u32>,
    ) {
        let start = points.len();
        if let Some(ch) = boxes[id].children {
            for c in ch {
                dfs(c, boxes, p, leaves, points, point_leaf);
            }
        } else {
            let li = leaves.len();
            leaves.push(id);
            boxes[id].leaf_index = Some(li);
            points.extend(chebyshev_grid(boxes[id].center, boxes[id].half_width, p));
            point_leaf.extend(std::iter::repeat(li as u32).take(p * p));
        }
        boxes[id].range = start..points.len();
    }
    dfs(0, &mut boxes, p, &mut leaves, &mut points, &mut point_leaf);

    // cone counts
    let mut cone_counts = vec![0u32; depth as usize + 1];
    if let Some(f) = (0..=depth).rev().find(|&l| levels[l as usize].iter().any(|&i| boxes[i].regime == Regime::High)) {
        let wf = w0 / f64::from(1u32 << f);
        let nf = pow2_at_least(PI * cfg.kappa * wf).max(2);
        for l in 0..=f {
            cone_counts[l as usize] = nf << (f - l);
        }
    }

    let mut tree = Tree { cfg: cfg.clone(), boxes, levels, leaves, points, point_leaf, cone_counts, near: Vec::new() };
    build_lists(&mut tree);
    Ok(tree)
}

/// Cone index of the integer direction (dx, dy) among n equal wedges starting at angle 0.
/// Opposite directions map to cones differing by exactly n/2.
pub fn cone_of(dx: f64, dy: f64, n: u32) -> u32 {
    let positive_half = dy > 0.0 || (dy == 0.0 && dx > 0.0);
    let (ax, ay) = if positive_half { (dx, dy) } else { (-dx, -dy) };
    let th = ay.atan2(ax).max(0.0);
    let k = ((th / (2.0 * PI / n as f64)).floor() as u32).min(n / 2 - 1);
    if positive_half {
        k
    } else {
        (k + n / 2) % n
    }
}

/// Populates neighbor lists, interaction lists and per-leaf near-field lists.
pub fn build_lists(tree: &mut Tree) {
    let kappa = tree.cfg.kappa;
    let n_boxes = tree.boxes.len();
    for b in tree.boxes.iter_mut() {
        b.neighbors.clear();
        b.il_low.clear();
        b.il_high.clear();
    }
    tree.boxes[0].neighbors.push(0);
    for level in 1..tree.levels.len() {
        let ids = tree.levels[level].clone();
        for &id in &ids {
            let b = &tree.boxes[id];
            let parent = b.parent.expect("non-root box has a parent");
            let w = b.width();
            let (bix, biy, bc, regime) = (b.ix as i64, b.iy as i64, b.center, b.regime);
            let n_cones = tree.cone_counts[level];
            let mut neighbors = Vec::new();
            let mut il_low = Vec::new();
            let mut il_high: BTreeMap<u32, Vec<(usize, u32)>> = BTreeMap::new();
            for &pn in &tree.boxes[parent].neighbors {
                let Some(ch) = tree.boxes[pn].children else { continue };
                for &a in &ch {
                    let ab = &tree.boxes[a];
                    let (dx, dy) = (ab.ix as i64 - bix, ab.iy as i64 - biy);
                    let adjacent = dx.abs() <= 1 && dy.abs() <= 1;
                    let separated = match regime {
                        Regime::Low => !adjacent,
                        Regime::High => {
                            let gx = ((ab.center.x1 - bc.x1).abs() - 0.5 * w).max(0.0);
                            let gy = ((ab.center.x2 - bc.x2).abs() - 0.5 * w).max(0.0);
                            !adjacent && gx.hypot(gy) >= kappa * w * w
                        }
                    };
                    if !separated {
                        neighbors.push(a);
                    } else if regime == Regime::Low {
                        il_low.push(a);
                    } else {
                        let l = cone_of(dx as f64, dy as f64, n_cones);
                        il_high.entry(l).or_default().push((a, (l + n_cones / 2) % n_cones));
                    }
                }
            }
            neighbors.sort_unstable();
            il_low.sort_unstable();
            for v in il_high.values_mut() {
                v.sort_unstable();
            }
            let b = &mut tree.boxes[id];
            b.neighbors = neighbors;
            b.il_low = il_low;
            b.il_high = il_high;
        }
    }

    // near field per leaf
    let mut near = vec![Vec::new(); tree.leaves.len()];
    for (li, &leaf) in tree.leaves.iter().enumerate() {
        let mut list = Vec::new();
        let mut anc = Some(leaf);
        while let Some(a) = anc {
            for &nb in &tree.boxes[a].neighbors {
                if tree.boxes[nb].is_leaf() {
                    list.push(nb);
                } else if a == leaf {
                    collect_leaves(tree, nb, &mut list);
                }
            }
            anc = tree.boxes[a].parent;
        }
        list.sort_unstable();
        list.dedup();
        near[li] = list;
    }
    debug_assert!(n_boxes == tree.boxes.len());
    tree.near = near;
}

fn collect_leaves(tree: &Tree, id: usize, out: &mut Vec<usize>) {
    match tree.boxes[id].children {
        None => out.push(id),
        Some(ch) => {
            for c in ch {
                collect_leaves(tree, c, out);
            }
        }
    }
}

/// One line of the tree dump.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoxRecord {
    pub id: usize,
    pub level: u32,
    pub center: [f64; 2],
    pub half_width: f64,
    pub regime: Regime,
    pub leaf: bool,
    pub parent_id: Option<usize>,
}

impl Tree {
    /// Box records in id order.
    pub fn records(&self) -> Vec<BoxRecord> {
        self.boxes
            .iter()
            .map(|b| BoxRecord {
                id: b.id,
                level: b.level,
                center: [b.center.x1, b.center.x2],
                half_width: b.half_width,
                regime: b.regime,
                leaf: b.is_leaf(),
                parent_id: b.parent,
            })
            .collect()
    }

    /// Writes one JSON record per box.
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in self.records() {
            serde_json::to_writer(&mut f, &r)?;
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn depth(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    pub fn p(&self) -> usize {
        self.cfg.p
    }

    /// Leaf box containing a point of the domain.
    pub fn locate(&self, x: Point2D) -> Option<usize> {
        if !self.boxes[0].contains(x) {
            return None;
        }
        let mut id = 0;
        while let Some(ch) = self.boxes[id].children {
            let c = self.boxes[id].center;
            let k = usize::from(x.x1 >= c.x1) + 2 * usize::from(x.x2 >= c.x2);
            id = ch[k];
        }
        Some(id)
    }

    /// Cones at a level, empty for low-frequency levels.
    pub fn cones(&self, level: u32) -> Vec<ConeId> {
        let n = self.cone_counts.get(level as usize).copied().unwrap_or(0);
        (0..n)
            .map(|k| {
                let th = (k as f64 + 0.5) * 2.0 * PI / n as f64;
                ConeId { level, axis_index: k, axis: Point2D::new(th.cos(), th.sin()) }
            })
            .collect()
    }

    /// Half-angle of the cones at a level.
    pub fn cone_half_angle(&self, level: u32) -> Option<f64> {
        let n = *self.cone_counts.get(level as usize)?;
        (n > 0).then(|| PI / n as f64)
    }

    /// Leaf ids reachable from `id`.
    pub fn leaves_under(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        collect_leaves(self, id, &mut out);
        out
    }

    /// Whether two boxes share at least one boundary point.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        let (x, y) = (&self.boxes[a], &self.boxes[b]);
        let gap_x = (x.center.x1 - y.center.x1).abs() - x.half_width - y.half_width;
        let gap_y = (x.center.x2 - y.center.x2).abs() - x.half_width - y.half_width;
        let tol = 1e-12 * self.cfg.domain_half_width;
        gap_x <= tol && gap_y <= tol
    }

    /// Largest level difference between adjacent leaves.
    pub fn max_adjacent_level_jump(&self) -> u32 {
        let mut worst = 0;
        for (i, &a) in self.leaves.iter().enumerate() {
            for &b in &self.leaves[i + 1..] {
                if self.adjacent(a, b) {
                    worst = worst.max(self.boxes[a].level.abs_diff(self.boxes[b].level));
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cone_of_is_antisymmetric() {
        for n in [2u32, 4, 8, 16, 64] {
            for dx in -7i32..=7 {
                for dy in -7i32..=7 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let a = cone_of(dx as f64, dy as f64, n);
                    let b = cone_of(-dx as f64, -dy as f64, n);
                    assert_eq!((a + n / 2) % n, b);
                    assert!(a < n);
                }
            }
        }
    }

    #[test]
    fn pow2() {
        assert_eq!(pow2_at_least(0.3), 1);
        assert_eq!(pow2_at_least(4.0), 4);
        assert_eq!(pow2_at_least(4.1), 8);
    }

    #[test]
    fn child_interp_exact_on_polynomials() {
        let p = 6;
        let ci = ChildInterp::new(p);
        let f = |x: Point2D| x.x1.powi(5) - 2.0 * x.x1 * x.x2.powi(3) + 0.5;
        let vals: Vec<f64> = chebyshev_grid(Point2D::default(), 1.0, p).into_iter().map(f).collect();
        let out = ci.apply(&vals);
        for (v, x) in out.iter().zip(child_grid_points(Point2D::default(), 1.0, p)) {
            assert!((v - f(x)).abs() < 1e-12);
        }
    }
}
