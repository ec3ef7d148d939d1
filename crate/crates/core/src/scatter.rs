//! Scattering problem setup, solver dispatch, fields on the grid and the residual error
//! function E(x).

use std::path::Path;
use std::sync::Arc;
use crate::clock::Stopwatch;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dafmm::Dafmm;
use crate::discretize::{KernelMatrix, KernelMode};
use crate::error::{Error, Result};
use crate::grid::{build_tree, ResolutionNorm, Tree, TreeConfig};
use crate::hodlr::{Hodlr, HodlrConfig, HodlrMode};
use crate::krylov::{gmres, GmresConfig, History};
use crate::nca::NcaConfig;
use crate::special::Point2D;

type C64 = Complex64;

/// Version tag written into report.json.
pub const REPORT_SCHEMA_VERSION: &str = "1.0";

/// Wavenumbers inside this range are the tested envelope; others only raise a warning.
pub const KAPPA_RANGE: (f64, f64) = (40.0, 300.0);

/// Contrast sampled on a uniform grid and interpolated with Catmull-Rom splines.
/// `values[j][i]` is the value at x1 = x1_range.0 + i·h1, x2 = x2_range.0 + j·h2.
/// Zero outside the tabulated rectangle.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TabulatedContrast {
    pub x1_range: [f64; 2],
    pub x2_range: [f64; 2],
    pub values: Vec<Vec<f64>>,
}

impl TabulatedContrast {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let t: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let ny = self.values.len();
        let nx = self.values.first().map_or(0, Vec::len);
        if nx < 2 || ny < 2 {
            return Err(Error::Config("tabulated contrast needs at least 2x2 samples".into()));
        }
        if self.values.iter().any(|r| r.len() != nx) {
            return Err(Error::Config("tabulated contrast rows differ in length".into()));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("tabulated contrast has non-finite samples".into()));
        }
        if !(self.x1_range[1] > self.x1_range[0] && self.x2_range[1] > self.x2_range[0]) {
            return Err(Error::Config("tabulated contrast ranges must be increasing".into()));
        }
        Ok(())
    }

    pub fn value(&self, x: Point2D) -> f64 {
        let ny = self.values.len();
        let nx = self.values[0].len();
        let [a1, b1] = self.x1_range;
        let [a2, b2] = self.x2_range;
        if x.x1 < a1 || x.x1 > b1 || x.x2 < a2 || x.x2 > b2 {
            return 0.0;
        }
        let (i, wx) = catmull_rom((x.x1 - a1) / (b1 - a1) * (nx - 1) as f64, nx);
        let (j, wy) = catmull_rom((x.x2 - a2) / (b2 - a2) * (ny - 1) as f64, ny);
        let mut s = 0.0;
        for (dj, wj) in wy.iter().enumerate() {
            let row = &self.values[(j + dj).saturating_sub(1).min(ny - 1)];
            for (di, wi) in wx.iter().enumerate() {
                s += wj * wi * row[(i + di).saturating_sub(1).min(nx - 1)];
            }
        }
        s
    }
}

/// Base index and the four Catmull-Rom weights for samples base-1..base+2 (clamped).
fn catmull_rom(t: f64, n: usize) -> (usize, [f64; 4]) {
    let i = (t.floor() as usize).min(n - 2);
    let u = t - i as f64;
    let (u2, u3) = (u * u, u * u * u);
    let w = [
        0.5 * (-u3 + 2.0 * u2 - u),
        0.5 * (3.0 * u3 - 5.0 * u2 + 2.0),
        0.5 * (-3.0 * u3 + 4.0 * u2 + u),
        0.5 * (u3 - u2),
    ];
    (i, w)
}

/// Contrast function q(x).
#[derive(Debug, Clone, PartialEq)]
pub enum Contrast {
    /// 1.5·exp(−160|x|²).
    Gaussian,
    /// Σ 1.5·exp(−|x − x_j|²/a) over seeded, well-separated centres.
    MultiGaussian { seed: u64, a: f64, centers: Vec<Point2D> },
    /// (1 − sin⁵⁰⁰(θ/2))·exp(−2000(0.1 − r²)²).
    Cavity,
    /// 4(x₂ − 0.1)(1 − erf(25(|x| − 0.3))).
    Lens,
    Custom(TabulatedContrast),
}

/// Minimum distance between multi-Gaussian centres.
pub const MULTI_MIN_SEPARATION: f64 = 0.4;
/// Half-width of the square the multi-Gaussian centres are drawn from.
pub const MULTI_CENTER_HALF_WIDTH: f64 = 1.5;

impl Contrast {
    /// `count` centres drawn uniformly from [−1.5, 1.5]² by rejection with minimum pairwise
    /// separation 0.4.
    pub fn multi_gaussian(seed: u64, count: usize, a: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::Config(format!("multi-Gaussian width must be positive, got {a}")));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let h = MULTI_CENTER_HALF_WIDTH;
        let mut centers: Vec<Point2D> = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while centers.len() < count {
            attempts += 1;
            if attempts > 1_000_000 {
                return Err(Error::Config(format!("could not place {count} centres with separation {MULTI_MIN_SEPARATION}")));
            }
            let c = Point2D::new(rng.gen_range(-h..=h), rng.gen_range(-h..=h));
            if centers.iter().all(|d| d.dist(c) >= MULTI_MIN_SEPARATION) {
                centers.push(c);
            }
        }
        Ok(Self::MultiGaussian { seed, a, centers })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::MultiGaussian { .. } => "multi",
            Self::Cavity => "cavity",
            Self::Lens => "lens",
            Self::Custom(_) => "custom",
        }
    }

    pub fn value(&self, x: Point2D) -> f64 {
        match self {
            Self::Gaussian => 1.5 * (-160.0 * (x.x1 * x.x1 + x.x2 * x.x2)).exp(),
            Self::MultiGaussian { a, centers, .. } => {
                centers.iter().map(|c| 1.5 * (-(x.x1 - c.x1).powi(2) / a - (x.x2 - c.x2).powi(2) / a).exp()).sum()
            }
            Self::Cavity => {
                let r2 = x.x1 * x.x1 + x.x2 * x.x2;
                let mut theta = x.x2.atan2(x.x1);
                if theta < 0.0 {
                    theta += 2.0 * std::f64::consts::PI;
                }
                (1.0 - (0.5 * theta).sin().powi(500)) * (-2000.0 * (0.1 - r2).powi(2)).exp()
            }
            Self::Lens => {
                let r = x.norm();
                4.0 * (x.x2 - 0.1) * (1.0 - libm::erf(25.0 * (r - 0.3)))
            }
            Self::Custom(t) => t.value(x),
        }
    }

    /// Default computational square (centre, half-width).
    pub fn default_domain(&self) -> (Point2D, f64) {
        match self {
            Self::Gaussian | Self::Lens => (Point2D::new(0.0, 0.0), 0.5),
            Self::Cavity => (Point2D::new(0.0, 0.0), 1.5),
            Self::MultiGaussian { .. } => (Point2D::new(0.0, 0.0), 2.0),
            Self::Custom(t) => {
                let c = Point2D::new(0.5 * (t.x1_range[0] + t.x1_range[1]), 0.5 * (t.x2_range[0] + t.x2_range[1]));
                let h = 0.5 * (t.x1_range[1] - t.x1_range[0]).max(t.x2_range[1] - t.x2_range[0]);
                (c, h)
            }
        }
    }
}

/// Plane wave exp(iκx₁).
pub fn incident_field(kappa: f64, x: Point2D) -> C64 {
    C64::new(0.0, kappa * x.x1).exp()
}

/// f(x) = −κ² q(x) u_inc(x).
pub fn rhs_value(contrast: &Contrast, kappa: f64, x: Point2D) -> C64 {
    -kappa * kappa * contrast.value(x) * incident_field(kappa, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    /// GMRES with DAFMM products.
    Gmres,
    /// HODLR direct solver at accuracy `hodlr_eps`.
    Hodlr,
    /// GMRES with DAFMM products, left-preconditioned by a rank-`hodlr_rank` HODLR solve.
    Hybrid,
    /// Dense LU of the assembled matrix; memory grows as 16·N² bytes.
    Dense,
}

impl SolverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gmres => "gmres",
            Self::Hodlr => "hodlr",
            Self::Hybrid => "hybrid",
            Self::Dense => "dense",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmres" => Ok(Self::Gmres),
            "hodlr" | "hodlr_direct" => Ok(Self::Hodlr),
            "hybrid" => Ok(Self::Hybrid),
            "dense" => Ok(Self::Dense),
            _ => Err(Error::Config(format!("unknown solver '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProblemConfig {
    pub contrast: Contrast,
    pub kappa: f64,
    pub domain_center: Point2D,
    pub domain_half_width: f64,
    /// Chebyshev nodes per axis (leaf size p²).
    pub p: usize,
    pub eps_grid: f64,
    pub eps_nca: f64,
    pub eps_gmres: f64,
    pub max_iters: usize,
    pub restart: Option<usize>,
    pub solver: SolverKind,
    /// Preconditioner rank r.
    pub hodlr_rank: usize,
    /// Direct-solver compression accuracy.
    pub hodlr_eps: f64,
    pub leaf_cluster_size: usize,
    pub hf_threshold_t: f64,
    pub max_levels: u32,
    pub min_level: u32,
    pub refine_incident: bool,
    pub quad_tol: f64,
    /// Quasi-random sample points for E(x), in addition to the leaf centres.
    pub error_samples: usize,
    /// Recorded in outputs; drives the multi-Gaussian centres.
    pub seed: u64,
}

impl ProblemConfig {
    /// Defaults with the contrast's own domain.
    pub fn new(contrast: Contrast, kappa: f64) -> Self {
        let (c, h) = contrast.default_domain();
        let seed = match &contrast {
            Contrast::MultiGaussian { seed, .. } => *seed,
            _ => 0,
        };
        Self {
            contrast,
            kappa,
            domain_center: c,
            domain_half_width: h,
            p: 8,
            eps_grid: 1e-8,
            eps_nca: 1e-10,
            eps_gmres: 1e-10,
            max_iters: 400,
            restart: None,
            solver: SolverKind::Gmres,
            hodlr_rank: 15,
            hodlr_eps: 1e-10,
            leaf_cluster_size: 256,
            hf_threshold_t: 100.0,
            max_levels: 12,
            min_level: 0,
            refine_incident: false,
            quad_tol: 1e-12,
            error_samples: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        for (name, v) in [
            ("eps_grid", self.eps_grid),
            ("eps_nca", self.eps_nca),
            ("eps_gmres", self.eps_gmres),
            ("hodlr_eps", self.hodlr_eps),
            ("quad_tol", self.quad_tol),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        if self.hodlr_rank == 0 {
            return Err(Error::Config("hodlr_rank must be at least 1".into()));
        }
        if self.leaf_cluster_size == 0 {
            return Err(Error::Config("leaf_cluster_size must be at least 1".into()));
        }
        if self.restart == Some(0) {
            return Err(Error::Config("restart must be at least 1".into()));
        }
        if let Contrast::Custom(t) = &self.contrast {
            t.validate()?;
        }
        self.tree_config().validate()
    }

    pub fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            domain_center: self.domain_center,
            domain_half_width: self.domain_half_width,
            p: self.p,
            kappa: self.kappa,
            eps_grid: self.eps_grid,
            hf_threshold_t: self.hf_threshold_t,
            max_levels: self.max_levels,
            min_level: self.min_level,
            refine_incident: self.refine_incident,
            resolution: ResolutionNorm::Absolute,
        }
    }

    pub fn kappa_in_range(&self) -> bool {
        (KAPPA_RANGE.0..=KAPPA_RANGE.1).contains(&self.kappa)
    }
}

/// Wall-clock seconds per phase. Phases a solver does not use stay at zero.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct Timings {
    pub grid: f64,
    /// Kernel accessor construction, including near-field tabulation.
    pub assembly: f64,
    /// NCA pivot selection.
    pub pivots: f64,
    /// NCA translation and M2L operators.
    pub operators: f64,
    /// HODLR build and factorization.
    pub factorize: f64,
    /// Krylov iterations or the direct solve.
    pub solve: f64,
    /// Scattered field at the grid points.
    pub field: f64,
    /// E(x) sampling.
    pub error: f64,
    /// Time to ψ for the chosen solver: factorize + solve, plus the DAFMM build for the
    /// iterative solvers.
    pub solver_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolveReport {
    pub schema_version: String,
    pub contrast: String,
    pub seed: u64,
    pub kappa: f64,
    pub kappa_in_range: bool,
    pub domain_center: [f64; 2],
    pub domain_half_width: f64,
    pub p: usize,
    pub eps_grid: f64,
    pub eps_nca: f64,
    pub eps_gmres: f64,
    pub solver: SolverKind,
    pub hodlr_rank: Option<usize>,
    pub hodlr_eps: Option<f64>,
    pub n: usize,
    pub leaves: usize,
    pub depth: u32,
    pub nca_max_rank: usize,
    pub hodlr_max_rank: Option<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// ‖Aψ − f‖₂/‖f‖₂ with the DAFMM product.
    pub final_residual: f64,
    /// Histories record the true (unpreconditioned) relative residual.
    pub residual_kind: String,
    /// Max of E(x) over the quasi-random samples and leaf centres.
    pub max_error: f64,
    /// Max of E at the grid points, |(Aψ − f)_i|/κ².
    pub max_error_grid: f64,
    pub error_points: usize,
    pub timings: Timings,
    pub threads: usize,
    pub warnings: Vec<String>,
    pub failure: Option<String>,
}

/// Grid, kernel accessor and right-hand side of one problem.
pub struct Problem {
    pub cfg: ProblemConfig,
    pub tree: Arc<Tree>,
    pub km: Arc<KernelMatrix>,
    pub q: Vec<f64>,
    pub u_inc: Vec<C64>,
    pub f: Vec<C64>,
    pub timings: Timings,
    pub warnings: Vec<String>,
}

/// Outcome of one solver run on an assembled problem.
pub struct SolverRun {
    pub kind: SolverKind,
    pub psi: Vec<C64>,
    pub history: History,
    pub hodlr_max_rank: Option<usize>,
    pub factorize_seconds: f64,
    pub solve_seconds: f64,
    pub failure: Option<String>,
}

impl Problem {
    pub fn assemble(cfg: &ProblemConfig) -> Result<Self> {
        cfg.validate()?;
        let mut warnings = Vec::new();
        if !cfg.kappa_in_range() {
            warnings.push(format!(
                "kappa {} is outside the tested range [{}, {}]",
                cfg.kappa, KAPPA_RANGE.0, KAPPA_RANGE.1
            ));
        }
        let mut timings = Timings::default();
        let t = Stopwatch::start();
        let contrast = &cfg.contrast;
        let kappa = cfg.kappa;
        let tree = Arc::new(build_tree(&cfg.tree_config(), &|x| contrast.value(x), &|x| incident_field(kappa, x))?);
        timings.grid = t.seconds();
        let q: Vec<f64> = tree.points.iter().map(|&x| contrast.value(x)).collect();
        let u_inc: Vec<C64> = tree.points.iter().map(|&x| incident_field(kappa, x)).collect();
        let f: Vec<C64> = q.iter().zip(&u_inc).map(|(qi, ui)| -kappa * kappa * qi * ui).collect();
        let t = Stopwatch::start();
        let km = Arc::new(KernelMatrix::new(tree.clone(), kappa, KernelMode::Operator, &q, cfg.quad_tol)?);
        timings.assembly = t.seconds();
        Ok(Self { cfg: cfg.clone(), tree, km, q, u_inc, f, timings, warnings })
    }

    pub fn n(&self) -> usize {
        self.tree.n_points()
    }

    /// DAFMM plan at eps_nca.
    pub fn fast_operator(&self) -> Result<Dafmm> {
        Dafmm::new(self.km.clone(), &NcaConfig { eps: self.cfg.eps_nca, ..Default::default() })
    }

    fn gmres_config(&self) -> GmresConfig {
        GmresConfig { eps: self.cfg.eps_gmres, max_iters: self.cfg.max_iters, restart: self.cfg.restart }
    }

    fn hodlr_config(&self, mode: HodlrMode) -> HodlrConfig {
        HodlrConfig { mode, leaf_cluster_size: self.cfg.leaf_cluster_size, ..Default::default() }
    }

    /// Solves A ψ = f. Solver failures (singular blocks, non-convergence) are recorded in
    /// the run rather than returned as errors; `fmm` supplies products and residuals.
    pub fn run(&self, kind: SolverKind, fmm: &Dafmm) -> Result<SolverRun> {
        let n = self.n();
        let zero = vec![C64::new(0.0, 0.0); n];
        let op = |v: &[C64]| fmm.matvec(v);
        let mut run = SolverRun {
            kind,
            psi: zero.clone(),
            history: History::default(),
            hodlr_max_rank: None,
            factorize_seconds: 0.0,
            solve_seconds: 0.0,
            failure: None,
        };
        match kind {
            SolverKind::Gmres => {
                let t = Stopwatch::start();
                let (x, h) = gmres(&op, &self.f, &self.gmres_config(), None)?;
                run.solve_seconds = t.seconds();
                run.psi = x;
                run.history = h;
            }
            SolverKind::Hybrid => {
                let t = Stopwatch::start();
                let pre = Hodlr::new(&*self.km, &self.hodlr_config(HodlrMode::PrecondRank { rank: self.cfg.hodlr_rank }));
                run.factorize_seconds = t.seconds();
                match pre {
                    Ok(h) => {
                        run.hodlr_max_rank = Some(h.stats.max_rank);
                        let pm = |v: &[C64]| h.solve(v);
                        let t = Stopwatch::start();
                        let (x, hist) = gmres(&op, &self.f, &self.gmres_config(), Some(&pm))?;
                        run.solve_seconds = t.seconds();
                        run.psi = x;
                        run.history = hist;
                    }
                    Err(e) => run.failure = Some(e.to_string()),
                }
            }
            SolverKind::Hodlr => {
                let t = Stopwatch::start();
                let direct = Hodlr::new(&*self.km, &self.hodlr_config(HodlrMode::DirectEps { eps: self.cfg.hodlr_eps }));
                run.factorize_seconds = t.seconds();
                match direct {
                    Ok(h) => {
                        run.hodlr_max_rank = Some(h.stats.max_rank);
                        let t = Stopwatch::start();
                        run.psi = h.solve(&self.f)?;
                        run.solve_seconds = t.seconds();
                    }
                    Err(e) => run.failure = Some(e.to_string()),
                }
                run.history = self.direct_history(kind, fmm, &run.psi)?;
            }
            SolverKind::Dense => {
                let t = Stopwatch::start();
                let lu = self.km.dense().lu();
                run.factorize_seconds = t.seconds();
                let t = Stopwatch::start();
                match lu.solve(&DVector::from_column_slice(&self.f)) {
                    Some(x) => run.psi = x.iter().copied().collect(),
                    None => run.failure = Some("dense matrix is singular".into()),
                }
                run.solve_seconds = t.seconds();
                run.history = self.direct_history(kind, fmm, &run.psi)?;
            }
        }
        if run.failure.is_none() && !run.history.converged {
            run.failure = Some(format!(
                "GMRES did not reach {:e} in {} iterations (residual {:e})",
                self.cfg.eps_gmres, run.history.iterations, run.history.final_residual
            ));
        }
        Ok(run)
    }

    /// Single-entry history holding the relative residual of a direct solve.
    fn direct_history(&self, kind: SolverKind, fmm: &Dafmm, psi: &[C64]) -> Result<History> {
        let r = relative_residual(fmm, psi, &self.f)?;
        Ok(History { residuals: vec![r], iterations: 0, converged: r <= self.direct_tolerance(kind), final_residual: r, stagnated: false })
    }

    /// Residual a direct solve must reach, as measured with the DAFMM product.
    pub fn direct_tolerance(&self, kind: SolverKind) -> f64 {
        let solver_eps = if kind == SolverKind::Hodlr { self.cfg.hodlr_eps } else { 1e-14 };
        100.0 * solver_eps.max(self.cfg.eps_nca)
    }

    /// Fields at the grid points, E(x) samples and the report.
    pub fn finish(&self, run: SolverRun, fmm: &Dafmm) -> Result<Solution> {
        let mut timings = self.timings;
        timings.pivots = fmm.nca.pivot_seconds;
        timings.operators = fmm.nca.operator_seconds;
        timings.factorize = run.factorize_seconds;
        timings.solve = run.solve_seconds;
        timings.solver_total = run.factorize_seconds
            + run.solve_seconds
            + match run.kind {
                SolverKind::Gmres | SolverKind::Hybrid => fmm.build_seconds,
                _ => 0.0,
            };
        let t = Stopwatch::start();
        let u_scat = fmm.potential(&run.psi)?;
        timings.field = t.seconds();
        let u_total: Vec<C64> = self.u_inc.iter().zip(&u_scat).map(|(a, b)| a + b).collect();
        let p2 = self.km.p2();
        let qp = &self.km.interp.qpinv;
        let coeffs: Vec<Vec<C64>> = (0..self.tree.leaves.len())
            .map(|li| {
                let s = &run.psi[li * p2..(li + 1) * p2];
                (0..qp.nrows()).map(|l| (0..p2).map(|k| s[k] * qp[(l, k)]).sum()).collect()
            })
            .collect();
        let field = SolutionField {
            contrast: self.cfg.contrast.clone(),
            kappa: self.cfg.kappa,
            tree: self.tree.clone(),
            km: self.km.clone(),
            q: self.q.clone(),
            psi: run.psi,
            u_inc: self.u_inc.clone(),
            u_scat,
            u_total,
            f: self.f.clone(),
            coeffs,
        };
        let t = Stopwatch::start();
        let points = error_sample_points(&self.tree, self.cfg.error_samples);
        let errors = field.error_at_many(&points)?;
        let max_error = errors.iter().map(|e| e.error).fold(0.0, f64::max);
        let ax = fmm.matvec(&field.psi)?;
        let k2 = self.cfg.kappa * self.cfg.kappa;
        let max_error_grid = ax.iter().zip(&self.f).map(|(a, b)| (a - b).norm() / k2).fold(0.0, f64::max);
        timings.error = t.seconds();
        let cfg = &self.cfg;
        let report = SolveReport {
            schema_version: REPORT_SCHEMA_VERSION.into(),
            contrast: cfg.contrast.name().into(),
            seed: cfg.seed,
            kappa: cfg.kappa,
            kappa_in_range: cfg.kappa_in_range(),
            domain_center: [cfg.domain_center.x1, cfg.domain_center.x2],
            domain_half_width: cfg.domain_half_width,
            p: cfg.p,
            eps_grid: cfg.eps_grid,
            eps_nca: cfg.eps_nca,
            eps_gmres: cfg.eps_gmres,
            solver: run.kind,
            hodlr_rank: (run.kind == SolverKind::Hybrid).then_some(cfg.hodlr_rank),
            hodlr_eps: (run.kind == SolverKind::Hodlr).then_some(cfg.hodlr_eps),
            n: self.n(),
            leaves: self.tree.leaves.len(),
            depth: self.tree.depth(),
            nca_max_rank: fmm.nca.max_rank(),
            hodlr_max_rank: run.hodlr_max_rank,
            iterations: run.history.iterations,
            converged: run.history.converged && run.failure.is_none(),
            final_residual: run.history.final_residual,
            residual_kind: "true".into(),
            max_error,
            max_error_grid,
            error_points: points.len(),
            timings,
            threads: rayon::current_num_threads(),
            warnings: self.warnings.clone(),
            failure: run.failure.clone(),
        };
        Ok(Solution { field, report, history: run.history, errors })
    }
}

/// ‖A x − f‖₂/‖f‖₂, or ‖A x‖₂ when f = 0.
pub fn relative_residual(fmm: &Dafmm, x: &[C64], f: &[C64]) -> Result<f64> {
    let ax = fmm.matvec(x)?;
    let r: f64 = ax.iter().zip(f).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    let fnorm: f64 = f.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    Ok(if fnorm > 0.0 { r / fnorm } else { r })
}

/// Solved field on the grid with per-leaf expansion coefficients.
pub struct SolutionField {
    pub contrast: Contrast,
    pub kappa: f64,
    pub tree: Arc<Tree>,
    pub km: Arc<KernelMatrix>,
    pub q: Vec<f64>,
    pub psi: Vec<C64>,
    pub u_inc: Vec<C64>,
    pub u_scat: Vec<C64>,
    pub u_total: Vec<C64>,
    pub f: Vec<C64>,
    /// c^B = Q⁺ψ^B for each leaf, in leaf order.
    pub coeffs: Vec<Vec<C64>>,
}

/// E at one point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ErrorSample {
    pub x1: f64,
    pub x2: f64,
    pub error: f64,
    /// "sample" for quasi-random points, "leaf_center" for leaf centres.
    pub kind: SampleKind,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Sample,
    LeafCenter,
}

/// Everything one solve produces.
pub struct Solution {
    pub field: SolutionField,
    pub report: SolveReport,
    pub history: History,
    pub errors: Vec<ErrorSample>,
}

impl SolutionField {
    fn leaf_of(&self, x: Point2D) -> Result<usize> {
        let b = self.tree.locate(x).ok_or(Error::OutsideDomain { x1: x.x1, x2: x.x2 })?;
        Ok(self.tree.boxes[b].leaf_index.expect("locate returns a leaf"))
    }

    /// ψ(x) from the expansion of the leaf containing x.
    pub fn psi_at(&self, x: Point2D) -> Result<C64> {
        let li = self.leaf_of(x)?;
        let b = &self.tree.boxes[self.tree.leaves[li]];
        let e = [(x.x1 - b.center.x1) / b.half_width, (x.x2 - b.center.x2) / b.half_width];
        let vals = self.km.basis.eval(e[0].clamp(-1.0, 1.0), e[1].clamp(-1.0, 1.0));
        Ok(self.coeffs[li].iter().zip(&vals).map(|(c, v)| c * v).sum())
    }

    /// V[ψ](x) by direct quadrature over all leaves.
    pub fn scattered_at(&self, x: Point2D) -> Result<C64> {
        self.leaf_of(x)?;
        Ok(self.km.volume_potential_at(x, &self.psi))
    }

    /// E(x) = |ψ(x) + κ²q(x)V[ψ](x) − f(x)|/κ², with q and f evaluated exactly at x.
    pub fn error_at(&self, x: Point2D) -> Result<f64> {
        let psi = self.psi_at(x)?;
        let k2 = self.kappa * self.kappa;
        let q = self.contrast.value(x);
        let v = if q == 0.0 { C64::new(0.0, 0.0) } else { self.km.volume_potential_at(x, &self.psi) };
        Ok((psi + k2 * q * v - rhs_value(&self.contrast, self.kappa, x)).norm() / k2)
    }

    /// E at the given points, in parallel.
    pub fn error_at_many(&self, points: &[(Point2D, SampleKind)]) -> Result<Vec<ErrorSample>> {
        points
            .par_iter()
            .map(|&(x, kind)| Ok(ErrorSample { x1: x.x1, x2: x.x2, error: self.error_at(x)?, kind }))
            .collect()
    }
}

/// u_scat at arbitrary points of the domain by per-leaf quadrature.
pub fn scattered_field(field: &SolutionField, points: &[Point2D]) -> Result<Vec<C64>> {
    points.par_iter().map(|&x| field.scattered_at(x)).collect()
}

/// E(x) at one point.
pub fn error_function(field: &SolutionField, x: Point2D) -> Result<f64> {
    field.error_at(x)
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base) as f64 * inv;
        i /= base;
        inv /= base as f64;
    }
    r
}

/// Halton (2, 3) points 1..=count mapped into the domain, followed by all leaf centres.
pub fn error_sample_points(tree: &Tree, count: usize) -> Vec<(Point2D, SampleKind)> {
    let c = tree.cfg.domain_center;
    let h = tree.cfg.domain_half_width;
    let mut out: Vec<(Point2D, SampleKind)> = (1..=count as u64)
        .map(|i| {
            let x = Point2D::new(c.x1 - h + 2.0 * h * radical_inverse(i, 2), c.x2 - h + 2.0 * h * radical_inverse(i, 3));
            (x, SampleKind::Sample)
        })
        .collect();
    out.extend(tree.leaves.iter().map(|&l| (tree.boxes[l].center, SampleKind::LeafCenter)));
    out
}

/// Assembles, solves with `cfg.solver` and post-processes.
pub fn solve(cfg: &ProblemConfig) -> Result<Solution> {
    let problem = Problem::assemble(cfg)?;
    let fmm = problem.fast_operator()?;
    let run = problem.run(cfg.solver, &fmm)?;
    problem.finish(run, &fmm)
}

#[derive(Serialize)]
struct PsiRow {
    x1: f64,
    x2: f64,
    re_psi: f64,
    im_psi: f64,
}

#[derive(Serialize)]
struct FieldRow {
    x1: f64,
    x2: f64,
    q: f64,
    re_inc: f64,
    im_inc: f64,
    re_scat: f64,
    im_scat: f64,
    re_total: f64,
    im_total: f64,
}

impl Solution {
    /// Writes grid.jsonl, psi.csv, field.csv, error.csv, report.json and convergence.csv.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let fld = &self.field;
        fld.tree.write_jsonl(&dir.join("grid.jsonl"))?;
        let mut w = csv::Writer::from_path(dir.join("psi.csv"))?;
        for (x, v) in fld.tree.points.iter().zip(&fld.psi) {
            w.serialize(PsiRow { x1: x.x1, x2: x.x2, re_psi: v.re, im_psi: v.im })?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("field.csv"))?;
        for (i, x) in fld.tree.points.iter().enumerate() {
            let (a, b, c) = (fld.u_inc[i], fld.u_scat[i], fld.u_total[i]);
            w.serialize(FieldRow {
                x1: x.x1,
                x2: x.x2,
                q: fld.q[i],
                re_inc: a.re,
                im_inc: a.im,
                re_scat: b.re,
                im_scat: b.im,
                re_total: c.re,
                im_total: c.im,
            })?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("error.csv"))?;
        for e in &self.errors {
            w.serialize(e)?;
        }
        w.flush()?;
        self.history.write_csv(&dir.join("convergence.csv"))?;
        write_report(&self.report, &dir.join("report.json"))
    }
}

pub fn write_report(report: &SolveReport, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, report)?;
    Ok(())
}
