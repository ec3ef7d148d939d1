//! Command-line front end: solve, nbody, sweep and bench.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use helmscat::dafmm::{Dafmm, PassTimes};
use helmscat::discretize::{KernelMatrix, KernelMode};
use helmscat::grid::{uniform_tree, TreeConfig};
use helmscat::nca::NcaConfig;
use helmscat::scatter::{self, Contrast, Problem, ProblemConfig, SolverKind, TabulatedContrast};
use helmscat::{Complex64, Error, Point2D};
use rand::{Rng, SeedableRng};
use serde::Serialize;

/// Largest N for which a dense oracle runs without --force.
const DENSE_LIMIT: usize = 6000;

#[derive(Parser)]
#[command(name = "helmscat", version, about = "2D Lippmann-Schwinger scattering solver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one scattering problem and write all artifacts.
    Solve(SolveArgs),
    /// Point-kernel DAFMM product against a dense oracle.
    Nbody(NbodyArgs),
    /// Solve over several eps_grid values and solvers; writes table.csv.
    Sweep(SweepArgs),
    /// Repeat one solve and report median phase timings and per-pass product timings.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct ProblemArgs {
    /// gaussian, multi, cavity, lens or custom.
    #[arg(long, default_value = "gaussian")]
    contrast: String,
    /// JSON table for --contrast custom.
    #[arg(long)]
    contrast_file: Option<PathBuf>,
    #[arg(long, default_value_t = 40.0, allow_negative_numbers = true)]
    kappa: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps_nca: f64,
    #[arg(long, default_value_t = 1e-10)]
    eps_gmres: f64,
    /// Points per leaf, a perfect square p².
    #[arg(long, default_value_t = 64)]
    leaf_size: usize,
    #[arg(long, default_value_t = 15)]
    hodlr_rank: usize,
    #[arg(long, default_value_t = 1e-10)]
    hodlr_eps: f64,
    #[arg(long, default_value_t = 256)]
    leaf_cluster_size: usize,
    #[arg(long, default_value_t = 400)]
    max_iters: usize,
    #[arg(long)]
    restart: Option<usize>,
    /// Seed for the multi-Gaussian centres.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the contrast's default domain half-width.
    #[arg(long)]
    half_width: Option<f64>,
    /// Quasi-random E(x) sample points.
    #[arg(long, default_value_t = 500)]
    error_samples: usize,
    /// High-frequency threshold T: a box of width w is high-frequency iff (κw)² > T.
    #[arg(long, default_value_t = 100.0)]
    hf_threshold: f64,
    /// Allow dense solves above N = 6000.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, default_value_t = 1e-8)]
    eps_grid: f64,
    /// gmres, hodlr, hybrid or dense.
    #[arg(long, default_value = "gmres")]
    solver: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct NbodyArgs {
    #[arg(long, default_value_t = 50.0, allow_negative_numbers = true)]
    kappa: f64,
    /// Chebyshev nodes per axis; several values give an error-vs-N sweep.
    #[arg(long, value_delimiter = ',', default_value = "5")]
    p: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    levels: u32,
    /// Tolerances; several values give an error-vs-eps sweep.
    #[arg(long, value_delimiter = ',', default_value = "1e-4,1e-6,1e-8,1e-10")]
    eps_nca: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    half_width: f64,
    #[arg(long, default_value_t = 100.0)]
    hf_threshold: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Allow a dense oracle above N = 6000.
    #[arg(long)]
    force: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, value_delimiter = ',', default_value = "1e-5,1e-6,1e-7")]
    eps_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "hodlr,gmres,hybrid")]
    solvers: Vec<String>,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, default_value_t = 1e-6)]
    eps_grid: f64,
    #[arg(long, default_value = "gmres")]
    solver: String,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Fail {
    Usage(String),
    Solver(String),
}

impl From<anyhow::Error> for Fail {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Fail::Usage(format!("{e:#}")),
            _ => Fail::Solver(format!("{e:#}")),
        }
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(v) = std::env::var("HELMSCAT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: could not set thread count: {e}");
                }
            }
            _ => {
                eprintln!("error: HELMSCAT_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(2);
            }
        }
    }
    let res = match cli.cmd {
        Cmd::Solve(a) => cmd_solve(&a),
        Cmd::Nbody(a) => cmd_nbody(&a),
        Cmd::Sweep(a) => cmd_sweep(&a),
        Cmd::Bench(a) => cmd_bench(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Solver(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn leaf_p(leaf_size: usize) -> Result<usize, Fail> {
    let p = (leaf_size as f64).sqrt().round() as usize;
    if p < 2 || p * p != leaf_size {
        return Err(usage(format!("--leaf-size must be a perfect square of at least 4, got {leaf_size}")));
    }
    Ok(p)
}

fn problem_config(a: &ProblemArgs, eps_grid: f64, solver: SolverKind) -> Result<ProblemConfig, Fail> {
    if !(a.kappa > 0.0 && a.kappa.is_finite()) {
        return Err(usage(format!("--kappa must be positive, got {}", a.kappa)));
    }
    let contrast = match a.contrast.as_str() {
        "gaussian" => Contrast::Gaussian,
        "multi" | "multi_gaussian" => Contrast::multi_gaussian(a.seed, 20, 0.013)?,
        "cavity" => Contrast::Cavity,
        "lens" => Contrast::Lens,
        "custom" => {
            let path = a.contrast_file.as_ref().ok_or_else(|| usage("--contrast custom requires --contrast-file"))?;
            let t = TabulatedContrast::from_json_file(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            Contrast::Custom(t)
        }
        other => return Err(usage(format!("unknown contrast '{other}'"))),
    };
    if a.contrast_file.is_some() && a.contrast != "custom" {
        return Err(usage("--contrast-file is only valid with --contrast custom"));
    }
    let mut cfg = ProblemConfig::new(contrast, a.kappa);
    cfg.p = leaf_p(a.leaf_size)?;
    cfg.eps_grid = eps_grid;
    cfg.eps_nca = a.eps_nca;
    cfg.eps_gmres = a.eps_gmres;
    cfg.max_iters = a.max_iters;
    cfg.restart = a.restart;
    cfg.solver = solver;
    cfg.hodlr_rank = a.hodlr_rank;
    cfg.hodlr_eps = a.hodlr_eps;
    cfg.leaf_cluster_size = a.leaf_cluster_size;
    cfg.error_samples = a.error_samples;
    cfg.hf_threshold_t = a.hf_threshold;
    cfg.seed = a.seed;
    if let Some(h) = a.half_width {
        cfg.domain_half_width = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_solver(s: &str) -> Result<SolverKind, Fail> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn dense_guard(n: usize, force: bool) -> Result<(), Fail> {
    if n > DENSE_LIMIT && !force {
        return Err(usage(format!("dense oracle refused for N = {n} > {DENSE_LIMIT}; pass --force to override")));
    }
    Ok(())
}

fn cmd_solve(a: &SolveArgs) -> Result<(), Fail> {
    let kind = parse_solver(&a.solver)?;
    let cfg = problem_config(&a.problem, a.eps_grid, kind)?;
    let t = Instant::now();
    let problem = Problem::assemble(&cfg)?;
    if kind == SolverKind::Dense {
        dense_guard(problem.n(), a.problem.force)?;
    }
    for w in &problem.warnings {
        eprintln!("warning: {w}");
    }
    let fmm = problem.fast_operator()?;
    let run = problem.run(kind, &fmm)?;
    let sol = problem.finish(run, &fmm)?;
    sol.write_outputs(&a.out).with_context(|| format!("writing outputs to {}", a.out.display()))?;
    let r = &sol.report;
    println!(
        "N={} solver={} iterations={} residual={:.3e} max_E={:.3e} time={:.2}s",
        r.n,
        r.solver.as_str(),
        r.iterations,
        r.final_residual,
        r.max_error,
        t.elapsed().as_secs_f64()
    );
    match &r.failure {
        Some(f) => Err(Fail::Solver(f.clone())),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct NbodyRow {
    p: usize,
    n: usize,
    eps_nca: f64,
    rel_error: f64,
    build_seconds: f64,
    matvec_seconds: f64,
    max_rank: usize,
}

/// Dense point-kernel product, assembled in row chunks.
fn dense_point_product(km: &KernelMatrix, x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    let all: Vec<usize> = (0..n).collect();
    let xv = nalgebra::DVector::from_column_slice(x);
    let mut y = Vec::with_capacity(n);
    for chunk in all.chunks(256) {
        let b = km.block(chunk, &all);
        y.extend((b * &xv).iter().copied());
    }
    y
}

fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

fn cmd_nbody(a: &NbodyArgs) -> Result<(), Fail> {
    if !(a.kappa > 0.0 && a.kappa.is_finite()) {
        return Err(usage(format!("--kappa must be positive, got {}", a.kappa)));
    }
    if a.eps_nca.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(usage("--eps-nca values must lie in (0,1)"));
    }
    if a.p.iter().any(|&p| p < 2) {
        return Err(usage("--p values must be at least 2"));
    }
    std::fs::create_dir_all(&a.out).map_err(anyhow::Error::from)?;
    let mut rows = Vec::new();
    for &p in &a.p {
        let cfg = TreeConfig {
            domain_center: Point2D::new(0.0, 0.0),
            domain_half_width: a.half_width,
            p,
            kappa: a.kappa,
            hf_threshold_t: a.hf_threshold,
            ..Default::default()
        };
        let tree = Arc::new(uniform_tree(cfg, a.levels)?);
        let n = tree.n_points();
        dense_guard(n, a.force)?;
        let km = Arc::new(KernelMatrix::new(tree, a.kappa, KernelMode::Point, &[], 1e-12)?);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
        let x: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
        let exact = dense_point_product(&km, &x);
        for &eps in &a.eps_nca {
            let fmm = Dafmm::new(km.clone(), &NcaConfig { eps, ..Default::default() })?;
            let (y, times) = fmm.matvec_profiled(&x)?;
            let row = NbodyRow {
                p,
                n,
                eps_nca: eps,
                rel_error: rel_err(&y, &exact),
                build_seconds: fmm.build_seconds,
                matvec_seconds: times.total,
                max_rank: fmm.nca.max_rank(),
            };
            println!("p={} N={} eps_nca={:e} rel_error={:.3e} max_rank={}", row.p, row.n, row.eps_nca, row.rel_error, row.max_rank);
            rows.push(row);
        }
    }
    let write = |name: &str, rows: &[&NbodyRow]| -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(a.out.join(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    };
    let first_p = a.p[0];
    let by_eps: Vec<&NbodyRow> = rows.iter().filter(|r| r.p == first_p).collect();
    write("error_vs_eps.csv", &by_eps)?;
    if a.p.len() > 1 {
        let e0 = a.eps_nca[0];
        let by_n: Vec<&NbodyRow> = rows.iter().filter(|r| r.eps_nca == e0).collect();
        write("error_vs_n.csv", &by_n)?;
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs a solver `repeat` times on an assembled problem and returns the median solver
/// time and the solution of the first run. Iterative solvers rebuild the DAFMM plan each
/// time, since its build is part of their cost.
fn timed_runs(problem: &Problem, kind: SolverKind, repeat: usize) -> Result<(f64, scatter::Solution), Fail> {
    let mut times = Vec::with_capacity(repeat);
    let mut first = None;
    for _ in 0..repeat {
        let fmm = problem.fast_operator()?;
        let run = problem.run(kind, &fmm)?;
        let mut t = run.factorize_seconds + run.solve_seconds;
        if matches!(kind, SolverKind::Gmres | SolverKind::Hybrid) {
            t += fmm.build_seconds;
        }
        times.push(t);
        if first.is_none() {
            first = Some(problem.finish(run, &fmm)?);
        }
    }
    let mut sol = first.expect("repeat >= 1");
    let med = median(times);
    sol.report.timings.solver_total = med;
    Ok((med, sol))
}

#[derive(Serialize, Default)]
struct TableRow {
    contrast: String,
    kappa: f64,
    n: usize,
    eps_grid: f64,
    t_hodlr: Option<f64>,
    t_gmres: Option<f64>,
    t_hybrid: Option<f64>,
    hodlr_over_hybrid: Option<f64>,
    gmres_over_hybrid: Option<f64>,
    iterations_gmres: Option<usize>,
    iterations_hybrid: Option<usize>,
    failures: String,
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), Fail> {
    if a.repeat == 0 {
        return Err(usage("--repeat must be at least 1"));
    }
    let kinds: Vec<SolverKind> = a.solvers.iter().map(|s| parse_solver(s)).collect::<Result<_, _>>()?;
    let mut eps_list = a.eps_grid.clone();
    eps_list.sort_by(|x, y| y.total_cmp(x));
    std::fs::create_dir_all(&a.out).map_err(anyhow::Error::from)?;
    let mut table = Vec::new();
    for &eg in &eps_list {
        let cfg = problem_config(&a.problem, eg, kinds.first().copied().unwrap_or(SolverKind::Gmres))?;
        let mut row = TableRow { contrast: cfg.contrast.name().into(), kappa: cfg.kappa, eps_grid: eg, ..Default::default() };
        let problem = match Problem::assemble(&cfg) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("eps_grid {eg:e}: assembly failed: {e}");
                row.failures = format!("assembly: {e}");
                table.push(row);
                continue;
            }
        };
        row.n = problem.n();
        let mut failures = Vec::new();
        for &kind in &kinds {
            if kind == SolverKind::Dense && problem.n() > DENSE_LIMIT && !a.problem.force {
                failures.push(format!("dense: N = {} > {DENSE_LIMIT}", problem.n()));
                continue;
            }
            let cell = a.out.join(format!("eps_grid_{eg:e}")).join(kind.as_str());
            match timed_runs(&problem, kind, a.repeat) {
                Ok((t, sol)) => {
                    let r = &sol.report;
                    println!("N={} eps_grid={eg:e} solver={} time={t:.3}s iterations={} residual={:.2e}", r.n, kind.as_str(), r.iterations, r.final_residual);
                    if let Some(f) = &r.failure {
                        failures.push(format!("{}: {f}", kind.as_str()));
                    }
                    match kind {
                        SolverKind::Hodlr => row.t_hodlr = Some(t),
                        SolverKind::Gmres => {
                            row.t_gmres = Some(t);
                            row.iterations_gmres = Some(r.iterations);
                        }
                        SolverKind::Hybrid => {
                            row.t_hybrid = Some(t);
                            row.iterations_hybrid = Some(r.iterations);
                        }
                        SolverKind::Dense => {}
                    }
                    std::fs::create_dir_all(&cell).map_err(anyhow::Error::from)?;
                    scatter::write_report(r, &cell.join("report.json"))?;
                }
                Err(Fail::Usage(m) | Fail::Solver(m)) => {
                    eprintln!("eps_grid {eg:e} solver {}: {m}", kind.as_str());
                    failures.push(format!("{}: {m}", kind.as_str()));
                }
            }
        }
        if let Some(h) = row.t_hybrid.filter(|&h| h > 0.0) {
            row.hodlr_over_hybrid = row.t_hodlr.map(|t| t / h);
            row.gmres_over_hybrid = row.t_gmres.map(|t| t / h);
        }
        row.failures = failures.join("; ");
        table.push(row);
    }
    write_table(&a.out.join("table.csv"), &table)?;
    Ok(())
}

fn write_table(path: &Path, rows: &[TableRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    solver: SolverKind,
    n: usize,
    repeat: usize,
    solver_seconds: f64,
    solver_seconds_all: Vec<f64>,
    matvec: PassTimes,
    matvec_all: Vec<PassTimes>,
}

fn cmd_bench(a: &BenchArgs) -> Result<(), Fail> {
    if a.repeat == 0 {
        return Err(usage("--repeat must be at least 1"));
    }
    let kind = parse_solver(&a.solver)?;
    let cfg = problem_config(&a.problem, a.eps_grid, kind)?;
    let problem = Problem::assemble(&cfg)?;
    if kind == SolverKind::Dense {
        dense_guard(problem.n(), a.problem.force)?;
    }
    let mut solver_all = Vec::new();
    let mut first = None;
    for _ in 0..a.repeat {
        let (t, sol) = timed_runs(&problem, kind, 1)?;
        solver_all.push(t);
        first.get_or_insert(sol);
    }
    let fmm = problem.fast_operator()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let x: Vec<Complex64> = (0..problem.n()).map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
    let mut mv_all = Vec::new();
    for _ in 0..a.repeat {
        mv_all.push(fmm.matvec_profiled(&x)?.1);
    }
    let pick = |f: fn(&PassTimes) -> f64| median(mv_all.iter().map(f).collect());
    let matvec = PassTimes {
        upward: pick(|p| p.upward),
        m2l: pick(|p| p.m2l),
        downward: pick(|p| p.downward),
        near: pick(|p| p.near),
        total: pick(|p| p.total),
    };
    let solver_seconds = median(solver_all.clone());
    let mut sol = first.expect("repeat >= 1");
    sol.report.timings.solver_total = solver_seconds;
    let bench = BenchReport { solver: kind, n: problem.n(), repeat: a.repeat, solver_seconds, solver_seconds_all: solver_all, matvec, matvec_all: mv_all };
    std::fs::create_dir_all(&a.out).map_err(anyhow::Error::from)?;
    sol.write_outputs(&a.out)?;
    let f = std::fs::File::create(a.out.join("bench.json")).map_err(anyhow::Error::from)?;
    serde_json::to_writer_pretty(f, &bench).map_err(anyhow::Error::from)?;
    let row = TableRow {
        contrast: cfg.contrast.name().into(),
        kappa: cfg.kappa,
        n: problem.n(),
        eps_grid: cfg.eps_grid,
        t_hodlr: (kind == SolverKind::Hodlr).then_some(solver_seconds),
        t_gmres: (kind == SolverKind::Gmres).then_some(solver_seconds),
        t_hybrid: (kind == SolverKind::Hybrid).then_some(solver_seconds),
        iterations_gmres: (kind == SolverKind::Gmres).then_some(sol.report.iterations),
        iterations_hybrid: (kind == SolverKind::Hybrid).then_some(sol.report.iterations),
        failures: sol.report.failure.clone().unwrap_or_default(),
        ..Default::default()
    };
    write_table(&a.out.join("table.csv"), &[row])?;
    println!("N={} solver={} median={solver_seconds:.3}s matvec={:.4}s", problem.n(), kind.as_str(), matvec.total);
    match &sol.report.failure {
        Some(f) => Err(Fail::Solver(f.clone())),
        None => Ok(()),
    }
}
