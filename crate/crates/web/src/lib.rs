//! Browser bindings: contrast raster, adaptive grid and a small field solve.

use helmscat::grid::build_tree;
use helmscat::scatter::{incident_field, solve, Contrast, ProblemConfig, SolverKind};
use helmscat::Point2D;
use wasm_bindgen::prelude::*;

/// Largest N the demo solves.
pub const MAX_DEMO_N: usize = 4096;

fn contrast(kind: &str, seed: u64) -> Result<Contrast, String> {
    match kind {
        "gaussian" => Ok(Contrast::Gaussian),
        "multi" => Contrast::multi_gaussian(seed, 20, 0.013).map_err(|e| e.to_string()),
        "cavity" => Ok(Contrast::Cavity),
        "lens" => Ok(Contrast::Lens),
        _ => Err(format!("unknown contrast '{kind}'")),
    }
}

/// Contrast values on an n × n raster over the default domain, row-major from the
/// bottom-left corner, followed by the domain [cx, cy, half_width].
pub fn contrast_raster_impl(kind: &str, n: usize) -> Result<Vec<f64>, String> {
    if n == 0 || n > 1024 {
        return Err(format!("raster size must lie in 1..=1024, got {n}"));
    }
    let c = contrast(kind, 0)?;
    let (ctr, h) = c.default_domain();
    let mut out = Vec::with_capacity(n * n + 3);
    for j in 0..n {
        for i in 0..n {
            let x = Point2D::new(ctr.x1 - h + (i as f64 + 0.5) * 2.0 * h / n as f64, ctr.x2 - h + (j as f64 + 0.5) * 2.0 * h / n as f64);
            out.push(c.value(x));
        }
    }
    out.extend([ctr.x1, ctr.x2, h]);
    Ok(out)
}

/// Leaf boxes of the adaptive tree as [cx, cy, half_width, level] quadruples.
pub fn grid_boxes_impl(kind: &str, kappa: f64, eps_grid: f64, p: usize) -> Result<Vec<f64>, String> {
    let mut cfg = ProblemConfig::new(contrast(kind, 0)?, kappa);
    cfg.eps_grid = eps_grid;
    cfg.p = p;
    cfg.validate().map_err(|e| e.to_string())?;
    let c = cfg.contrast.clone();
    let tree = build_tree(&cfg.tree_config(), &|x| c.value(x), &|x| incident_field(kappa, x)).map_err(|e| e.to_string())?;
    Ok(tree
        .leaves
        .iter()
        .flat_map(|&l| {
            let b = &tree.boxes[l];
            [b.center.x1, b.center.x2, b.half_width, f64::from(b.level)]
        })
        .collect())
}

/// Result of a demo solve.
#[wasm_bindgen(getter_with_clone)]
pub struct FieldResult {
    /// Grid points as [x1, x2] pairs.
    pub points: Vec<f64>,
    /// Re and Im of the total field as pairs.
    pub total: Vec<f64>,
    pub n: usize,
    pub iterations: usize,
    pub residual: f64,
    pub max_error: f64,
}

/// Solves with GMRES and returns the total field at the grid points.
pub fn solve_field_impl(kind: &str, kappa: f64, eps_grid: f64, p: usize) -> Result<FieldResult, String> {
    let mut cfg = ProblemConfig::new(contrast(kind, 0)?, kappa);
    cfg.eps_grid = eps_grid;
    cfg.p = p;
    cfg.eps_nca = 1e-6;
    cfg.eps_gmres = 1e-8;
    cfg.error_samples = 50;
    cfg.quad_tol = 1e-10;
    cfg.solver = SolverKind::Gmres;
    cfg.validate().map_err(|e| e.to_string())?;
    let c = cfg.contrast.clone();
    let tree = build_tree(&cfg.tree_config(), &|x| c.value(x), &|x| incident_field(kappa, x)).map_err(|e| e.to_string())?;
    if tree.n_points() > MAX_DEMO_N {
        return Err(format!("N = {} exceeds the demo limit {MAX_DEMO_N}; loosen eps_grid or lower p", tree.n_points()));
    }
    let sol = solve(&cfg).map_err(|e| e.to_string())?;
    let f = &sol.field;
    Ok(FieldResult {
        points: f.tree.points.iter().flat_map(|x| [x.x1, x.x2]).collect(),
        total: f.u_total.iter().flat_map(|u| [u.re, u.im]).collect(),
        n: sol.report.n,
        iterations: sol.report.iterations,
        residual: sol.report.final_residual,
        max_error: sol.report.max_error,
    })
}

#[wasm_bindgen]
pub fn contrast_raster(kind: &str, n: usize) -> Result<Vec<f64>, JsError> {
    contrast_raster_impl(kind, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn grid_boxes(kind: &str, kappa: f64, eps_grid: f64, p: usize) -> Result<Vec<f64>, JsError> {
    grid_boxes_impl(kind, kappa, eps_grid, p).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn solve_field(kind: &str, kappa: f64, eps_grid: f64, p: usize) -> Result<FieldResult, JsError> {
    solve_field_impl(kind, kappa, eps_grid, p).map_err(|e| JsError::new(&e))
}
