use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_helmscat"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("helmscat-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

/// Validator for the JSON Schema subset the report schema uses.
fn validate(schema: &Value, v: &Value, path: &str, errors: &mut Vec<String>) {
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        let ok = types.iter().any(|t| match *t {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "boolean" => v.is_boolean(),
            "null" => v.is_null(),
            "number" => v.is_number(),
            "integer" => v.is_i64() || v.is_u64(),
            _ => false,
        });
        if !ok {
            errors.push(format!("{path}: expected {types:?}, got {v}"));
            return;
        }
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            errors.push(format!("{path}: {v} not in {e:?}"));
        }
    }
    if let Some(x) = v.as_f64() {
        if let Some(m) = schema.get("minimum").and_then(Value::as_f64) {
            if x < m {
                errors.push(format!("{path}: {x} < minimum {m}"));
            }
        }
        if let Some(m) = schema.get("exclusiveMinimum").and_then(Value::as_f64) {
            if x <= m {
                errors.push(format!("{path}: {x} <= exclusiveMinimum {m}"));
            }
        }
    }
    if let Some(obj) = v.as_object() {
        for r in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = r.as_str().unwrap();
            if !obj.contains_key(key) {
                errors.push(format!("{path}: missing {key}"));
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        for (k, val) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(s) => validate(s, val, &format!("{path}.{k}"), errors),
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    errors.push(format!("{path}: unexpected property {k}"))
                }
                None => {}
            }
        }
    }
    if let Some(arr) = v.as_array() {
        if let Some(m) = schema.get("minItems").and_then(Value::as_u64) {
            if (arr.len() as u64) < m {
                errors.push(format!("{path}: fewer than {m} items"));
            }
        }
        if let Some(m) = schema.get("maxItems").and_then(Value::as_u64) {
            if (arr.len() as u64) > m {
                errors.push(format!("{path}: more than {m} items"));
            }
        }
        if let Some(items) = schema.get("items") {
            for (i, x) in arr.iter().enumerate() {
                validate(items, x, &format!("{path}[{i}]"), errors);
            }
        }
    }
}

fn schema() -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json");
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn check_report(path: &Path) -> Value {
    let report: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let mut errors = Vec::new();
    validate(&schema(), &report, "$", &mut errors);
    assert!(errors.is_empty(), "{}: {errors:#?}", path.display());
    report
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const SMALL: [&str; 8] = ["--leaf-size", "16", "--eps-grid", "1e-3", "--error-samples", "20", "--eps-nca", "1e-8"];

#[test]
fn validator_rejects_bad_reports() {
    let mut errors = Vec::new();
    validate(&schema(), &serde_json::json!({"n": -1, "bogus": true}), "$", &mut errors);
    assert!(errors.len() >= 2);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["solve", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        vec!["frobnicate"],
        vec!["solve", "--kappa", "0"],
        vec!["solve", "--kappa", "-5"],
        vec!["solve", "--kappa", "abc"],
        vec!["solve", "--leaf-size", "10"],
        vec!["solve", "--solver", "cholesky"],
        vec!["solve", "--contrast", "sphere"],
        vec!["solve", "--contrast", "custom"],
        vec!["solve", "--eps-grid", "2"],
        vec!["solve", "--eps-nca", "0"],
        vec!["nbody", "--kappa", "0"],
        vec!["sweep", "--repeat", "0"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn bad_thread_count_exits_two() {
    let out = bin().env("HELMSCAT_THREADS", "many").args(["solve", "--kappa", "40"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_contrast_file_exits_two() {
    let dir = scratch("badfile");
    std::fs::create_dir_all(&dir).unwrap();
    let f = dir.join("t.json");
    std::fs::write(&f, r#"{"x1_range": [0, 1], "x2_range": [0, 1], "values": [[1.0]]}"#).unwrap();
    let out = run(&["solve", "--contrast", "custom", "--contrast-file", f.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["solve", "--contrast", "custom", "--contrast-file", "/nonexistent/t.json"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn solve_writes_all_artifacts() {
    let dir = scratch("solve");
    let mut args = vec!["solve", "--kappa", "40", "--out", dir.to_str().unwrap()];
    args.extend(SMALL);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = check_report(&dir.join("report.json"));
    assert_eq!(report["converged"], true);
    assert_eq!(report["solver"], "gmres");
    assert_eq!(header(&dir.join("psi.csv")), "x1,x2,re_psi,im_psi");
    assert_eq!(header(&dir.join("field.csv")), "x1,x2,q,re_inc,im_inc,re_scat,im_scat,re_total,im_total");
    assert_eq!(header(&dir.join("error.csv")), "x1,x2,error,kind");
    assert_eq!(header(&dir.join("convergence.csv")), "iteration,residual");
    let n = report["n"].as_u64().unwrap() as usize;
    assert_eq!(std::fs::read_to_string(dir.join("psi.csv")).unwrap().lines().count(), n + 1);
    let first: Value = serde_json::from_str(std::fs::read_to_string(dir.join("grid.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["parent_id"], Value::Null);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn out_of_range_kappa_warns_but_solves() {
    let dir = scratch("warn");
    let mut args = vec!["solve", "--kappa", "10", "--out", dir.to_str().unwrap()];
    args.extend(SMALL);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let report = check_report(&dir.join("report.json"));
    assert_eq!(report["kappa_in_range"], false);
    assert!(!report["warnings"].as_array().unwrap().is_empty());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn non_convergence_exits_one_with_report() {
    let dir = scratch("fail");
    let mut args = vec!["solve", "--kappa", "40", "--max-iters", "2", "--out", dir.to_str().unwrap()];
    args.extend(SMALL);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    let report = check_report(&dir.join("report.json"));
    assert_eq!(report["converged"], false);
    assert!(report["failure"].is_string());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn dense_solver_refuses_large_problems() {
    let out = run(&["solve", "--solver", "dense", "--eps-grid", "1e-8", "--out", "/tmp/helmscat-never-written"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
}

#[test]
fn sweep_writes_table_and_cell_reports() {
    let dir = scratch("sweep");
    let out = run(&[
        "sweep", "--kappa", "40", "--leaf-size", "16", "--eps-grid", "1e-2,1e-3", "--solvers", "hodlr,gmres,hybrid",
        "--repeat", "1", "--error-samples", "5", "--eps-nca", "1e-8", "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.join("table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "contrast,kappa,n,eps_grid,t_hodlr,t_gmres,t_hybrid,hodlr_over_hybrid,gmres_over_hybrid,iterations_gmres,iterations_hybrid,failures"
    );
    assert_eq!(lines.count(), 2);
    for eg in ["1e-2", "1e-3"] {
        for s in ["hodlr", "gmres", "hybrid"] {
            let r = check_report(&dir.join(format!("eps_grid_{eg}")).join(s).join("report.json"));
            assert_eq!(r["solver"], s);
        }
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn bench_writes_timings() {
    let dir = scratch("bench");
    let out = run(&[
        "bench", "--kappa", "40", "--leaf-size", "16", "--eps-grid", "1e-3", "--repeat", "3", "--error-samples", "5",
        "--eps-nca", "1e-8", "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let bench: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("bench.json")).unwrap()).unwrap();
    assert_eq!(bench["solver_seconds_all"].as_array().unwrap().len(), 3);
    assert_eq!(bench["matvec_all"].as_array().unwrap().len(), 3);
    for k in ["upward", "m2l", "downward", "near", "total"] {
        assert!(bench["matvec"][k].as_f64().unwrap() >= 0.0);
    }
    check_report(&dir.join("report.json"));
    assert!(dir.join("table.csv").exists());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn nbody_writes_error_tables() {
    let dir = scratch("nbody");
    let out = run(&[
        "nbody", "--kappa", "10", "--levels", "2", "--p", "3,4", "--eps-nca", "1e-4,1e-6", "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let by_eps = std::fs::read_to_string(dir.join("error_vs_eps.csv")).unwrap();
    assert_eq!(by_eps.lines().next().unwrap(), "p,n,eps_nca,rel_error,build_seconds,matvec_seconds,max_rank");
    assert_eq!(by_eps.lines().count(), 3);
    for line in by_eps.lines().skip(1) {
        let err: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!(err < 1e-2);
    }
    assert_eq!(std::fs::read_to_string(dir.join("error_vs_n.csv")).unwrap().lines().count(), 3);
    std::fs::remove_dir_all(&dir).unwrap();
}
