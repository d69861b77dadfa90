//! Run orchestration: solve a configured problem and write its artifacts.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde_json::{json, Value};

use crate::bench::bench_multigrid;
use crate::config::{BenchConfig, RunConfig, SolverConfig};
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::huggett::{boundary_diagnostics, equilibrium_r_solve};
use crate::io;
use crate::linalg::MultigridParams;
use crate::mfg::{
    ergodic_longtime_solve, mfc_transform, mfg_residual, recursive_solve, solve_newton, solve_picard, LongTimeParams,
    MfgProblem, MfgSolution, Mode,
};
use crate::registry::{self, ProblemSize};
use crate::variational::{admm_solve, chambolle_pock_solve, DualSolverKind, VariationalProblem};

/// Process exit status for a failed run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
        _ => 2,
    }
}

/// Summary returned to the caller alongside the files on disk.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub report: Value,
}

fn solved(problem: &MfgProblem, solver: &SolverConfig, mg: Option<MultigridParams>) -> Result<(MfgSolution, Value)> {
    let linear = mg.map_or(DualSolverKind::Direct, DualSolverKind::Multigrid);
    Ok(match solver {
        SolverConfig::Newton(p) => {
            let o = solve_newton(problem, p, None)?;
            (o.solution, serde_json::to_value(&o.report)?)
        }
        SolverConfig::Picard(p) => {
            let o = solve_picard(problem, p, None)?;
            (o.solution, serde_json::to_value(&o.report)?)
        }
        SolverConfig::Recursive(p) => {
            let o = recursive_solve(problem, p)?;
            let r = json!({
                "solver": "recursive",
                "leaf_calls": o.leaf_calls,
                "elementary_calls": o.elementary_calls,
                "residual": o.residual,
            });
            (o.solution, r)
        }
        SolverConfig::Admm(p) => {
            let vp = VariationalProblem::from_mfg(problem)?;
            let o = admm_solve(&vp, &crate::variational::AdmmParams { linear, ..*p })?;
            (o.to_mfg_solution(&vp), serde_json::to_value(&o.report)?)
        }
        SolverConfig::Cp(p) => {
            let vp = VariationalProblem::from_mfg(problem)?;
            let o = chambolle_pock_solve(&vp, &crate::variational::CpParams { linear, ..*p })?;
            (o.to_mfg_solution(&vp), serde_json::to_value(&o.report)?)
        }
    })
}

type Reference = Vec<Vec<f64>>;

static REFERENCES: Mutex<Option<HashMap<String, Reference>>> = Mutex::new(None);

/// Mid-horizon density of the long-time iteration, cached per problem and size.
pub fn stationary_reference(name: &str, problem: &MfgProblem, size: &ProblemSize) -> Result<Reference> {
    let key = format!("{name}:{}", serde_json::to_string(size)?);
    if let Some(r) = REFERENCES.lock().unwrap().get_or_insert_with(HashMap::new).get(&key) {
        return Ok(r.clone());
    }
    let mut p = problem.clone();
    if p.grid.nt % 2 == 1 {
        p.grid = p.grid.with_time(p.grid.nt + 1, p.grid.horizon)?;
    }
    let r = ergodic_longtime_solve(&p, &LongTimeParams::default())?.m_mid;
    REFERENCES.lock().unwrap().get_or_insert_with(HashMap::new).insert(key, r.clone());
    Ok(r)
}

fn min_density(m: &[Field]) -> f64 {
    m.iter().flat_map(|f| f.data.iter()).fold(f64::INFINITY, |a, &b| a.min(b))
}

fn masses(grid: &Grid, m: &Field) -> Vec<f64> {
    (0..m.levels).map(|n| grid.integrate(m.level(n))).collect()
}

fn write_population_fields(dir: &Path, stem: &str, grid: &Grid, sol: &MfgSolution) -> Result<()> {
    for k in 0..sol.u.len() {
        let name = if k == 0 { format!("{stem}.csv") } else { format!("{stem}_pop{k}.csv") };
        io::write_fields_file(&dir.join(name), grid, &sol.u[k], &sol.m[k])?;
    }
    Ok(())
}

fn run_time_dependent(cfg: &RunConfig, size: &ProblemSize, dir: &Path) -> Result<Value> {
    let problem = registry::build(&cfg.problem, size)?;
    let grid = problem.grid.clone();
    let start = Instant::now();
    let (sol, solver_report) = solved(&problem, &cfg.solver, cfg.multigrid)?;
    let solve_seconds = start.elapsed().as_secs_f64();
    let residual = mfg_residual(&problem, &sol)?;
    write_population_fields(dir, "fields", &grid, &sol)?;

    let start = Instant::now();
    let reference = stationary_reference(&cfg.problem, &problem, size)?;
    let distance = io::turnpike_curve(&grid, &sol.m, &reference);
    io::write_turnpike(&dir.join("turnpike.csv"), &grid, &distance)?;
    let turnpike_seconds = start.elapsed().as_secs_f64();

    let mut report = json!({
        "problem": cfg.problem,
        "solver": solver_report,
        "residual": residual,
        "min_density": min_density(&sol.m),
        "mass": sol.m.iter().map(|m| masses(&grid, m)).collect::<Vec<_>>(),
        "timings": { "solve_seconds": solve_seconds, "turnpike_seconds": turnpike_seconds },
    });

    if cfg.problem == "evacuation_mfg_vs_mfc" {
        let mfc = mfc_transform(&registry::evacuation(size, Mode::Mfg)?)?;
        let start = Instant::now();
        let (mfc_sol, mfc_report) = solved(&mfc, &cfg.solver, cfg.multigrid)?;
        write_population_fields(dir, "fields_mfc", &grid, &mfc_sol)?;
        let remaining = [masses(&grid, &sol.m[0]), masses(&grid, &mfc_sol.m[0])];
        io::write_series(&dir.join("remaining_mass.csv"), &grid, &["mfg", "mfc"], &remaining)?;
        let peak = |m: &Field| m.data.iter().fold(0.0f64, |a, &b| a.max(b));
        report["mfc"] = json!({
            "solver": mfc_report,
            "residual": mfg_residual(&mfc, &mfc_sol)?,
            "peak_density": peak(&mfc_sol.m[0]),
            "solve_seconds": start.elapsed().as_secs_f64(),
        });
        report["peak_density"] = json!(peak(&sol.m[0]));
    }
    Ok(report)
}

fn run_huggett(cfg: &RunConfig, dir: &Path) -> Result<Value> {
    let p = cfg.huggett.unwrap_or_default();
    let start = Instant::now();
    let sol = equilibrium_r_solve(&p)?;
    let diag = boundary_diagnostics(&p, &sol);
    io::write_huggett_fields(&dir.join("fields.csv"), &p, &sol)?;
    io::write_huggett_scalars(&dir.join("scalars.csv"), &sol, &diag)?;
    Ok(json!({
        "problem": "huggett",
        "r": sol.r,
        "aggregate_wealth": sol.aggregate_wealth,
        "group_masses": p.group_masses(),
        "diagnostics": diag,
        "timings": { "solve_seconds": start.elapsed().as_secs_f64() },
    }))
}

/// Solves the configured problem and writes `config.json`, `fields.csv`,
/// `report.json` and, for time-dependent problems, `turnpike.csv` into the
/// output directory (`--out` beats the config's `out`, default `./out`).
pub fn run(cfg: &RunConfig, out: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = out.map(Path::to_path_buf).or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    let mut effective = cfg.effective()?;
    effective.out = Some(dir.clone());
    io::write_json(&dir.join("config.json"), &effective)?;
    let report = match cfg.size()? {
        Some(size) => run_time_dependent(cfg, &size, &dir)?,
        None => run_huggett(cfg, &dir)?,
    };
    io::write_json(&dir.join("report.json"), &report)?;
    Ok(RunSummary { out: dir, report })
}

/// Runs the multigrid benchmark and writes `multigrid_bench.csv`.
pub fn run_bench(cfg: &BenchConfig, out: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = out.map(Path::to_path_buf).or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    let rows = bench_multigrid(&cfg.jobs, &cfg.settings)?;
    let path = dir.join("multigrid_bench.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["mode", "grid", "nu", "avg_iter_1e-3", "avg_iter_1e-8"])?;
    let cell = |v: Option<f64>| v.map_or_else(|| "fail".to_string(), |x| format!("{x}"));
    for r in rows {
        let mode = serde_json::to_value(r.mode)?.as_str().unwrap_or_default().to_string();
        w.write_record([
            mode,
            format!("{}^2x{}", r.n, r.nt),
            format!("{}", r.nu),
            cell(r.avg_reduce_1e3),
            cell(r.avg_reduce_1e8),
        ])?;
    }
    w.flush()?;
    Ok(path)
}
