//! Iteration counts of the multigrid-preconditioned Krylov solver inside
//! primal-dual iterations on the two-dimensional quadratic example.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CoarseningMode, MultigridParams, Transfer};
use crate::registry::{example1, ProblemSize};
use crate::variational::{
    chambolle_pock_step, CpParams, CpState, DualLinearSolver, DualSolverKind, VariationalProblem,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchJob {
    pub mode: CoarseningMode,
    /// Nodes per space axis.
    pub n: usize,
    pub nt: usize,
    pub nu: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default)]
    pub transfer: Transfer,
}

fn default_levels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: CoarseningMode,
    pub n: usize,
    pub nt: usize,
    pub nu: f64,
    /// Average iterations to reduce the residual by `1e-3`, `None` on failure.
    pub avg_reduce_1e3: Option<f64>,
    /// Average iterations to reduce the residual by `1e-8`, `None` on failure.
    pub avg_reduce_1e8: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSettings {
    /// Primal-dual iterations per job; every iteration performs one solve.
    #[serde(default = "default_cp_iterations")]
    pub cp_iterations: usize,
    #[serde(default = "default_eta")]
    pub eta1: usize,
    #[serde(default = "default_eta")]
    pub eta2: usize,
    /// Krylov iteration cap; exceeding it marks the job as failed.
    #[serde(default = "default_cap")]
    pub max_krylov: usize,
}

fn default_cp_iterations() -> usize {
    10
}

fn default_eta() -> usize {
    2
}

fn default_cap() -> usize {
    300
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { cp_iterations: 10, eta1: 2, eta2: 2, max_krylov: 300 }
    }
}

/// Average Krylov iterations per solve over `cp_iterations` warm-started
/// primal-dual iterations, each solve stopped at a residual reduction `factor`.
pub fn average_iterations(job: &BenchJob, settings: &BenchSettings, factor: f64) -> Result<Option<f64>> {
    let size = ProblemSize { dim: 2, n: job.n, nt: job.nt, nu: job.nu, horizon: 1.0 };
    let vp = VariationalProblem::from_mfg(&example1(&size)?)?;
    let mg = MultigridParams {
        mode: job.mode,
        levels: job.levels,
        eta1: settings.eta1,
        eta2: settings.eta2,
        transfer: job.transfer,
    };
    let mut solver = DualLinearSolver::new(&vp.grid, vp.nu, DualSolverKind::Multigrid(mg))?;
    solver.reduction = Some(factor);
    solver.max_iter = settings.max_krylov;
    let params = CpParams::default();
    let mut st = CpState::initial(&vp);
    let mut total = 0;
    for _ in 0..settings.cp_iterations {
        match chambolle_pock_step(&vp, &solver, &mut st, &params) {
            Ok((_, li)) => total += li,
            Err(Error::NotConverged { .. }) | Err(Error::Breakdown(_)) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(total as f64 / settings.cp_iterations.max(1) as f64))
}

pub fn bench_multigrid(jobs: &[BenchJob], settings: &BenchSettings) -> Result<Vec<BenchRow>> {
    jobs.iter()
        .map(|job| {
            Ok(BenchRow {
                mode: job.mode,
                n: job.n,
                nt: job.nt,
                nu: job.nu,
                avg_reduce_1e3: average_iterations(job, settings, 1e-3)?,
                avg_reduce_1e8: average_iterations(job, settings, 1e-8)?,
            })
        })
        .collect()
}
