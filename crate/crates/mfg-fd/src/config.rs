//! Run and benchmark configuration files (JSON, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{BenchJob, BenchSettings};
use crate::error::{Error, Result};
use crate::huggett::HuggettParams;
use crate::linalg::MultigridParams;
use crate::mfg::{NewtonParams, PicardParams, RecursiveParams};
use crate::registry::{self, ProblemSize};
use crate::variational::{validate_cp, AdmmParams, CpParams};

pub const SOLVERS: [&str; 5] = ["newton", "picard", "recursive", "admm", "cp"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverConfig {
    Newton(NewtonParams),
    Picard(PicardParams),
    Recursive(RecursiveParams),
    Admm(AdmmParams),
    Cp(CpParams),
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::Newton(NewtonParams::default())
    }
}

impl SolverConfig {
    pub fn name(&self) -> &'static str {
        match self {
            SolverConfig::Newton(_) => "newton",
            SolverConfig::Picard(_) => "picard",
            SolverConfig::Recursive(_) => "recursive",
            SolverConfig::Admm(_) => "admm",
            SolverConfig::Cp(_) => "cp",
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, SolverConfig::Admm(_) | SolverConfig::Cp(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub nt: Option<usize>,
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Preconditioner of the dual solves of `admm` and `cp`; direct when absent.
    #[serde(default)]
    pub multigrid: Option<MultigridParams>,
    #[serde(default)]
    pub huggett: Option<HuggettParams>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn minimal(problem: &str) -> Self {
        RunConfig {
            problem: problem.to_string(),
            dim: None,
            n: None,
            nt: None,
            nu: None,
            horizon: None,
            solver: SolverConfig::default(),
            multigrid: None,
            huggett: None,
            out: None,
            seed: 0,
        }
    }

    /// Grid and physics after filling registry defaults; `None` for the
    /// income model.
    pub fn size(&self) -> Result<Option<ProblemSize>> {
        Ok(registry::defaults(&self.problem)?.map(|d| ProblemSize {
            dim: self.dim.unwrap_or(d.dim),
            n: self.n.unwrap_or(d.n),
            nt: self.nt.unwrap_or(d.nt),
            nu: self.nu.unwrap_or(d.nu),
            horizon: self.horizon.unwrap_or(d.horizon),
        }))
    }

    /// Copy with every default written out, as echoed next to the results.
    pub fn effective(&self) -> Result<RunConfig> {
        let mut c = self.clone();
        if let Some(s) = self.size()? {
            c.dim = Some(s.dim);
            c.n = Some(s.n);
            c.nt = Some(s.nt);
            c.nu = Some(s.nu);
            c.horizon = Some(s.horizon);
        } else {
            c.huggett = Some(self.huggett.unwrap_or_default());
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let size = self.size()?;
        let mut bad: Vec<String> = Vec::new();
        match size {
            Some(s) => {
                if s.dim != 1 && s.dim != 2 {
                    bad.push(format!("dim: must be 1 or 2, got {}", s.dim));
                }
                if s.n < 2 {
                    bad.push(format!("n: need at least 2 nodes, got {}", s.n));
                }
                if s.nt < 1 {
                    bad.push("nt: need at least one time step".into());
                }
                if !(s.nu >= 0.0 && s.nu.is_finite()) {
                    bad.push(format!("nu: must be nonnegative, got {}", s.nu));
                }
                if !(s.horizon > 0.0 && s.horizon.is_finite()) {
                    bad.push(format!("horizon: must be positive, got {}", s.horizon));
                }
                if self.huggett.is_some() {
                    bad.push("huggett: only valid for the huggett problem".into());
                }
                if self.solver.is_variational() && self.problem != "example1_quadratic" {
                    bad.push(format!(
                        "solver: {} needs the variational example1_quadratic problem",
                        self.solver.name()
                    ));
                }
                if let Some(mg) = &self.multigrid {
                    if !self.solver.is_variational() {
                        bad.push("multigrid: only used by the admm and cp solvers".into());
                    }
                    if s.n % (1usize << mg.levels.min(20)) != 0 {
                        bad.push(format!("multigrid.levels: {} nodes cannot be halved {} times", s.n, mg.levels));
                    }
                }
            }
            None => {
                if let Some(h) = &self.huggett {
                    if let Err(e) = h.validate() {
                        bad.push(format!("huggett: {e}"));
                    }
                }
                if self.multigrid.is_some() {
                    bad.push("multigrid: not used by the huggett problem".into());
                }
            }
        }
        match &self.solver {
            SolverConfig::Newton(p) => {
                if !(p.tol > 0.0) || p.max_iter == 0 {
                    bad.push("solver: newton needs tol > 0 and max_iter > 0".into());
                }
            }
            SolverConfig::Picard(p) => {
                if !(p.delta > 0.0 && p.delta <= 1.0) || !(p.tol > 0.0) {
                    bad.push("solver.delta: must lie in (0, 1], tol > 0".into());
                }
            }
            SolverConfig::Recursive(p) => {
                if p.subintervals == 0 || p.rounds == 0 {
                    bad.push("solver: recursive needs subintervals > 0 and rounds > 0".into());
                } else if let Some(s) = size {
                    if s.nt % p.subintervals != 0 {
                        bad.push(format!("solver.subintervals: {} steps do not split into {}", s.nt, p.subintervals));
                    }
                }
            }
            SolverConfig::Admm(p) => {
                if !(p.r > 0.0) || !(p.tol > 0.0) {
                    bad.push("solver.r: admm needs r > 0 and tol > 0".into());
                }
            }
            SolverConfig::Cp(p) => {
                if let Err(e) = validate_cp(p) {
                    bad.push(format!("solver.s: {e}"));
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))
}

/// Parses and validates a run configuration from JSON text.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let c: RunConfig = parse_json(text)?;
    c.validate()?;
    Ok(c)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub jobs: Vec<BenchJob>,
    #[serde(default)]
    pub settings: BenchSettings,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (k, j) in self.jobs.iter().enumerate() {
            if j.n < 4 || j.n % (1usize << j.levels.min(20)) != 0 {
                bad.push(format!("jobs[{k}].n: {} nodes cannot be halved {} times", j.n, j.levels));
            }
            if j.nt == 0 || !(j.nu > 0.0) {
                bad.push(format!("jobs[{k}]: need nt > 0 and nu > 0"));
            }
        }
        if self.settings.cp_iterations == 0 {
            bad.push("settings.cp_iterations: must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

pub fn parse_bench_config(text: &str) -> Result<BenchConfig> {
    let c: BenchConfig = parse_json(text)?;
    c.validate()?;
    Ok(c)
}
