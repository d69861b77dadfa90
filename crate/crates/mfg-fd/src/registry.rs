//! Named benchmark problems and their desk-scale defaults.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryRole, BoundarySegment, BoundarySpec, Grid};
use crate::hamiltonian::{DiscreteHamiltonian, Potential};
use crate::mfg::{smoothing_resolvent, LocalCost, MfgProblem, Mode, Population, Terminal};

pub const PROBLEMS: [&str; 5] =
    ["example1_quadratic", "ergodic_demo", "two_population", "evacuation_mfg_vs_mfc", "huggett"];

/// Grid and physical parameters shared by the time-dependent problems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemSize {
    pub dim: usize,
    pub n: usize,
    pub nt: usize,
    pub nu: f64,
    pub horizon: f64,
}

pub struct Entry {
    pub name: &'static str,
    pub summary: &'static str,
    pub defaults: Option<ProblemSize>,
}

pub fn entries() -> Vec<Entry> {
    vec![
        Entry {
            name: "example1_quadratic",
            summary: "quadratic Hamiltonian, f = m^2 - Hbar(x) on the torus",
            defaults: Some(ProblemSize { dim: 2, n: 32, nt: 64, nu: 0.5, horizon: 1.0 }),
        },
        Entry {
            name: "ergodic_demo",
            summary: "|p|^(3/2) with a trigonometric landscape, smoothing coupling, nu = 0.001",
            defaults: Some(ProblemSize { dim: 2, n: 32, nt: 20, nu: 0.001, horizon: 2.0 }),
        },
        Entry {
            name: "two_population",
            summary: "two crowds crossing a corridor with congestion and xenophobia",
            defaults: Some(ProblemSize { dim: 1, n: 40, nt: 40, nu: 0.3, horizon: 4.0 }),
        },
        Entry {
            name: "evacuation_mfg_vs_mfc",
            summary: "congested evacuation of a corridor through one exit, game and control",
            defaults: Some(ProblemSize { dim: 1, n: 80, nt: 60, nu: 0.05, horizon: 30.0 }),
        },
        Entry {
            name: "huggett",
            summary: "two-income stationary wealth distribution and interest rate",
            defaults: None,
        },
    ]
}

pub fn defaults(name: &str) -> Result<Option<ProblemSize>> {
    entries()
        .into_iter()
        .find(|e| e.name == name)
        .map(|e| e.defaults)
        .ok_or_else(|| Error::Config(format!("unknown problem `{name}`, expected one of {}", PROBLEMS.join(", "))))
}

/// Builds a registered time-dependent problem.
pub fn build(name: &str, size: &ProblemSize) -> Result<MfgProblem> {
    let p = match name {
        "example1_quadratic" => example1(size)?,
        "ergodic_demo" => ergodic_demo(size)?,
        "two_population" => two_population(size)?,
        "evacuation_mfg_vs_mfc" => evacuation(size, Mode::Mfg)?,
        "huggett" => return Err(Error::Config("huggett is not a time-dependent problem".into())),
        _ => return Err(Error::Config(format!("unknown problem `{name}`"))),
    };
    p.validate()?;
    Ok(p)
}

/// `Hbar(x) = sin(2 pi x2) + sin(2 pi x1) + cos(2 pi x1)`, the first term
/// dropped in one dimension.
pub fn example1_landscape(grid: &Grid) -> Vec<f64> {
    (0..grid.nodes())
        .map(|k| {
            let [x1, x2] = grid.coords(k);
            let base = (2.0 * PI * x1).sin() + (2.0 * PI * x1).cos();
            if grid.dim == 2 {
                base + (2.0 * PI * x2).sin()
            } else {
                base
            }
        })
        .collect()
}

pub fn example1(size: &ProblemSize) -> Result<MfgProblem> {
    let grid = Grid::torus(size.dim, size.n, size.nt, size.horizon)?;
    let shift = example1_landscape(&grid).into_iter().map(|v| -v).collect();
    let nodes = grid.nodes();
    Ok(MfgProblem {
        grid,
        nu: size.nu,
        populations: vec![Population {
            hamiltonian: DiscreteHamiltonian::GodunovQuadratic,
            cost: LocalCost::Polynomial { shift, linear: 0.0, quadratic: 1.0 },
            terminal: Terminal::zero(nodes),
            m0: vec![1.0; nodes],
            boundary: BoundarySpec::walls(),
        }],
        mode: Mode::Mfg,
    })
}

pub fn ergodic_demo(size: &ProblemSize) -> Result<MfgProblem> {
    let grid = Grid::torus(size.dim, size.n, size.nt, size.horizon)?;
    let nodes = grid.nodes();
    let resolvent = Box::new(smoothing_resolvent(&grid)?);
    Ok(MfgProblem {
        nu: size.nu,
        populations: vec![Population {
            hamiltonian: DiscreteHamiltonian::GodunovPower {
                beta: 1.5,
                scale: 1.0,
                potential: Potential::TrigLandscape,
            },
            cost: LocalCost::Smoothing { shift: vec![0.0; nodes], scale: 1.0, resolvent },
            terminal: Terminal::zero(nodes),
            m0: vec![1.0; nodes],
            boundary: BoundarySpec::walls(),
        }],
        grid,
        mode: Mode::Mfg,
    })
}

fn face(axis: usize, high: bool, role: BoundaryRole) -> BoundarySegment {
    BoundarySegment { axis, high, from: 0.0, to: f64::INFINITY, role }
}

/// Corridor `[0, 2]` crossed in opposite directions: population 0 enters on
/// the left and is rewarded on the right, population 1 the reverse.
pub fn two_population(size: &ProblemSize) -> Result<MfgProblem> {
    if size.dim != 1 {
        return Err(Error::Config("two_population uses a one-dimensional corridor".into()));
    }
    let grid = Grid::bounded(1, size.n, size.nt, size.horizon, 2.0)?;
    let nodes = grid.nodes();
    let ham = DiscreteHamiltonian::Congestion2D { self_weight: 1.0, other_weight: 5.0 };
    let cost = LocalCost::Crowd { eps: 1e-2, smoothing: 1e-2 };
    let pop = |entrance_high: bool| Population {
        hamiltonian: ham,
        cost: cost.clone(),
        terminal: Terminal::zero(nodes),
        m0: vec![0.0; nodes],
        boundary: BoundarySpec {
            segments: vec![
                face(0, entrance_high, BoundaryRole::Entrance { cost: 0.0, flux: 1.0 }),
                face(0, !entrance_high, BoundaryRole::Exit { cost: -4.0 }),
            ],
        },
    };
    Ok(MfgProblem { grid, nu: size.nu, populations: vec![pop(false), pop(true)], mode: Mode::Mfg })
}

pub fn evacuation(size: &ProblemSize, mode: Mode) -> Result<MfgProblem> {
    evacuation_corridor(size, EVACUATION_LENGTH, EVACUATION_EXIT_COST, mode)
}

pub const EVACUATION_LENGTH: f64 = 4.0;
/// Value imposed at the door; negative values reward leaving.
pub const EVACUATION_EXIT_COST: f64 = -0.5;

/// Corridor `[0, length]` with an exit on the right, walls elsewhere,
/// initially packed at density 4 on its left half.
pub fn evacuation_corridor(size: &ProblemSize, length: f64, exit_cost: f64, mode: Mode) -> Result<MfgProblem> {
    if size.dim != 1 {
        return Err(Error::Config("evacuation uses a one-dimensional corridor".into()));
    }
    let grid = Grid::bounded(1, size.n, size.nt, size.horizon, length)?;
    let nodes = grid.nodes();
    let m0 = (0..nodes).map(|i| if grid.axis_coord(i) < 0.5 * length { 4.0 } else { 0.0 }).collect();
    Ok(MfgProblem {
        grid,
        nu: size.nu,
        populations: vec![Population {
            hamiltonian: DiscreteHamiltonian::CongestionPower { scale: 8.0, exponent: 0.75 },
            cost: LocalCost::Polynomial { shift: vec![1.0 / 3200.0; nodes], linear: 0.0, quadratic: 0.0 },
            terminal: Terminal::zero(nodes),
            m0,
            boundary: BoundarySpec { segments: vec![face(0, true, BoundaryRole::Exit { cost: exit_cost })] },
        }],
        mode,
    })
}
