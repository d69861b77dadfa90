use mfg_fd::grid::{nabla, BoundarySpec, Field, Grid};
use mfg_fd::hamiltonian::{project_k, DiscreteHamiltonian};
use mfg_fd::linalg::{norm2, MultigridParams};
use mfg_fd::mfg::{LocalCost, MfgProblem, Mode, Population, Terminal};
use mfg_fd::registry::{self, ProblemSize};
use mfg_fd::variational::{
    admm_solve, apply_a, apply_a_star, apply_b, apply_b_star, chambolle_pock_solve, l_tilde, theta_value, AdmmParams,
    CpParams, DualLinearSolver, DualSolverKind, Extended, PrimalPoint, VariationalProblem,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_field(levels: usize, nodes: usize, rng: &mut ChaCha8Rng) -> Field {
    Field { levels, nodes, data: (0..levels * nodes).map(|_| rng.gen_range(-1.0..1.0)).collect() }
}

fn inner(a: &Field, b: &Field) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

#[test]
fn time_operator_kills_stationary_densities_without_viscosity() {
    let g = Grid::torus(2, 6, 5, 1.0).unwrap();
    let m = Field::from_level(6, &[0.7; 36]);
    assert!(apply_a(&g, 0.0, &m).unwrap().data.iter().all(|v| *v == 0.0));
}

#[test]
fn time_operator_is_a_forward_difference_for_unit_step() {
    let g = Grid::torus(1, 2, 3, 3.0).unwrap();
    for col in 0..8 {
        let mut m = Field::zeros(4, 2);
        m.data[col] = 1.0;
        let am = apply_a(&g, 0.0, &m).unwrap();
        for row in 0..6 {
            let (n, i) = (row / 2, row % 2);
            let expect = if col == (n + 1) * 2 + i {
                1.0
            } else if col == n * 2 + i {
                -1.0
            } else {
                0.0
            };
            assert_eq!(am.data[row], expect, "row {row} col {col}");
        }
    }
}

#[test]
fn time_operator_and_its_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (dim, n, nt, nu) in [(1, 16, 8, 0.3), (2, 8, 4, 0.05), (1, 64, 32, 1.0)] {
        let g = Grid::torus(dim, n, nt, 1.0).unwrap();
        let m = random_field(nt + 1, g.nodes(), &mut rng);
        let u = random_field(nt, g.nodes(), &mut rng);
        let lhs = inner(&apply_a(&g, nu, &m).unwrap(), &u);
        let rhs = inner(&m, &apply_a_star(&g, nu, &u).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0) * 1e2);
    }
}

#[test]
fn momentum_adjoint_on_a_hat() {
    let g = Grid::torus(1, 4, 1, 1.0).unwrap();
    let u = Field::from_level(1, &[0.0, 1.0, 0.0, 0.0]);
    let b = apply_b_star(&g, &u).unwrap();
    assert_eq!(&b.data[2..4], &[4.0, -4.0]);
}

#[test]
fn momentum_divergence_has_zero_mean_and_matches_its_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for g in [Grid::torus(2, 8, 3, 1.0).unwrap(), Grid::bounded(1, 12, 4, 1.0, 2.0).unwrap()] {
        let w = random_field(g.nt, g.nodes() * g.slots(), &mut rng);
        let u = random_field(g.nt, g.nodes(), &mut rng);
        let bw = apply_b(&g, &w).unwrap();
        for n in 0..g.nt {
            assert!(bw.level(n).iter().sum::<f64>().abs() < 1e-11);
        }
        let lhs = inner(&bw, &u);
        let rhs = inner(&w, &apply_b_star(&g, &u).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0) * 1e2);
    }
}

#[test]
fn perspective_function_values() {
    let h = DiscreteHamiltonian::GodunovQuadratic;
    assert_eq!(l_tilde(&h, [0.0; 2], 1.0, &[-1.0, 0.0]).unwrap(), Extended::Finite(0.5));
    assert_eq!(l_tilde(&h, [0.0; 2], 0.0, &[-1.0, 0.0]).unwrap(), Extended::PlusInfinity);
    assert_eq!(l_tilde(&h, [0.0; 2], 0.0, &[0.0, 0.0]).unwrap(), Extended::Finite(0.0));
}

fn zero_shift_problem(n: usize, nt: usize) -> VariationalProblem {
    let grid = Grid::torus(1, n, nt, 1.0).unwrap();
    VariationalProblem::from_mfg(&MfgProblem {
        populations: vec![Population {
            hamiltonian: DiscreteHamiltonian::GodunovQuadratic,
            cost: LocalCost::Polynomial { shift: vec![0.0; n], linear: 1.0, quadratic: 0.0 },
            terminal: Terminal::zero(n),
            m0: vec![1.0; n],
            boundary: BoundarySpec::walls(),
        }],
        grid,
        nu: 0.1,
        mode: Mode::Mfg,
    })
    .unwrap()
}

#[test]
fn primal_functional_vanishes_at_zero() {
    let vp = zero_shift_problem(8, 4);
    let p = PrimalPoint { m: Field::zeros(5, 8), w: Field::zeros(4, 16) };
    assert_eq!(theta_value(&vp, &p).unwrap(), Extended::Finite(0.0));
}

#[test]
fn dual_systems_recover_manufactured_solutions() {
    let g = Grid::torus(1, 16, 8, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kinds =
        [DualSolverKind::Direct, DualSolverKind::Multigrid(MultigridParams { levels: 2, ..Default::default() })];
    for kind in kinds {
        let solver = DualLinearSolver::new(&g, 0.3, kind).unwrap();
        let exact: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rhs = solver.op.matvec(&exact);
        let (x, _) = solver.solve(&rhs).unwrap();
        let err: Vec<f64> = x.iter().zip(&exact).map(|(a, b)| a - b).collect();
        assert!(norm2(&err) <= 1e-6 * norm2(&exact), "{kind:?}");
        let (z, it) = solver.solve(&[0.0; 128]).unwrap();
        assert!(z.iter().all(|v| *v == 0.0) && it == 0);
    }
}

fn benchmark(n: usize, nt: usize) -> VariationalProblem {
    let p = registry::example1(&ProblemSize { dim: 1, n, nt, nu: 0.5, horizon: 1.0 }).unwrap();
    VariationalProblem::from_mfg(&p).unwrap()
}

fn momentum_gap(vp: &VariationalProblem, m: &Field, w: &Field, u: &Field) -> f64 {
    let s = vp.slots();
    let mut worst = 0.0f64;
    for n in 0..vp.grid.nt {
        let grad = nabla(&vp.grid, u.level(n));
        for i in 0..vp.nodes() {
            let pk = project_k(&grad[i * s..(i + 1) * s]);
            for k in 0..s {
                let expect = m.level(n + 1)[i] * pk[k];
                worst = worst.max((w.level(n)[i * s + k] - expect).abs());
            }
        }
    }
    worst
}

#[test]
fn admm_keeps_mass_and_the_momentum_relation() {
    let vp = benchmark(16, 16);
    let out = admm_solve(&vp, &AdmmParams { tol: 1e-10, ..Default::default() }).unwrap();
    let mass0: f64 = vp.grid.integrate(&vp.m0);
    for n in 0..=vp.grid.nt {
        assert!((vp.grid.integrate(out.primal.m.level(n)) - mass0).abs() <= 1e-8);
    }
    assert!(momentum_gap(&vp, &out.primal.m, &out.primal.w, &out.dual.u) <= 1e-6);
}

#[test]
fn primal_dual_methods_agree() {
    let vp = benchmark(16, 16);
    let admm = admm_solve(&vp, &AdmmParams { tol: 1e-10, ..Default::default() }).unwrap();
    let cp = chambolle_pock_solve(&vp, &CpParams { tol: 1e-10, ..Default::default() }).unwrap();
    let diff: f64 = admm.primal.m.data.iter().zip(&cp.primal.m.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let l2 = (diff * vp.grid.cell_volume() * vp.grid.dt).sqrt();
    assert!(l2 <= 1e-4, "L2 distance {l2}");
    assert!(momentum_gap(&vp, &cp.primal.m, &cp.primal.w, &cp.dual.u) <= 1e-6);
}
