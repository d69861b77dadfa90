use mfg_fd::grid::{nabla, BoundaryRole, BoundarySegment, BoundarySpec, Field, Grid};
use mfg_fd::hamiltonian::DiscreteHamiltonian;
use mfg_fd::mfg::{
    boundary_fluxes, coupling_data, hjb_backward_step, kfp_forward_step, mfc_transform, mfg_residual, transport,
    LocalCost, MfgProblem, MfgSolution, Mode, Population, Terminal,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn problem(grid: Grid, nu: f64, ham: DiscreteHamiltonian, boundary: BoundarySpec) -> MfgProblem {
    let n = grid.nodes();
    MfgProblem {
        populations: vec![Population {
            hamiltonian: ham,
            cost: LocalCost::Polynomial { shift: vec![0.0; n], linear: 0.0, quadratic: 0.0 },
            terminal: Terminal::zero(n),
            m0: grid.uniform_density(),
            boundary,
        }],
        grid,
        nu,
        mode: Mode::Mfg,
    }
}

fn quadratic_torus(dim: usize, n: usize, nt: usize, nu: f64) -> MfgProblem {
    problem(Grid::torus(dim, n, nt, 1.0).unwrap(), nu, DiscreteHamiltonian::GodunovQuadratic, BoundarySpec::walls())
}

fn face(high: bool, role: BoundaryRole) -> BoundarySpec {
    BoundarySpec { segments: vec![BoundarySegment { axis: 0, high, from: 0.0, to: f64::INFINITY, role }] }
}

fn random(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn mass(grid: &Grid, m: &[f64]) -> f64 {
    grid.integrate(m)
}

#[test]
fn transport_vanishes_for_constant_values() {
    let p = quadratic_torus(2, 8, 1, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random(64, 0.0, 2.0, &mut rng);
    assert!(transport(&p, 0, &[3.0; 64], &m, None).iter().all(|v| *v == 0.0));
}

#[test]
fn transport_is_minus_the_adjoint_of_the_linearised_drift() {
    let p = quadratic_torus(1, 8, 1, 0.1);
    let g = &p.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (u, m, w) = (random(8, -1.0, 1.0, &mut rng), random(8, 0.0, 1.0, &mut rng), random(8, -1.0, 1.0, &mut rng));
    let t = transport(&p, 0, &u, &m, None);
    let (du, dw) = (nabla(g, &u), nabla(g, &w));
    let lhs: f64 = t.iter().zip(&w).map(|(a, b)| a * b).sum();
    let rhs: f64 = (0..8)
        .map(|i| {
            let hq = DiscreteHamiltonian::GodunovQuadratic.grad_q([0.0; 2], &du[2 * i..2 * i + 2], &[]);
            -m[i] * (hq[0] * dw[2 * i] + hq[1] * dw[2 * i + 1])
        })
        .sum();
    assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
}

#[test]
fn hjb_step_without_hamiltonian_keeps_constants() {
    let g = Grid::torus(1, 16, 4, 1.0).unwrap();
    let ham = DiscreteHamiltonian::GodunovPower { beta: 2.0, scale: 1e-300, potential: Default::default() };
    let p = problem(g, 1.0, ham, BoundarySpec::walls());
    let (u, _) = hjb_backward_step(&p, 0, &[2.5; 16], &[&[1.0; 16]]).unwrap();
    assert!(u.iter().all(|v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn inviscid_hjb_step_solves_each_nodal_equation() {
    let p = quadratic_torus(1, 4, 4, 0.0);
    let (dt, h) = (p.grid.dt, p.grid.h);
    let next = [0.0, 1.0, 0.0, 0.0];
    let (u, _) = hjb_backward_step(&p, 0, &next, &[&[1.0; 4]]).unwrap();
    for i in 0..4 {
        let (right, left) = (u[(i + 1) % 4], u[(i + 3) % 4]);
        let eq = |x: f64| {
            let fwd = ((right - x) / h).min(0.0);
            let bwd = ((x - left) / h).max(0.0);
            (x - next[i]) / dt + 0.5 * (fwd * fwd + bwd * bwd)
        };
        let (mut lo, mut hi) = (-10.0, 10.0);
        assert!(eq(lo) < 0.0 && eq(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if eq(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((u[i] - 0.5 * (lo + hi)).abs() < 1e-10, "node {i}: {} vs {lo}", u[i]);
    }
}

#[test]
fn hjb_step_is_monotone() {
    let p = quadratic_torus(2, 6, 4, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random(36, 0.0, 1.0, &mut rng);
    for _ in 0..20 {
        let low = random(36, -1.0, 1.0, &mut rng);
        let high: Vec<f64> = low.iter().map(|v| v + rng.gen_range(0.0..0.5)).collect();
        let (ul, _) = hjb_backward_step(&p, 0, &low, &[&m]).unwrap();
        let (uh, _) = hjb_backward_step(&p, 0, &high, &[&m]).unwrap();
        assert!(ul.iter().zip(&uh).all(|(a, b)| *a <= *b + 1e-10));
    }
}

#[test]
fn uniform_density_is_invariant_without_drift() {
    let p = quadratic_torus(2, 8, 4, 0.3);
    let m = p.grid.uniform_density();
    let next = kfp_forward_step(&p, 0, &[1.0; 64], &m, None).unwrap();
    assert!(next.iter().zip(&m).all(|(a, b)| (a - b).abs() < 1e-13));
}

#[test]
fn random_drift_conserves_mass_and_sign() {
    let p = quadratic_torus(2, 8, 50, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = random(64, 0.0, 2.0, &mut rng);
    let m0 = mass(&p.grid, &m);
    for _ in 0..50 {
        let u = random(64, -2.0, 2.0, &mut rng);
        m = kfp_forward_step(&p, 0, &u, &m, None).unwrap();
        assert!(m.iter().all(|v| *v >= 0.0));
    }
    assert!((mass(&p.grid, &m) - m0).abs() <= 1e-12);
}

#[test]
fn constant_drift_translates_the_centre_of_mass() {
    let (n, steps, speed) = (200, 20, 1.0);
    let g = Grid::bounded(1, n, steps, 0.4, 4.0).unwrap();
    let p = problem(g, 1e-3, DiscreteHamiltonian::GodunovQuadratic, BoundarySpec::walls());
    let g = &p.grid;
    let u: Vec<f64> = (0..n).map(|i| -speed * g.axis_coord(i)).collect();
    let mut m: Vec<f64> = (0..n).map(|i| (-((g.axis_coord(i) - 1.5) / 0.2).powi(2)).exp()).collect();
    let centre = |m: &[f64]| {
        let total: f64 = m.iter().sum();
        (0..n).map(|i| g.axis_coord(i) * m[i]).sum::<f64>() / total
    };
    let start = centre(&m);
    for _ in 0..steps {
        m = kfp_forward_step(&p, 0, &u, &m, None).unwrap();
    }
    let moved = centre(&m) - start;
    assert!((moved - speed * g.horizon).abs() <= g.h, "moved {moved}");
}

fn constant_solution(p: &MfgProblem) -> MfgSolution {
    let g = &p.grid;
    MfgSolution {
        u: vec![Field::zeros(g.nt + 1, g.nodes())],
        m: vec![Field::from_level(g.nt + 1, &g.uniform_density())],
    }
}

#[test]
fn residual_of_the_trivial_solution_is_zero() {
    let p = quadratic_torus(2, 8, 5, 0.1);
    let r = mfg_residual(&p, &constant_solution(&p)).unwrap();
    assert_eq!((r.hjb, r.kfp, r.terminal, r.total), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn residual_sees_a_value_perturbation_at_the_time_step_scale() {
    let p = quadratic_torus(1, 8, 10, 0.01);
    let dt = p.grid.dt;
    for delta in [1e-3, 1e-5] {
        let mut sol = constant_solution(&p);
        sol.u[0].level_mut(4)[3] += delta;
        let r = mfg_residual(&p, &sol).unwrap();
        let ratio = r.hjb / (delta / dt);
        assert!((1.0..=1.5).contains(&ratio), "ratio {ratio}");
    }
}

fn evacuation_like(length: f64) -> MfgProblem {
    let g = Grid::bounded(1, 20, 10, 1.0, length).unwrap();
    let ham = DiscreteHamiltonian::CongestionPower { scale: 8.0, exponent: 0.75 };
    problem(g, 0.05, ham, face(true, BoundaryRole::Exit { cost: 0.0 }))
}

#[test]
fn control_transform_at_zero_density_keeps_the_hamiltonian() {
    let p = evacuation_like(1.0);
    let c = mfc_transform(&p).unwrap();
    let g = &p.grid;
    let zero = vec![Field::zeros(g.nt + 1, g.nodes())];
    let d = coupling_data(&c, &zero).unwrap();
    let z = d.pops[0].z_hjb.as_ref().unwrap();
    assert!(z.data.iter().all(|v| (v - 8.0).abs() < 1e-12));
    assert!(d.pops[0].z_kfp.as_ref().unwrap().data.iter().all(|v| (v - 8.0).abs() < 1e-12));
    assert_eq!(d.pops[0].terminal, p.populations[0].terminal.shift);
}

#[test]
fn control_transform_differentiates_the_density_weighted_hamiltonian() {
    let p = evacuation_like(1.0);
    let c = mfc_transform(&p).unwrap();
    let g = &p.grid;
    let levels: Vec<f64> = (0..g.nodes()).map(|i| 0.05 + 0.4 * i as f64).collect();
    let m = vec![Field::from_level(g.nt + 1, &levels)];
    let d = coupling_data(&c, &m).unwrap();
    let factor = |m: f64| 8.0 * (1.0 + m).powf(-0.75);
    let z_hjb = d.pops[0].z_hjb.as_ref().unwrap().level(0);
    let z_kfp = d.pops[0].z_kfp.as_ref().unwrap().level(0);
    for (i, &mi) in levels.iter().enumerate() {
        let e = 1e-6;
        let fd = ((mi + e) * factor(mi + e) - (mi - e) * factor(mi - e)) / (2.0 * e);
        assert!((z_hjb[i] - fd).abs() <= 1e-6 * fd.abs(), "m = {mi}");
        assert!((z_kfp[i] - factor(mi)).abs() <= 1e-12);
    }
}

#[test]
fn walls_close_the_domain() {
    let g = Grid::bounded(1, 16, 30, 1.0, 1.0).unwrap();
    let p = problem(g, 0.2, DiscreteHamiltonian::GodunovQuadratic, BoundarySpec::walls());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = random(16, 0.0, 1.0, &mut rng);
    let m0 = mass(&p.grid, &m);
    for _ in 0..30 {
        m = kfp_forward_step(&p, 0, &random(16, -1.0, 1.0, &mut rng), &m, None).unwrap();
    }
    assert!((mass(&p.grid, &m) - m0).abs() <= 1e-12);
}

#[test]
fn an_exit_drains_mass() {
    let p = evacuation_like(1.0);
    let mut m = vec![1.0; 20];
    let mut last = mass(&p.grid, &m);
    let u: Vec<f64> = (0..20).map(|i| -(i as f64) / 20.0).collect();
    for _ in 0..10 {
        let z = vec![1.0; 20];
        m = kfp_forward_step(&p, 0, &u, &m, Some(&z)).unwrap();
        let now = mass(&p.grid, &m);
        assert!(now < last && m[19] > 0.0);
        last = now;
    }
}

#[test]
fn an_entrance_adds_its_flux_every_step() {
    let flux = 0.7;
    let g = Grid::bounded(1, 16, 10, 1.0, 2.0).unwrap();
    let p =
        problem(g, 0.1, DiscreteHamiltonian::GodunovQuadratic, face(false, BoundaryRole::Entrance { cost: 0.0, flux }));
    let mut m = vec![0.0; 16];
    let zero = vec![0.0; 16];
    for step in 1..=10 {
        m = kfp_forward_step(&p, 0, &zero, &m, None).unwrap();
        assert!((mass(&p.grid, &m) - flux * p.grid.dt * step as f64).abs() <= 1e-10);
    }
    let (entry, exit) = boundary_fluxes(&p, 0, &zero, &m, None);
    assert!((entry - flux).abs() < 1e-12 && exit == 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transport_sums_to_zero_on_the_torus(
        u in prop::collection::vec(-2.0f64..2.0, 16),
        m in prop::collection::vec(0.0f64..2.0, 16),
    ) {
        let p = quadratic_torus(2, 4, 1, 0.1);
        let s: f64 = transport(&p, 0, &u, &m, None).iter().sum();
        prop_assert!(s.abs() < 1e-12);
    }

    #[test]
    fn kfp_step_keeps_mass_and_sign(
        u in prop::collection::vec(-2.0f64..2.0, 12),
        m in prop::collection::vec(0.0f64..2.0, 12),
        torus in any::<bool>(),
    ) {
        let g = if torus { Grid::torus(1, 12, 4, 1.0) } else { Grid::bounded(1, 12, 4, 1.0, 1.0) }.unwrap();
        let p = problem(g, 0.05, DiscreteHamiltonian::GodunovQuadratic, BoundarySpec::walls());
        let next = kfp_forward_step(&p, 0, &u, &m, None).unwrap();
        prop_assert!(next.iter().all(|v| *v >= 0.0));
        prop_assert!((mass(&p.grid, &next) - mass(&p.grid, &m)).abs() < 1e-12);
    }
}
