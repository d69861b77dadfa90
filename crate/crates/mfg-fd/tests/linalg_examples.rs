use mfg_fd::linalg::{
    bicgstab, cubic_prolongation_1d, dot, gauss_seidel, norm2, prolongation_1d, restriction_1d,
    transfer_operators_with, CoarseningMode, CsrMatrix, IdentityPreconditioner, Multigrid, MultigridParams,
    SpaceTimeShape, Transfer, Triplets,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn poisson_1d(n: usize) -> CsrMatrix {
    let mut t = Triplets::new(n, n);
    for i in 0..n {
        t.push(i, i, 2.0);
        if i > 0 {
            t.push(i, i - 1, -1.0);
        }
        if i + 1 < n {
            t.push(i, i + 1, -1.0);
        }
    }
    t.to_csr()
}

/// `-u'' + u` on a periodic grid of `n` points, `h = 1/n`.
fn periodic_helmholtz(n: usize) -> CsrMatrix {
    let h2 = 1.0 / (n * n) as f64;
    let mut t = Triplets::new(n, n);
    for i in 0..n {
        t.push(i, i, 2.0 / h2 + 1.0);
        t.push(i, (i + n - 1) % n, -1.0 / h2);
        t.push(i, (i + 1) % n, -1.0 / h2);
    }
    t.to_csr()
}

fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.matvec(x);
    norm2(&b.iter().zip(&ax).map(|(p, q)| p - q).collect::<Vec<_>>())
}

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn one_d(n: usize) -> SpaceTimeShape {
    SpaceTimeShape { nt: 1, n, dim: 1 }
}

fn params(levels: usize, transfer: Transfer) -> MultigridParams {
    MultigridParams { mode: CoarseningMode::Semi, levels, eta1: 2, eta2: 2, transfer }
}

#[test]
fn gauss_seidel_solves_diagonal_in_one_sweep() {
    let mut t = Triplets::new(4, 4);
    for (i, d) in [2.0, 5.0, -1.0, 0.5].iter().enumerate() {
        t.push(i, i, *d);
    }
    let a = t.to_csr();
    let b = [1.0, 2.0, 3.0, 4.0];
    let mut x = vec![7.0; 4];
    gauss_seidel(&a, &mut x, &b, 1);
    assert_eq!(x, vec![0.5, 0.4, -3.0, 8.0]);
}

#[test]
fn gauss_seidel_residual_decreases_every_sweep() {
    let a = poisson_1d(32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random(32, &mut rng);
    let mut x = vec![0.0; 32];
    let mut last = residual(&a, &x, &b);
    for _ in 0..5 {
        gauss_seidel(&a, &mut x, &b, 1);
        let r = residual(&a, &x, &b);
        assert!(r < last, "{r} >= {last}");
        last = r;
    }
}

#[test]
fn gauss_seidel_damps_oscillatory_error_only() {
    let n = 32;
    let a = poisson_1d(n);
    let zero = vec![0.0; n];
    let mut rough: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let mut smooth: Vec<f64> = (0..n).map(|i| (std::f64::consts::PI * (i + 1) as f64 / (n + 1) as f64).sin()).collect();
    let (r0, s0) = (norm2(&rough), norm2(&smooth));
    gauss_seidel(&a, &mut rough, &zero, 2);
    gauss_seidel(&a, &mut smooth, &zero, 2);
    assert!(r0 / norm2(&rough) >= 5.0, "rough reduced by {}", r0 / norm2(&rough));
    assert!(s0 / norm2(&smooth) < 1.5, "smooth reduced by {}", s0 / norm2(&smooth));
}

#[test]
fn full_weighting_of_unit_vector() {
    let r = restriction_1d(8, true);
    let mut e = vec![0.0; 8];
    e[2] = 1.0;
    assert_eq!(r.matvec(&e), vec![0.0, 0.5, 0.0, 0.0]);
}

#[test]
fn full_weighting_keeps_constants_and_samples_linear_data() {
    for periodic in [true, false] {
        let r = restriction_1d(16, periodic);
        assert!(r.matvec(&[3.0; 16]).iter().skip(1).all(|v| (v - 3.0).abs() < 1e-15));
        let lin: Vec<f64> = (0..16).map(|i| 0.5 + 2.0 * i as f64).collect();
        let c = r.matvec(&lin);
        for (j, v) in c.iter().enumerate().skip(1) {
            assert!((v - lin[2 * j]).abs() < 1e-13);
        }
    }
}

#[test]
fn linear_prolongation_reproduces_constants_and_hats() {
    let p = prolongation_1d(16, true);
    assert!(p.matvec(&[2.0; 8]).iter().all(|v| (v - 2.0).abs() < 1e-15));
    let mut hat = vec![0.0; 8];
    hat[3] = 1.0;
    let f = p.matvec(&hat);
    let expect: Vec<f64> = (0..16).map(|i| (1.0 - (i as f64 - 6.0).abs() / 2.0).max(0.0)).collect();
    assert_eq!(f, expect);
}

#[test]
fn prolongation_is_twice_the_restriction_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for periodic in [true, false] {
        let (r, p) = (restriction_1d(32, periodic), prolongation_1d(32, periodic));
        let (xc, yf) = (random(16, &mut rng), random(32, &mut rng));
        let lhs = dot(&p.matvec(&xc), &yf);
        let rhs = 2.0 * dot(&xc, &r.matvec(&yf));
        assert!((lhs - rhs).abs() < 1e-13 * lhs.abs().max(1.0));
    }
}

#[test]
fn cubic_prolongation_is_exact_on_cubics_and_injects_coarse_nodes() {
    let p = cubic_prolongation_1d(32);
    let f = |x: f64| 1.0 - x + 0.3 * x * x - 0.05 * x * x * x;
    let coarse: Vec<f64> = (0..16).map(|j| f(2.0 * j as f64)).collect();
    let fine = p.matvec(&coarse);
    for i in 2..28 {
        assert!((fine[i] - f(i as f64)).abs() < 1e-10, "node {i}");
    }
    for j in 0..16 {
        let mut e = vec![0.0; 16];
        e[j] = 1.0;
        let col = p.matvec(&e);
        for k in 0..16 {
            assert_eq!(col[2 * k], if k == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn coarse_grid_nodes_are_fine_grid_nodes() {
    for transfer in [Transfer::Linear, Transfer::Cubic] {
        let shape = SpaceTimeShape { nt: 4, n: 8, dim: 2 };
        let (_, p) = transfer_operators_with(shape, CoarseningMode::Full, transfer);
        let coarse = shape.coarsen(CoarseningMode::Full).unwrap();
        for c in 0..coarse.len() {
            let (t, rest) = (c / 16, c % 16);
            let (cy, cx) = (rest / 4, rest % 4);
            let f = 2 * t * 64 + (2 * cy) * 8 + 2 * cx;
            assert_eq!(p.get(f, c), 1.0, "{transfer:?} coarse {c}");
        }
    }
}

#[test]
fn one_v_cycle_contracts_by_five() {
    let a = periodic_helmholtz(64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = random(64, &mut rng);
    for transfer in [Transfer::Linear, Transfer::Cubic] {
        let mg = Multigrid::build(&a, one_d(64), &params(3, transfer)).unwrap();
        let mut x = vec![0.0; 64];
        let r0 = residual(&a, &x, &b);
        mg.v_cycle(&mut x, &b);
        let r1 = residual(&a, &x, &b);
        assert!(r0 / r1 >= 5.0, "{transfer:?}: contraction {}", r0 / r1);
    }
}

#[test]
fn v_cycle_from_zero_is_linear() {
    let a = periodic_helmholtz(64);
    let mg = Multigrid::build(&a, one_d(64), &MultigridParams::default()).unwrap();
    let mut x = vec![0.0; 64];
    mg.v_cycle(&mut x, &[0.0; 64]);
    assert!(x.iter().all(|v| *v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (r1, r2) = (random(64, &mut rng), random(64, &mut rng));
    let (al, be) = (0.7, -2.3);
    let cycle = |r: &[f64]| {
        let mut x = vec![0.0; 64];
        mg.v_cycle(&mut x, r);
        x
    };
    let combo: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| al * a + be * b).collect();
    let lhs = cycle(&combo);
    let (x1, x2) = (cycle(&r1), cycle(&r2));
    for i in 0..64 {
        assert!((lhs[i] - (al * x1[i] + be * x2[i])).abs() < 1e-12 * (1.0 + lhs[i].abs()));
    }
}

#[test]
fn zero_levels_make_the_cycle_a_direct_solve() {
    let a = periodic_helmholtz(16);
    let mg = Multigrid::build(&a, one_d(16), &params(0, Transfer::Cubic)).unwrap();
    assert_eq!(mg.depth(), 1);
    let b: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let mut x = vec![0.0; 16];
    mg.v_cycle(&mut x, &b);
    assert!(residual(&a, &x, &b) < 1e-10);
}

#[test]
fn coarse_operators_are_galerkin_products() {
    let shape = SpaceTimeShape { nt: 4, n: 8, dim: 2 };
    let n = shape.len();
    let mut t = Triplets::new(n, n);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..n {
        t.push(i, i, 10.0);
        for _ in 0..4 {
            t.push(i, rng.gen_range(0..n), rng.gen_range(-1.0..1.0));
        }
    }
    let a = t.to_csr();
    for mode in [CoarseningMode::Semi, CoarseningMode::Full] {
        let mg = Multigrid::build(&a, shape, &MultigridParams { mode, levels: 2, ..Default::default() }).unwrap();
        for k in 0..mg.depth() - 1 {
            let (r, p) = mg.transfers(k).unwrap();
            let (fine, coarse) = (mg.operator(k), mg.operator(k + 1));
            for j in 0..coarse.ncols {
                let mut e = vec![0.0; coarse.ncols];
                e[j] = 1.0;
                let direct = coarse.matvec(&e);
                let product = r.matvec(&fine.matvec(&p.matvec(&e)));
                for (x, y) in direct.iter().zip(&product) {
                    assert!((x - y).abs() <= 1e-13 * (1.0 + x.abs()));
                }
            }
        }
    }
}

#[test]
fn bicgstab_on_identity_takes_one_iteration() {
    let b = vec![1.0, -2.0, 3.5];
    let r = bicgstab(&CsrMatrix::identity(3), &b, None, &IdentityPreconditioner, 1e-12, 10).unwrap();
    assert_eq!(r.iterations, 1);
    assert_eq!(r.x, b);
}

#[test]
fn bicgstab_on_poisson_with_and_without_v_cycles() {
    let a = periodic_helmholtz(128);
    let b: Vec<f64> = (0..128).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
    let plain = bicgstab(&a, &b, None, &IdentityPreconditioner, 1e-10, 5000).unwrap();
    assert!(residual(&a, &plain.x, &b) <= 1e-10 * norm2(&b));
    let mg = Multigrid::build(&a, one_d(128), &params(4, Transfer::Cubic)).unwrap();
    let pre = bicgstab(&a, &b, None, &mg, 1e-10, 100).unwrap();
    assert!(pre.iterations <= 10, "{} iterations", pre.iterations);
    assert!(pre.iterations < plain.iterations);
}

#[test]
fn unpreconditioned_dirichlet_poisson_converges() {
    let a = poisson_1d(128);
    let b = vec![1.0; 128];
    let r = bicgstab(&a, &b, None, &IdentityPreconditioner, 1e-10, 5000).unwrap();
    assert!(residual(&a, &r.x, &b) <= 1e-10 * norm2(&b) * 1.01);
}
