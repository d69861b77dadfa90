//! Convex duality for variational MFGs: the primal functional over
//! densities and momenta, the heat and divergence operators with their
//! adjoints, the dual problem and the two proximal splitting solvers.
//!
//! The constraint is `A M - B W = 0` with `M^0` fixed, and the momentum lives
//! in the cone `K` of the upwind Hamiltonian: at a saddle point
//! `W^n_i = M^{n+1}_i P_K([grad U^n]_i)` and `B W` is the transport term of
//! the Fokker-Planck scheme.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{max_abs, nabla, Field, Grid, Neighbor};
use crate::hamiltonian::{in_cone, Conjugate, DiscreteHamiltonian};
use crate::linalg::{
    bicgstab, find_root, CsrMatrix, KrylovResult, LinearOperator, Multigrid, MultigridParams, Preconditioner,
    SpaceTimeShape, SparseLu, Triplets,
};
use crate::mfg::{LocalCost, MfgProblem, MfgSolution, Mode, Terminal};

/// Extended real value; the infinite branch never enters arithmetic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extended {
    Finite(f64),
    PlusInfinity,
}

impl Extended {
    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::PlusInfinity => None,
        }
    }
}

/// `f0(m) = shift + linear m + quadratic m^2` at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeCoupling {
    pub shift: f64,
    pub linear: f64,
    pub quadratic: f64,
}

/// `F*` and its derivative, the maximiser `argmax_{m >= 0} m y - F(m)`.
pub trait ConjugateCoupling {
    fn argmax(&self, y: f64) -> f64;
    fn value(&self, y: f64) -> f64;
}

impl NodeCoupling {
    pub fn f0(&self, m: f64) -> f64 {
        self.shift + self.linear * m + self.quadratic * m * m
    }

    /// `F(m) = int_0^m f0`, infinite for `m < 0`.
    pub fn primitive(&self, m: f64) -> Extended {
        if m < 0.0 {
            return Extended::PlusInfinity;
        }
        Extended::Finite(m * (self.shift + m * (0.5 * self.linear + m * self.quadratic / 3.0)))
    }
}

impl ConjugateCoupling for NodeCoupling {
    fn argmax(&self, y: f64) -> f64 {
        let d = y - self.shift;
        if d <= 0.0 {
            return 0.0;
        }
        if self.quadratic == 0.0 {
            return d / self.linear;
        }
        2.0 * d / (self.linear + (self.linear * self.linear + 4.0 * self.quadratic * d).sqrt())
    }

    fn value(&self, y: f64) -> f64 {
        let m = self.argmax(y);
        m * (y - self.shift) - m * m * (0.5 * self.linear + m * self.quadratic / 3.0)
    }
}

/// Conjugate of `F` for an arbitrary nondecreasing `f0`, by root finding for
/// the maximiser and Simpson quadrature for `F`.
pub struct NumericCoupling<G: Fn(f64) -> f64> {
    pub f0: G,
}

impl<G: Fn(f64) -> f64> NumericCoupling<G> {
    pub fn try_argmax(&self, y: f64) -> Result<f64> {
        if (self.f0)(0.0) >= y {
            return Ok(0.0);
        }
        let mut hi = 1.0;
        while (self.f0)(hi) < y {
            hi *= 2.0;
            if hi > 1e150 {
                return Err(Error::Bracket { what: "coupling conjugate", lo: 0.0, hi });
            }
        }
        find_root("coupling conjugate", 0.0, hi, 1e-15 * hi, |m| (self.f0)(m) - y)
    }

    fn primitive(&self, m: f64) -> f64 {
        let n = 400;
        let h = m / n as f64;
        let mut acc = (self.f0)(0.0) + (self.f0)(m);
        for k in 1..n {
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * (self.f0)(k as f64 * h);
        }
        acc * h / 3.0
    }
}

impl<G: Fn(f64) -> f64> ConjugateCoupling for NumericCoupling<G> {
    fn argmax(&self, y: f64) -> f64 {
        self.try_argmax(y).unwrap_or(f64::NAN)
    }

    fn value(&self, y: f64) -> f64 {
        let m = self.argmax(y);
        m * y - self.primitive(m)
    }
}

/// Single-population MFG written as a convex problem.
#[derive(Debug, Clone)]
pub struct VariationalProblem {
    pub grid: Grid,
    pub nu: f64,
    pub hamiltonian: DiscreteHamiltonian,
    pub shift: Vec<f64>,
    pub linear: f64,
    pub quadratic: f64,
    pub terminal: Terminal,
    pub m0: Vec<f64>,
    coords: Vec<[f64; 2]>,
    potential: Vec<f64>,
}

impl VariationalProblem {
    pub fn from_mfg(problem: &MfgProblem) -> Result<Self> {
        problem.validate()?;
        if problem.populations.len() != 1 || problem.mode != Mode::Mfg {
            return Err(Error::Problem("variational form needs a single population game".into()));
        }
        let pop = &problem.populations[0];
        if !matches!(pop.hamiltonian, DiscreteHamiltonian::GodunovQuadratic | DiscreteHamiltonian::GodunovPower { .. })
        {
            return Err(Error::Problem(format!("no variational form for {}", pop.hamiltonian.name())));
        }
        if !pop.boundary.segments.is_empty() {
            return Err(Error::Problem("variational form supports walls only".into()));
        }
        let (shift, linear, quadratic) = match &pop.cost {
            LocalCost::Polynomial { shift, linear, quadratic } => (shift.clone(), *linear, *quadratic),
            _ => return Err(Error::Problem("variational form needs a local polynomial cost".into())),
        };
        if linear < 0.0 || quadratic < 0.0 || linear + quadratic == 0.0 || pop.terminal.slope < 0.0 {
            return Err(Error::Problem("coupling must be strictly increasing in m".into()));
        }
        let grid = problem.grid.clone();
        let coords: Vec<[f64; 2]> = (0..grid.nodes()).map(|i| grid.coords(i)).collect();
        let potential = coords.iter().map(|&x| pop.hamiltonian.potential(x)).collect();
        Ok(VariationalProblem {
            grid,
            nu: problem.nu,
            hamiltonian: pop.hamiltonian,
            shift,
            linear,
            quadratic,
            terminal: pop.terminal.clone(),
            m0: pop.m0.clone(),
            coords,
            potential,
        })
    }

    pub fn nodes(&self) -> usize {
        self.grid.nodes()
    }

    pub fn slots(&self) -> usize {
        self.grid.slots()
    }

    /// Coupling of density level `n >= 1`; the last level carries `Phi / dt`.
    pub fn coupling(&self, n: usize, i: usize) -> NodeCoupling {
        let mut c = NodeCoupling { shift: self.shift[i], linear: self.linear, quadratic: self.quadratic };
        if n == self.grid.nt {
            c.shift += self.terminal.shift[i] / self.grid.dt;
            c.linear += self.terminal.slope / self.grid.dt;
        }
        c
    }

    fn h_full(&self, i: usize, q: &[f64]) -> f64 {
        self.hamiltonian.base_eval(self.coords[i], q) + self.potential[i]
    }
}

/// Density on levels `0..=nt` and momentum on levels `0..nt`
/// (`nodes * 2d` values per level).
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalPoint {
    pub m: Field,
    pub w: Field,
}

/// Dual variable on levels `0..nt` and the multiplier of the initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    pub u: Field,
    pub phi: Vec<f64>,
}

fn check(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Problem(format!("shape mismatch: {what}")))
    }
}

/// `(A M)^n = (M^{n+1} - M^n)/dt - nu Delta_h M^{n+1}`, `0 <= n < nt`.
pub fn apply_a(grid: &Grid, nu: f64, m: &Field) -> Result<Field> {
    check(m.levels == grid.nt + 1 && m.nodes == grid.nodes(), "A expects nt+1 density levels")?;
    let mut out = Field::zeros(grid.nt, grid.nodes());
    for n in 0..grid.nt {
        let lap = crate::grid::laplacian(grid, m.level(n + 1));
        let o = out.level_mut(n);
        for i in 0..grid.nodes() {
            o[i] = (m.level(n + 1)[i] - m.level(n)[i]) / grid.dt - nu * lap[i];
        }
    }
    Ok(out)
}

/// Adjoint of [`apply_a`].
pub fn apply_a_star(grid: &Grid, nu: f64, u: &Field) -> Result<Field> {
    check(u.levels == grid.nt && u.nodes == grid.nodes(), "A* expects nt levels")?;
    let nt = grid.nt;
    let mut out = Field::zeros(nt + 1, grid.nodes());
    for (o, v) in out.level_mut(0).iter_mut().zip(u.level(0)) {
        *o = -v / grid.dt;
    }
    for k in 1..=nt {
        let lap = crate::grid::laplacian(grid, u.level(k - 1));
        let o = out.level_mut(k);
        for i in 0..grid.nodes() {
            let next = if k < nt { u.level(k)[i] } else { 0.0 };
            o[i] = (u.level(k - 1)[i] - next) / grid.dt - nu * lap[i];
        }
    }
    Ok(out)
}

/// `B W = -nabla_h^T W` per level: mixed left/right divergence.
pub fn apply_b(grid: &Grid, w: &Field) -> Result<Field> {
    let s = grid.slots();
    check(w.levels == grid.nt && w.nodes == grid.nodes() * s, "B expects nt momentum levels")?;
    let mut out = Field::zeros(grid.nt, grid.nodes());
    for n in 0..grid.nt {
        let o = out.level_mut(n);
        divergence_into(grid, w.level(n), o);
    }
    Ok(out)
}

fn divergence_into(grid: &Grid, w: &[f64], o: &mut [f64]) {
    let s = grid.slots();
    for i in 0..grid.nodes() {
        for axis in 0..grid.dim {
            for (k, fwd) in [(2 * axis, true), (2 * axis + 1, false)] {
                if let Neighbor::Node(j) = grid.neighbor(i, axis, fwd) {
                    let v = w[i * s + k] / grid.h;
                    if fwd {
                        o[j] -= v;
                        o[i] += v;
                    } else {
                        o[i] -= v;
                        o[j] += v;
                    }
                }
            }
        }
    }
}

/// `B* U = -nabla_h U` per level.
pub fn apply_b_star(grid: &Grid, u: &Field) -> Result<Field> {
    check(u.levels == grid.nt && u.nodes == grid.nodes(), "B* expects nt levels")?;
    let s = grid.slots();
    let mut out = Field::zeros(grid.nt, grid.nodes() * s);
    for n in 0..grid.nt {
        let g = nabla(grid, u.level(n));
        for (o, v) in out.level_mut(n).iter_mut().zip(g) {
            *o = -v;
        }
    }
    Ok(out)
}

/// `Sigma(M, W) = (A M - B W, M^0)`.
pub fn apply_sigma(grid: &Grid, nu: f64, p: &PrimalPoint) -> Result<(Field, Vec<f64>)> {
    let mut a = apply_a(grid, nu, &p.m)?;
    let b = apply_b(grid, &p.w)?;
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x -= y);
    Ok((a, p.m.level(0).to_vec()))
}

/// Adjoint of [`apply_sigma`].
pub fn apply_sigma_star(grid: &Grid, nu: f64, d: &DualPoint) -> Result<PrimalPoint> {
    check(d.phi.len() == grid.nodes(), "multiplier length")?;
    let mut m = apply_a_star(grid, nu, &d.u)?;
    m.level_mut(0).iter_mut().zip(&d.phi).for_each(|(x, y)| *x += y);
    let mut w = apply_b_star(grid, &d.u)?;
    w.data.iter_mut().for_each(|v| *v = -*v);
    Ok(PrimalPoint { m, w })
}

/// `m H~*(w / m)` with the sign conventions of the module.
pub fn l_tilde(ham: &DiscreteHamiltonian, x: [f64; 2], m: f64, w: &[f64]) -> Result<Extended> {
    if m > 0.0 && in_cone(w) {
        let g: Vec<f64> = w.iter().map(|v| v / m).collect();
        Ok(match ham.conjugate(x, &g, &[])? {
            Conjugate::Finite(v) => Extended::Finite(m * v),
            Conjugate::Infinite => Extended::PlusInfinity,
        })
    } else if m == 0.0 && w.iter().all(|v| *v == 0.0) {
        Ok(Extended::Finite(0.0))
    } else {
        Ok(Extended::PlusInfinity)
    }
}

/// Primal functional `Theta(M, W)`.
pub fn theta_value(vp: &VariationalProblem, p: &PrimalPoint) -> Result<Extended> {
    let (nt, s) = (vp.grid.nt, vp.slots());
    let mut total = 0.0;
    for n in 1..=nt {
        for i in 0..vp.nodes() {
            let m = p.m.level(n)[i];
            let w = &p.w.level(n - 1)[i * s..(i + 1) * s];
            let l = l_tilde(&vp.hamiltonian, vp.coords[i], m, w)?;
            let f = vp.coupling(n, i).primitive(m);
            match (l, f) {
                (Extended::Finite(a), Extended::Finite(b)) => total += a + b,
                _ => return Ok(Extended::PlusInfinity),
            }
        }
    }
    Ok(Extended::Finite(total))
}

/// Dual objective `Psi(Lambda* U) + Gamma(U)`; weak duality reads
/// `Theta(M, W) >= -dual_objective(U)` for feasible `(M, W)`.
pub fn dual_objective(vp: &VariationalProblem, u: &Field) -> Result<f64> {
    let (a, b) = lambda_star(vp, u)?;
    let s = vp.slots();
    let mut total = 0.0;
    for n in 1..=vp.grid.nt {
        for i in 0..vp.nodes() {
            let y = a.level(n - 1)[i] + vp.h_full(i, &b.level(n - 1)[i * s..(i + 1) * s]);
            total += vp.coupling(n, i).value(y);
        }
    }
    let gamma: f64 = vp.m0.iter().zip(u.level(0)).map(|(m, v)| m * v).sum::<f64>() / vp.grid.dt;
    Ok(total - gamma)
}

/// `Lambda* U = (A* U restricted to levels 1..=nt, nabla_h U)`.
pub fn lambda_star(vp: &VariationalProblem, u: &Field) -> Result<(Field, Field)> {
    let a = apply_a_star(&vp.grid, vp.nu, u)?;
    let a = Field { levels: vp.grid.nt, nodes: vp.nodes(), data: a.data[vp.nodes()..].to_vec() };
    let mut b = apply_b_star(&vp.grid, u)?;
    b.data.iter_mut().for_each(|v| *v = -*v);
    Ok((a, b))
}

/// `Lambda (a, b) = A (0, a) - B b`: adjoint of [`lambda_star`].
pub fn lambda(vp: &VariationalProblem, a: &Field, b: &Field) -> Result<Field> {
    let mut m = Field::zeros(vp.grid.nt + 1, vp.nodes());
    m.data[vp.nodes()..].copy_from_slice(&a.data);
    let mut out = apply_a(&vp.grid, vp.nu, &m)?;
    let bb = apply_b(&vp.grid, b)?;
    out.data.iter_mut().zip(&bb.data).for_each(|(x, y)| *x -= y);
    Ok(out)
}

fn laplacian_matrix(grid: &Grid) -> CsrMatrix {
    let mut t = Triplets::new(grid.nodes(), grid.nodes());
    let c = 1.0 / (grid.h * grid.h);
    for i in 0..grid.nodes() {
        for axis in 0..grid.dim {
            for fwd in [true, false] {
                if let Neighbor::Node(j) = grid.neighbor(i, axis, fwd) {
                    t.push(i, j, c);
                    t.push(i, i, -c);
                }
            }
        }
    }
    t.to_csr()
}

fn gradient_matrix(grid: &Grid) -> CsrMatrix {
    let s = grid.slots();
    let mut t = Triplets::new(grid.nodes() * s, grid.nodes());
    let c = 1.0 / grid.h;
    for i in 0..grid.nodes() {
        for axis in 0..grid.dim {
            for (k, fwd) in [(2 * axis, true), (2 * axis + 1, false)] {
                if let Neighbor::Node(j) = grid.neighbor(i, axis, fwd) {
                    let sign = if fwd { 1.0 } else { -1.0 };
                    t.push(i * s + k, j, sign * c);
                    t.push(i * s + k, i, -sign * c);
                }
            }
        }
    }
    t.to_csr()
}

/// Assembled `Lambda Lambda*` on `nt x nodes` unknowns (time-major): the
/// discrete `-d_tt + nu^2 Delta^2 - Delta` type operator of the dual steps.
pub fn assemble_lambda_lambda_star(grid: &Grid, nu: f64) -> CsrMatrix {
    let nt = grid.nt;
    let nodes = grid.nodes();
    let id_space = CsrMatrix::identity(nodes);
    let heat = id_space.scaled(1.0 / grid.dt).add(&laplacian_matrix(grid).scaled(-nu));
    let mut shift = Triplets::new(nt, nt);
    for n in 1..nt {
        shift.push(n, n - 1, 1.0);
    }
    let a_hat = CsrMatrix::identity(nt).kron(&heat).add(&shift.to_csr().kron(&id_space.scaled(-1.0 / grid.dt)));
    let g = gradient_matrix(grid);
    let gtg = g.transpose().matmul(&g);
    a_hat.matmul(&a_hat.transpose()).add(&CsrMatrix::identity(nt).kron(&gtg))
}

/// Preconditioner choice for the dual linear systems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub enum DualSolverKind {
    #[default]
    Direct,
    Multigrid(MultigridParams),
}

enum DualInner {
    Direct(SparseLu),
    Multigrid(Multigrid),
}

/// Solver for `Lambda Lambda* U = rhs`, built once per problem.
pub struct DualLinearSolver {
    pub op: CsrMatrix,
    inner: DualInner,
    pub tol: f64,
    pub max_iter: usize,
    pub reduction: Option<f64>,
}

impl DualLinearSolver {
    pub fn new(grid: &Grid, nu: f64, kind: DualSolverKind) -> Result<Self> {
        let op = assemble_lambda_lambda_star(grid, nu);
        let inner = match kind {
            DualSolverKind::Direct => DualInner::Direct(SparseLu::factor(&op)?),
            DualSolverKind::Multigrid(p) => {
                if !grid.is_torus() {
                    return Err(Error::Problem("multigrid transfers assume periodic space".into()));
                }
                let shape = SpaceTimeShape { nt: grid.nt, n: grid.n, dim: grid.dim };
                DualInner::Multigrid(Multigrid::build(&op, shape, &p)?)
            }
        };
        Ok(DualLinearSolver { op, inner, tol: 1e-8, max_iter: 500, reduction: None })
    }

    /// Returns the solution and the number of Krylov iterations (zero for the
    /// direct factorisation).
    pub fn solve(&self, rhs: &[f64]) -> Result<(Vec<f64>, usize)> {
        self.solve_from(rhs, None)
    }

    /// Same as [`DualLinearSolver::solve`], with a Krylov starting guess.
    /// With `reduction` set, the Krylov solve stops once the residual has
    /// dropped by that factor relative to the starting residual.
    pub fn solve_from(&self, rhs: &[f64], x0: Option<&[f64]>) -> Result<(Vec<f64>, usize)> {
        match &self.inner {
            DualInner::Direct(lu) => Ok((lu.solve(rhs), 0)),
            DualInner::Multigrid(mg) => {
                let mut tol = self.tol;
                if let Some(f) = self.reduction {
                    let bnorm = crate::linalg::norm2(rhs);
                    if bnorm > 0.0 {
                        let r0 = match x0 {
                            Some(x) => {
                                let ax = self.op.matvec(x);
                                crate::linalg::norm2(&rhs.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>())
                            }
                            None => bnorm,
                        };
                        tol = f * r0 / bnorm;
                    }
                }
                let r = bicgstab(&self.op, rhs, x0, mg, tol, self.max_iter)?;
                Ok((r.x, r.iterations))
            }
        }
    }
}

/// Preconditioned BiCGStab on the dual operator.
pub fn solve_dual_linear(
    op: &dyn LinearOperator,
    rhs: &[f64],
    precond: &dyn Preconditioner,
    tol: f64,
    max_iter: usize,
) -> Result<KrylovResult> {
    bicgstab(op, rhs, None, precond, tol, max_iter)
}

/// Largest singular value of `Lambda` by power iteration on `Lambda Lambda*`.
pub fn estimate_lambda_norm(grid: &Grid, nu: f64, iterations: usize) -> f64 {
    let op = assemble_lambda_lambda_star(grid, nu);
    let n = op.nrows;
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let norm = crate::linalg::norm2(&v);
        v.iter_mut().for_each(|x| *x /= norm);
        let w = op.matvec(&v);
        lambda = crate::linalg::dot(&v, &w);
        v = w;
    }
    lambda.max(0.0).sqrt()
}

/// Pointwise dual proximal step:
/// `argmin_{a,b} F*(a + H~(b)) - <sigma, (a, b)> + r/2 |(a, b) - (abar, bbar)|^2`.
/// Returns `(a, b, mu)` where `mu = F*'(a + H~(b))` is the density.
#[allow(clippy::too_many_arguments)]
pub fn prox_pointwise_dual(
    ham: &DiscreteHamiltonian,
    x: [f64; 2],
    coupling: &dyn ConjugateCoupling,
    sigma_a: f64,
    sigma_b: &[f64],
    abar: f64,
    bbar: &[f64],
    r: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    if !(r > 0.0) {
        return Err(Error::Problem("penalty must be positive".into()));
    }
    let pot = ham.potential(x);
    let alpha = abar + sigma_a / r;
    let beta: Vec<f64> = bbar.iter().zip(sigma_b).map(|(b, s)| b + s / r).collect();
    let hi = coupling.argmax(alpha + ham.base_eval(x, &beta) + pot);
    if !hi.is_finite() {
        return Err(Error::NotConverged { solver: "dual prox", iterations: 0, residual: f64::NAN });
    }
    if hi <= 0.0 {
        return Ok((alpha, beta, 0.0));
    }
    let mut err = None;
    let mut g = |mu: f64| -> f64 {
        match ham.prox(mu / r, &beta) {
            Ok(b) => mu - coupling.argmax(alpha - mu / r + ham.base_eval(x, &b) + pot),
            Err(e) => {
                err = Some(e);
                0.0
            }
        }
    };
    let mu = if g(hi) <= 0.0 { hi } else { find_root("dual prox", 0.0, hi, 1e-15 * (1.0 + hi), &mut g)? };
    if let Some(e) = err {
        return Err(e);
    }
    let b = ham.prox(mu / r, &beta)?;
    Ok((alpha - mu / r, b, mu))
}

/// Pointwise primal proximal step of `r Theta`:
/// `argmin_{m,w} r [L~(m, w) + F(m)] + |m - mbar|^2/2 + |w - wbar|^2/2`.
pub fn prox_theta_pointwise(
    ham: &DiscreteHamiltonian,
    x: [f64; 2],
    f0: &dyn Fn(f64) -> f64,
    mbar: f64,
    wbar: &[f64],
    r: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(r > 0.0) {
        return Err(Error::Problem("step must be positive".into()));
    }
    let pot = ham.potential(x);
    let v: Vec<f64> = wbar.iter().map(|w| w / r).collect();
    let mut err = None;
    let mut h = |m: f64| -> f64 {
        match ham.prox(m / r, &v) {
            Ok(p) => -(ham.base_eval(x, &p) + pot) + f0(m) + (m - mbar) / r,
            Err(e) => {
                err = Some(e);
                0.0
            }
        }
    };
    if h(0.0) >= 0.0 {
        return Ok((0.0, vec![0.0; wbar.len()]));
    }
    let mut hi = (mbar + r * (ham.base_eval(x, &v) + pot - f0(0.0))).max(0.0) * (1.0 + 1e-12) + 1e-12;
    while h(hi) < 0.0 {
        hi = 2.0 * hi + 1.0;
    }
    let m = find_root("theta prox", 0.0, hi, 1e-15 * (1.0 + hi), &mut h)?;
    if let Some(e) = err {
        return Err(e);
    }
    let p = ham.prox(m / r, &v)?;
    Ok((m, wbar.iter().zip(&p).map(|(w, pk)| w - r * pk).collect()))
}

#[derive(Debug, Clone, Serialize)]
pub struct VariationalReport {
    pub solver: &'static str,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub history: Vec<f64>,
    pub linear_iterations: usize,
}

pub struct VariationalOutcome {
    pub primal: PrimalPoint,
    pub dual: DualPoint,
    pub report: VariationalReport,
}

impl VariationalOutcome {
    /// `(U, M)` in the layout of the fixed-point solvers, with
    /// `U^{nt} = phi(M^{nt})`.
    pub fn to_mfg_solution(&self, vp: &VariationalProblem) -> MfgSolution {
        let nt = vp.grid.nt;
        let mut u = Field::zeros(nt + 1, vp.nodes());
        u.data[..nt * vp.nodes()].copy_from_slice(&self.dual.u.data);
        let last: Vec<f64> =
            vp.terminal.shift.iter().zip(self.primal.m.level(nt)).map(|(s, m)| s + vp.terminal.slope * m).collect();
        u.set_level(nt, &last);
        MfgSolution { u: vec![u], m: vec![self.primal.m.clone()] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmParams {
    pub r: f64,
    pub max_iter: usize,
    pub tol: f64,
    #[serde(skip)]
    pub linear: DualSolverKind,
}

impl Default for AdmmParams {
    fn default() -> Self {
        AdmmParams { r: 1.0, max_iter: 20000, tol: 1e-6, linear: DualSolverKind::Direct }
    }
}

fn full_density(vp: &VariationalProblem, tail: &Field) -> Field {
    let mut m = Field::zeros(vp.grid.nt + 1, vp.nodes());
    m.set_level(0, &vp.m0);
    m.data[vp.nodes()..].copy_from_slice(&tail.data);
    m
}

fn initial_multiplier(vp: &VariationalProblem) -> (Field, Field) {
    (Field::from_level(vp.grid.nt, &vp.m0), Field::zeros(vp.grid.nt, vp.nodes() * vp.slots()))
}

fn level0_source(vp: &VariationalProblem, scale: f64) -> Vec<f64> {
    let mut c = vec![0.0; vp.grid.nt * vp.nodes()];
    for (ci, m) in c.iter_mut().zip(&vp.m0) {
        *ci = scale * m / vp.grid.dt;
    }
    c
}

/// Augmented Lagrangian method on the dual problem: a linear solve for `U`,
/// pointwise proximal steps for `Q` and a multiplier step for `(M, W)`.
pub fn admm_solve(vp: &VariationalProblem, params: &AdmmParams) -> Result<VariationalOutcome> {
    let r = params.r;
    if !(r > 0.0) {
        return Err(Error::Problem("ADMM penalty must be positive".into()));
    }
    let (nt, nodes, s) = (vp.grid.nt, vp.nodes(), vp.slots());
    let solver = DualLinearSolver::new(&vp.grid, vp.nu, params.linear)?;
    let (mut sig_m, mut sig_w) = initial_multiplier(vp);
    let mut q_a = Field::zeros(nt, nodes);
    let mut q_b = Field::zeros(nt, nodes * s);
    let mut u = Field::zeros(nt, nodes);
    let source = level0_source(vp, 1.0);
    let mut history = Vec::new();
    let mut linear_iterations = 0;
    let (mut pres, mut dres) = (f64::INFINITY, f64::INFINITY);
    for it in 1..=params.max_iter {
        let za = Field { data: q_a.data.iter().zip(&sig_m.data).map(|(q, m)| r * q - m).collect(), ..q_a.clone() };
        let zb = Field { data: q_b.data.iter().zip(&sig_w.data).map(|(q, w)| r * q - w).collect(), ..q_b.clone() };
        let mut rhs = lambda(vp, &za, &zb)?.data;
        rhs.iter_mut().zip(&source).for_each(|(x, c)| *x = (*x + c) / r);
        let (sol, li) = solver.solve(&rhs)?;
        linear_iterations += li;
        u.data = sol;
        let (la, lb) = lambda_star(vp, &u)?;
        let mut change = 0.0f64;
        pres = 0.0;
        for k in 0..nt {
            for i in 0..nodes {
                let c = vp.coupling(k + 1, i);
                let sl = i * s..(i + 1) * s;
                let (a, b, mu) = prox_pointwise_dual(
                    &vp.hamiltonian,
                    vp.coords[i],
                    &c,
                    sig_m.level(k)[i],
                    &sig_w.level(k)[sl.clone()],
                    la.level(k)[i],
                    &lb.level(k)[sl.clone()],
                    r,
                )?;
                change = change.max((a - q_a.level(k)[i]).abs());
                pres = pres.max((la.level(k)[i] - a).abs());
                q_a.level_mut(k)[i] = a;
                sig_m.level_mut(k)[i] = mu;
                for (j, idx) in sl.enumerate() {
                    let beta = lb.level(k)[idx] + sig_w.level(k)[idx] / r;
                    change = change.max((b[j] - q_b.level(k)[idx]).abs());
                    pres = pres.max((lb.level(k)[idx] - b[j]).abs());
                    q_b.level_mut(k)[idx] = b[j];
                    sig_w.level_mut(k)[idx] = r * (beta - b[j]);
                }
            }
        }
        dres = r * change;
        history.push(pres.max(dres));
        if pres <= params.tol && dres <= params.tol {
            let m = full_density(vp, &sig_m);
            let phi = u.level(0).iter().map(|v| v / vp.grid.dt).collect();
            return Ok(VariationalOutcome {
                primal: PrimalPoint { m, w: sig_w },
                dual: DualPoint { u, phi },
                report: VariationalReport {
                    solver: "admm",
                    iterations: it,
                    primal_residual: pres,
                    dual_residual: dres,
                    history,
                    linear_iterations,
                },
            });
        }
    }
    Err(Error::NotConverged { solver: "admm", iterations: params.max_iter, residual: pres.max(dres) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpParams {
    pub r: f64,
    pub s: f64,
    pub tau: f64,
    pub max_iter: usize,
    pub tol: f64,
    #[serde(skip)]
    pub linear: DualSolverKind,
}

impl Default for CpParams {
    fn default() -> Self {
        CpParams { r: 1.0, s: 0.99, tau: 1.0, max_iter: 20000, tol: 1e-6, linear: DualSolverKind::Direct }
    }
}

/// Iterates of the primal-dual method; densities on levels `1..=nt`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpState {
    pub m: Field,
    pub w: Field,
    pub m_bar: Field,
    pub w_bar: Field,
    pub q_m: Field,
    pub q_w: Field,
    /// Last dual iterate, used as the Krylov starting guess.
    pub v: Vec<f64>,
}

impl CpState {
    pub fn zero(vp: &VariationalProblem) -> Self {
        let (nt, nodes, s) = (vp.grid.nt, vp.nodes(), vp.slots());
        let z = Field::zeros(nt, nodes);
        let zw = Field::zeros(nt, nodes * s);
        let v = vec![0.0; z.data.len()];
        CpState { m: z.clone(), w: zw.clone(), m_bar: z.clone(), w_bar: zw.clone(), q_m: z, q_w: zw, v }
    }

    pub fn initial(vp: &VariationalProblem) -> Self {
        let mut st = CpState::zero(vp);
        let (m, _) = initial_multiplier(vp);
        st.m = m.clone();
        st.m_bar = m;
        st
    }
}

/// First step: `argmin_Q Pi*(Q) + |Q - Z|^2 / (2 s)` with `Q = Lambda* V`.
fn cp_dual_step(
    vp: &VariationalProblem,
    solver: &DualLinearSolver,
    st: &CpState,
    s: f64,
) -> Result<(Field, Field, Field, usize)> {
    let za = Field { data: st.q_m.data.iter().zip(&st.m_bar.data).map(|(q, m)| q + s * m).collect(), ..st.q_m.clone() };
    let zb = Field { data: st.q_w.data.iter().zip(&st.w_bar.data).map(|(q, w)| q + s * w).collect(), ..st.q_w.clone() };
    let mut rhs = lambda(vp, &za, &zb)?.data;
    let c = level0_source(vp, s);
    rhs.iter_mut().zip(&c).for_each(|(x, c)| *x -= c);
    let (sol, li) = solver.solve_from(&rhs, Some(&st.v))?;
    let u = Field { levels: vp.grid.nt, nodes: vp.nodes(), data: sol };
    let (qa, qb) = lambda_star(vp, &u)?;
    Ok((u, qa, qb, li))
}

/// Second step: proximal map of `r Theta` at `sigma - r Q`, node by node.
fn cp_primal_step(vp: &VariationalProblem, st: &CpState, r: f64) -> Result<(Field, Field)> {
    let (nt, nodes, s) = (vp.grid.nt, vp.nodes(), vp.slots());
    let mut m = Field::zeros(nt, nodes);
    let mut w = Field::zeros(nt, nodes * s);
    for k in 0..nt {
        for i in 0..nodes {
            let c = vp.coupling(k + 1, i);
            let sl = i * s..(i + 1) * s;
            let mbar = st.m.level(k)[i] - r * st.q_m.level(k)[i];
            let wbar: Vec<f64> =
                st.w.level(k)[sl.clone()].iter().zip(&st.q_w.level(k)[sl.clone()]).map(|(a, b)| a - r * b).collect();
            let (mi, wi) = prox_theta_pointwise(&vp.hamiltonian, vp.coords[i], &|x| c.f0(x), mbar, &wbar, r)?;
            m.level_mut(k)[i] = mi;
            w.level_mut(k)[sl].copy_from_slice(&wi);
        }
    }
    Ok((m, w))
}

/// One iteration of the primal-dual method; returns `V` with `Q = Lambda* V`,
/// the value function being `-V`.
pub fn chambolle_pock_step(
    vp: &VariationalProblem,
    solver: &DualLinearSolver,
    st: &mut CpState,
    params: &CpParams,
) -> Result<(Field, usize)> {
    let (u, qa, qb, li) = cp_dual_step(vp, solver, st, params.s)?;
    st.q_m = qa;
    st.q_w = qb;
    st.v.clone_from(&u.data);
    let (m, w) = cp_primal_step(vp, st, params.r)?;
    let tau = params.tau;
    st.m_bar.data = m.data.iter().zip(&st.m.data).map(|(a, b)| a + tau * (a - b)).collect();
    st.w_bar.data = w.data.iter().zip(&st.w.data).map(|(a, b)| a + tau * (a - b)).collect();
    st.m = m;
    st.w = w;
    Ok((u, li))
}

pub fn validate_cp(params: &CpParams) -> Result<()> {
    if !(params.r > 0.0 && params.s > 0.0) || params.r * params.s >= 1.0 {
        return Err(Error::Problem(format!("step sizes need r, s > 0 and r s < 1, got r s = {}", params.r * params.s)));
    }
    if !(0.0..=1.0).contains(&params.tau) {
        return Err(Error::Problem("extrapolation must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Chambolle-Pock iterations from `state`, stopped when the weighted
/// `l2` change of `M` falls below `tol`.
pub fn chambolle_pock_from(vp: &VariationalProblem, params: &CpParams, mut st: CpState) -> Result<VariationalOutcome> {
    validate_cp(params)?;
    let solver = DualLinearSolver::new(&vp.grid, vp.nu, params.linear)?;
    let weight = vp.grid.dt * vp.grid.cell_volume();
    let mut history = Vec::new();
    let mut linear_iterations = 0;
    for it in 1..=params.max_iter {
        let prev = st.m.clone();
        let (u, li) = chambolle_pock_step(vp, &solver, &mut st, params)?;
        linear_iterations += li;
        let change = (weight * st.m.data.iter().zip(&prev.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sqrt();
        history.push(change);
        if change <= params.tol || it == params.max_iter {
            if change > params.tol {
                return Err(Error::NotConverged { solver: "chambolle-pock", iterations: it, residual: change });
            }
            let mut lam = lambda(vp, &st.m, &st.w)?.data;
            lam.iter_mut().zip(level0_source(vp, 1.0)).for_each(|(x, c)| *x -= c);
            let pres = max_abs(&lam);
            let mut u = u;
            u.data.iter_mut().for_each(|v| *v = -*v);
            let phi = u.level(0).iter().map(|v| v / vp.grid.dt).collect();
            return Ok(VariationalOutcome {
                primal: PrimalPoint { m: full_density(vp, &st.m), w: st.w },
                dual: DualPoint { u, phi },
                report: VariationalReport {
                    solver: "chambolle_pock",
                    iterations: it,
                    primal_residual: pres,
                    dual_residual: change,
                    history,
                    linear_iterations,
                },
            });
        }
    }
    unreachable!("loop returns at the last iteration")
}

pub fn chambolle_pock_solve(vp: &VariationalProblem, params: &CpParams) -> Result<VariationalOutcome> {
    chambolle_pock_from(vp, params, CpState::initial(vp))
}

/// `max |W^n_i - M^{n+1}_i P_K([grad U^n]_i)|`.
pub fn duality_gap_momentum(vp: &VariationalProblem, out: &VariationalOutcome) -> f64 {
    let s = vp.slots();
    let mut worst = 0.0f64;
    for n in 0..vp.grid.nt {
        let g = nabla(&vp.grid, out.dual.u.level(n));
        for i in 0..vp.nodes() {
            let m = out.primal.m.level(n + 1)[i];
            for k in 0..s {
                let target = m * crate::hamiltonian::project_slot(k, g[i * s + k]);
                worst = worst.max((out.primal.w.level(n)[i * s + k] - target).abs());
            }
        }
    }
    worst
}
