//! Discrete MFG system: implicit HJB and KFP steps, the transport operator,
//! the fixed-point map on coupling data and the solvers built on it.

use std::cell::{OnceCell, RefCell};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::max_abs as max_norm;
use crate::grid::{BoundaryRole, BoundarySpec, Equation, Field, Grid, Neighbor};
use crate::hamiltonian::DiscreteHamiltonian;
use crate::linalg::{bicgstab, IdentityPreconditioner, LevelSolver, LinearOperator, SparseLu, Triplets};

/// Running cost `f0(x, m)` of one population.
#[derive(Debug, Clone)]
pub enum LocalCost {
    /// `shift(x) + linear m + quadratic m^2`.
    Polynomial { shift: Vec<f64>, linear: f64, quadratic: f64 },
    /// `shift(x) + scale ((I - Delta_h)^-2 m)(x)`.
    Smoothing { shift: Vec<f64>, scale: f64, resolvent: Box<SparseLu> },
    /// Two-population discomfort
    /// `1/2 + 1/2 (m_i/(m_i+m_j+eps) - 1/2)_- + (m_i+m_j-4)_+`, with the
    /// positive/negative parts smoothed at width `smoothing`.
    Crowd { eps: f64, smoothing: f64 },
}

/// Terminal cost `phi(x, m) = shift(x) + slope m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Terminal {
    pub shift: Vec<f64>,
    pub slope: f64,
}

impl Terminal {
    pub fn zero(nodes: usize) -> Self {
        Terminal { shift: vec![0.0; nodes], slope: 0.0 }
    }

    pub fn fixed(values: Vec<f64>) -> Self {
        Terminal { shift: values, slope: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Population {
    pub hamiltonian: DiscreteHamiltonian,
    pub cost: LocalCost,
    pub terminal: Terminal,
    pub m0: Vec<f64>,
    pub boundary: BoundarySpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Mfg,
    Mfc,
}

#[derive(Debug, Clone)]
pub struct MfgProblem {
    pub grid: Grid,
    pub nu: f64,
    pub populations: Vec<Population>,
    pub mode: Mode,
}

fn softplus(x: f64, eps: f64) -> f64 {
    let t = x / eps;
    if t > 30.0 {
        x
    } else if t < -30.0 {
        eps * t.exp()
    } else {
        eps * t.exp().ln_1p()
    }
}

fn sigmoid(x: f64, eps: f64) -> f64 {
    let t = x / eps;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Builds the factorised resolvent `I - Delta_h` used by [`LocalCost::Smoothing`].
pub fn smoothing_resolvent(grid: &Grid) -> Result<SparseLu> {
    let st = Stencil::new(grid, &BoundarySpec::walls(), Equation::Kfp);
    let mut t = Triplets::new(grid.nodes(), grid.nodes());
    for i in 0..grid.nodes() {
        t.push(i, i, 1.0);
    }
    st.push_laplacian(&mut t, -1.0);
    SparseLu::factor(&t.to_csr())
}

impl LocalCost {
    /// Cost at every node of one level; `ms[k]` are the densities of all populations.
    pub fn eval_level(&self, k: usize, ms: &[&[f64]], mode: Mode) -> Result<Vec<f64>> {
        let m = ms[k];
        match self {
            LocalCost::Polynomial { shift, linear, quadratic } => {
                let (a, b) = match mode {
                    Mode::Mfg => (*linear, *quadratic),
                    Mode::Mfc => (2.0 * linear, 3.0 * quadratic),
                };
                Ok(shift.iter().zip(m).map(|(s, &v)| s + a * v + b * v * v).collect())
            }
            LocalCost::Smoothing { shift, scale, resolvent } => {
                if mode == Mode::Mfc {
                    return Err(Error::Problem("control transform of a nonlocal cost".into()));
                }
                let s = resolvent.solve(&resolvent.solve(m));
                Ok(shift.iter().zip(&s).map(|(a, b)| a + scale * b).collect())
            }
            LocalCost::Crowd { eps, smoothing } => {
                let o = other(ms, k)?;
                Ok(m.iter().zip(o).map(|(&a, &b)| crowd(a, b, *eps, *smoothing).0).collect())
            }
        }
    }

    /// Directional derivative of [`Self::eval_level`] along `dms`.
    pub fn derivative_level(&self, k: usize, ms: &[&[f64]], dms: &[&[f64]], mode: Mode) -> Result<Vec<f64>> {
        let (m, dm) = (ms[k], dms[k]);
        match self {
            LocalCost::Polynomial { linear, quadratic, .. } => {
                let (a, b) = match mode {
                    Mode::Mfg => (*linear, *quadratic),
                    Mode::Mfc => (2.0 * linear, 3.0 * quadratic),
                };
                Ok(m.iter().zip(dm).map(|(&v, &d)| (a + 2.0 * b * v) * d).collect())
            }
            LocalCost::Smoothing { scale, resolvent, .. } => {
                let s = resolvent.solve(&resolvent.solve(dm));
                Ok(s.iter().map(|v| scale * v).collect())
            }
            LocalCost::Crowd { eps, smoothing } => {
                let o = other(ms, k)?;
                let od = other(dms, k)?;
                Ok((0..m.len())
                    .map(|i| {
                        let (_, da, db) = crowd(m[i], o[i], *eps, *smoothing);
                        da * dm[i] + db * od[i]
                    })
                    .collect())
            }
        }
    }
}

fn other<'a>(ms: &[&'a [f64]], k: usize) -> Result<&'a [f64]> {
    if ms.len() != 2 {
        return Err(Error::Problem("crowd cost needs exactly two populations".into()));
    }
    Ok(ms[1 - k])
}

/// Smoothed crowd cost and its partial derivatives in `(m_self, m_other)`.
fn crowd(a: f64, b: f64, eps: f64, sm: f64) -> (f64, f64, f64) {
    let a = a.max(0.0);
    let b = b.max(0.0);
    let s = a + b + eps;
    let ratio = a / s;
    let neg = softplus(0.5 - ratio, sm);
    let dneg = -sigmoid(0.5 - ratio, sm);
    let pos = softplus(a + b - 4.0, sm);
    let dpos = sigmoid(a + b - 4.0, sm);
    let dr_da = (b + eps) / (s * s);
    let dr_db = -a / (s * s);
    (0.5 + 0.5 * neg + pos, 0.5 * dneg * dr_da + dpos, 0.5 * dneg * dr_db + dpos)
}

impl MfgProblem {
    pub fn populations(&self) -> usize {
        self.populations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu >= 0.0) {
            return Err(Error::Problem(format!("viscosity must be nonnegative, got {}", self.nu)));
        }
        if self.populations.is_empty() || self.populations.len() > 2 {
            return Err(Error::Problem("one or two populations are supported".into()));
        }
        let nodes = self.grid.nodes();
        for (k, p) in self.populations.iter().enumerate() {
            p.hamiltonian.validate()?;
            if matches!(p.hamiltonian, DiscreteHamiltonian::HuggettCrra { .. }) {
                return Err(Error::Problem("CRRA envelopes belong to the income model".into()));
            }
            if p.m0.len() != nodes || p.terminal.shift.len() != nodes {
                return Err(Error::Problem(format!("population {k}: wrong array length")));
            }
            if p.m0.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::Problem(format!("population {k}: initial density must be >= 0")));
            }
            p.boundary.validate(&self.grid)?;
            match &p.cost {
                LocalCost::Polynomial { shift, .. } | LocalCost::Smoothing { shift, .. } => {
                    if shift.len() != nodes {
                        return Err(Error::Problem(format!("population {k}: cost shift length")));
                    }
                }
                LocalCost::Crowd { .. } => {
                    if self.populations.len() != 2 {
                        return Err(Error::Problem("crowd cost needs two populations".into()));
                    }
                }
            }
        }
        if self.mode == Mode::Mfc && self.populations.len() != 1 {
            return Err(Error::Problem("control transform supports one population".into()));
        }
        Ok(())
    }

    /// Same problem on `[0, horizon]` with `nt` steps, new initial densities and
    /// fixed terminal values.
    pub fn restricted(
        &self,
        nt: usize,
        horizon: f64,
        m0: &[Vec<f64>],
        terminal: Option<&[Vec<f64>]>,
    ) -> Result<MfgProblem> {
        let mut p = self.clone();
        p.grid = self.grid.with_time(nt, horizon)?;
        for (k, pop) in p.populations.iter_mut().enumerate() {
            pop.m0 = m0[k].clone();
            if let Some(t) = terminal {
                pop.terminal = Terminal::fixed(t[k].clone());
            }
        }
        Ok(p)
    }

    fn factor_channels(&self, k: usize) -> (bool, bool) {
        let dep = self.populations[k].hamiltonian.depends_on_density();
        (dep, dep && self.mode == Mode::Mfc)
    }
}

/// Returns the mean field control version of `problem`: the HJB uses
/// `H + m dH/dm`, `f0 + m f0'` and `phi + m phi'`, while the transport keeps `H_p`.
pub fn mfc_transform(problem: &MfgProblem) -> Result<MfgProblem> {
    let mut p = problem.clone();
    p.mode = Mode::Mfc;
    p.validate()?;
    if matches!(p.populations[0].cost, LocalCost::Smoothing { .. } | LocalCost::Crowd { .. }) {
        return Err(Error::Problem("control transform needs a local polynomial cost".into()));
    }
    Ok(p)
}

/// Neighbour of a node after boundary resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Nb {
    Node(usize),
    Mirror,
    Ghost(f64),
}

/// Resolved neighbours of every node, `[node * 2d + 2 axis + {0 fwd, 1 bwd}]`.
struct Stencil {
    dim: usize,
    h: f64,
    nb: Vec<Nb>,
}

impl Stencil {
    fn new(grid: &Grid, bc: &BoundarySpec, eq: Equation) -> Self {
        let s = grid.slots();
        let mut nb = Vec::with_capacity(grid.nodes() * s);
        for i in 0..grid.nodes() {
            for axis in 0..grid.dim {
                for fwd in [true, false] {
                    nb.push(match grid.neighbor(i, axis, fwd) {
                        Neighbor::Node(j) => Nb::Node(j),
                        Neighbor::Outside => match (bc.role_at(grid, i, axis, fwd), eq) {
                            (BoundaryRole::Wall, _) => Nb::Mirror,
                            (BoundaryRole::Entrance { .. }, Equation::Kfp) => Nb::Mirror,
                            (role, eq) => Nb::Ghost(BoundarySpec::ghost(role, eq, 0.0)),
                        },
                    });
                }
            }
        }
        Stencil { dim: grid.dim, h: grid.h, nb }
    }

    fn slots(&self) -> usize {
        2 * self.dim
    }

    fn value(&self, nb: Nb, w: &[f64], i: usize, ghosts: bool) -> f64 {
        match nb {
            Nb::Node(j) => w[j],
            Nb::Mirror => w[i],
            Nb::Ghost(c) => {
                if ghosts {
                    c
                } else {
                    0.0
                }
            }
        }
    }

    /// One-sided differences at node `i`; `ghosts = false` drops boundary constants.
    fn gradient(&self, w: &[f64], i: usize, ghosts: bool, out: &mut [f64]) {
        let s = self.slots();
        for a in 0..self.dim {
            let up = self.value(self.nb[i * s + 2 * a], w, i, ghosts);
            let down = self.value(self.nb[i * s + 2 * a + 1], w, i, ghosts);
            out[2 * a] = (up - w[i]) / self.h;
            out[2 * a + 1] = (w[i] - down) / self.h;
        }
    }

    fn laplacian(&self, w: &[f64], ghosts: bool) -> Vec<f64> {
        let s = self.slots();
        let h2 = self.h * self.h;
        (0..w.len())
            .map(|i| {
                let mut acc = 0.0;
                for k in 0..s {
                    acc += self.value(self.nb[i * s + k], w, i, ghosts) - w[i];
                }
                acc / h2
            })
            .collect()
    }

    /// Adds `scale * Delta_h` (constants dropped) to `t`.
    fn push_laplacian(&self, t: &mut Triplets, scale: f64) {
        let s = self.slots();
        let c = scale / (self.h * self.h);
        for i in 0..self.nb.len() / s {
            for k in 0..s {
                match self.nb[i * s + k] {
                    Nb::Node(j) => {
                        t.push(i, j, c);
                        t.push(i, i, -c);
                    }
                    Nb::Mirror => {}
                    Nb::Ghost(_) => t.push(i, i, -c),
                }
            }
        }
    }

    /// Adds `scale * G` where `(G w)_i = sum_k coef[i,k] dq_k(w)_i`.
    fn push_g(&self, t: &mut Triplets, coef: &[f64], scale: f64, transpose: bool) {
        let s = self.slots();
        let inv_h = scale / self.h;
        let mut put = |r: usize, c: usize, v: f64| {
            if transpose {
                t.push(c, r, v)
            } else {
                t.push(r, c, v)
            }
        };
        for i in 0..self.nb.len() / s {
            for k in 0..s {
                let c = coef[i * s + k];
                if c == 0.0 {
                    continue;
                }
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                match self.nb[i * s + k] {
                    Nb::Node(j) => {
                        put(i, j, sign * c * inv_h);
                        put(i, i, -sign * c * inv_h);
                    }
                    Nb::Mirror => {}
                    Nb::Ghost(_) => put(i, i, -sign * c * inv_h),
                }
            }
        }
    }

    /// `G^T m` for the coefficients `coef`.
    fn apply_gt(&self, coef: &[f64], m: &[f64]) -> Vec<f64> {
        let s = self.slots();
        let mut out = vec![0.0; m.len()];
        for i in 0..m.len() {
            for k in 0..s {
                let c = coef[i * s + k] * m[i] / self.h;
                if c == 0.0 {
                    continue;
                }
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                match self.nb[i * s + k] {
                    Nb::Node(j) => {
                        out[j] += sign * c;
                        out[i] -= sign * c;
                    }
                    Nb::Mirror => {}
                    Nb::Ghost(_) => out[i] -= sign * c,
                }
            }
        }
        out
    }
}

/// Per-population quantities shared by all time steps.
struct PopCtx<'a> {
    ham: &'a DiscreteHamiltonian,
    hjb: Stencil,
    kfp: Stencil,
    coords: Vec<[f64; 2]>,
    potential: Vec<f64>,
    source: Vec<f64>,
    nu: f64,
    dt: f64,
    nodes: usize,
}

impl<'a> PopCtx<'a> {
    fn new(problem: &'a MfgProblem, k: usize) -> Self {
        let grid = &problem.grid;
        let pop = &problem.populations[k];
        let coords: Vec<[f64; 2]> = (0..grid.nodes()).map(|i| grid.coords(i)).collect();
        let potential = coords.iter().map(|&x| pop.hamiltonian.potential(x)).collect();
        PopCtx {
            ham: &pop.hamiltonian,
            hjb: Stencil::new(grid, &pop.boundary, Equation::Hjb),
            kfp: Stencil::new(grid, &pop.boundary, Equation::Kfp),
            coords,
            potential,
            source: entrance_source(grid, &pop.boundary),
            nu: problem.nu,
            dt: grid.dt,
            nodes: grid.nodes(),
        }
    }

    fn slots(&self) -> usize {
        self.hjb.slots()
    }

    fn hjb_residual(&self, u: &[f64], u_next: &[f64], f: &[f64], z: Option<&[f64]>) -> Vec<f64> {
        let s = self.slots();
        let lap = self.hjb.laplacian(u, true);
        let mut q = vec![0.0; s];
        (0..self.nodes)
            .map(|i| {
                self.hjb.gradient(u, i, true, &mut q);
                let zi = z.map_or(1.0, |z| z[i]);
                (u[i] - u_next[i]) / self.dt - self.nu * lap[i]
                    + zi * self.ham.base_eval(self.coords[i], &q)
                    + self.potential[i]
                    - f[i]
            })
            .collect()
    }

    /// Upwind transport coefficients `z_i H_q(x_i, [grad u]_i)`.
    fn coefficients(&self, u: &[f64], z: Option<&[f64]>) -> Vec<f64> {
        let s = self.slots();
        let mut coef = vec![0.0; self.nodes * s];
        let mut q = vec![0.0; s];
        for i in 0..self.nodes {
            self.hjb.gradient(u, i, true, &mut q);
            let out = &mut coef[i * s..(i + 1) * s];
            self.ham.base_grad(self.coords[i], &q, out);
            let zi = z.map_or(1.0, |z| z[i]);
            out.iter_mut().for_each(|v| *v *= zi);
        }
        coef
    }

    fn hjb_jacobian(&self, u: &[f64], z: Option<&[f64]>) -> crate::linalg::CsrMatrix {
        let mut t = Triplets::new(self.nodes, self.nodes);
        for i in 0..self.nodes {
            t.push(i, i, 1.0 / self.dt);
        }
        self.hjb.push_laplacian(&mut t, -self.nu);
        let coef = self.coefficients(u, z);
        self.hjb.push_g(&mut t, &coef, 1.0, false);
        t.to_csr()
    }

    fn kfp_matrix(&self, u: &[f64], z: Option<&[f64]>) -> crate::linalg::CsrMatrix {
        let mut t = Triplets::new(self.nodes, self.nodes);
        for i in 0..self.nodes {
            t.push(i, i, 1.0 / self.dt);
        }
        self.kfp.push_laplacian(&mut t, -self.nu);
        let coef = self.coefficients(u, z);
        self.kfp.push_g(&mut t, &coef, 1.0, true);
        t.to_csr()
    }

    fn transport(&self, u: &[f64], m: &[f64], z: Option<&[f64]>) -> Vec<f64> {
        let coef = self.coefficients(u, z);
        self.kfp.apply_gt(&coef, m).into_iter().map(|v| -v).collect()
    }
}

fn entrance_source(grid: &Grid, bc: &BoundarySpec) -> Vec<f64> {
    let mut src = vec![0.0; grid.nodes()];
    if grid.is_torus() {
        return src;
    }
    for (i, s) in src.iter_mut().enumerate() {
        for axis in 0..grid.dim {
            for fwd in [true, false] {
                if grid.neighbor(i, axis, fwd) == Neighbor::Outside {
                    if let BoundaryRole::Entrance { flux, .. } = bc.role_at(grid, i, axis, fwd) {
                        *s += flux / grid.h;
                    }
                }
            }
        }
    }
    src
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NewtonStepStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Maximal number of damped Newton steps per HJB level.
pub const HJB_MAX_NEWTON: usize = 50;
/// Residual tolerance of the HJB Newton iterations.
pub const HJB_TOL: f64 = 1e-10;

fn hjb_solve_level(
    ctx: &PopCtx<'_>,
    u_next: &[f64],
    f: &[f64],
    z: Option<&[f64]>,
) -> Result<(Vec<f64>, NewtonStepStats)> {
    let mut u = u_next.to_vec();
    let mut r = ctx.hjb_residual(&u, u_next, f, z);
    let mut rn = max_norm(&r);
    let mut it = 0;
    while rn > HJB_TOL {
        if it == HJB_MAX_NEWTON {
            return Err(Error::NotConverged { solver: "hjb newton", iterations: it, residual: rn });
        }
        it += 1;
        let jac = ctx.hjb_jacobian(&u, z);
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let step = LevelSolver::new(jac)?.solve(&rhs)?;
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a + lambda * b).collect();
            let rt = ctx.hjb_residual(&trial, u_next, f, z);
            let rtn = max_norm(&rt);
            if rtn < rn || lambda <= 1.0 / 1048576.0 {
                let small = max_norm(&step) * lambda <= 1e-14 * (1.0 + max_norm(&u));
                u = trial;
                r = rt;
                rn = rtn;
                if small && rn <= 1e3 * HJB_TOL {
                    return Ok((u, NewtonStepStats { iterations: it, residual: rn }));
                }
                break;
            }
            lambda *= 0.5;
        }
    }
    Ok((u, NewtonStepStats { iterations: it, residual: rn }))
}

/// Coupling data of one population: running cost per level `0..nt`
/// (evaluated at level `n + 1`), terminal values and the density factors of
/// the HJB and transport Hamiltonians when they depend on `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopData {
    pub f: Field,
    pub terminal: Vec<f64>,
    pub z_hjb: Option<Field>,
    pub z_kfp: Option<Field>,
}

impl PopData {
    pub fn z_transport(&self) -> Option<&Field> {
        self.z_kfp.as_ref().or(self.z_hjb.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingData {
    pub pops: Vec<PopData>,
}

impl CouplingData {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for p in &self.pops {
            v.extend_from_slice(&p.f.data);
            v.extend_from_slice(&p.terminal);
            for z in [&p.z_hjb, &p.z_kfp].into_iter().flatten() {
                v.extend_from_slice(&z.data);
            }
        }
        v
    }

    /// Rebuilds data shaped like `self` from a flat vector.
    pub fn with_values(&self, v: &[f64]) -> CouplingData {
        let mut out = self.clone();
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&v[at..at + dst.len()]);
            at += dst.len();
        };
        for p in &mut out.pops {
            take(&mut p.f.data);
            take(&mut p.terminal);
            if let Some(z) = p.z_hjb.as_mut() {
                take(&mut z.data);
            }
            if let Some(z) = p.z_kfp.as_mut() {
                take(&mut z.data);
            }
        }
        out
    }
}

/// Value functions and densities of all populations on levels `0..=nt`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfgSolution {
    pub u: Vec<Field>,
    pub m: Vec<Field>,
}

/// Coupling data generated by density flows (one `Field` per population).
pub fn coupling_data(problem: &MfgProblem, m: &[Field]) -> Result<CouplingData> {
    let grid = &problem.grid;
    let nt = grid.nt;
    let nodes = grid.nodes();
    let mut pops = Vec::with_capacity(problem.populations());
    for (k, pop) in problem.populations.iter().enumerate() {
        let (has_z, has_zk) = problem.factor_channels(k);
        let mut f = Field::zeros(nt, nodes);
        let mut z_hjb = has_z.then(|| Field::zeros(nt, nodes));
        let mut z_kfp = has_zk.then(|| Field::zeros(nt, nodes));
        for n in 0..nt {
            let ms: Vec<&[f64]> = m.iter().map(|f| f.level(n + 1)).collect();
            f.set_level(n, &pop.cost.eval_level(k, &ms, problem.mode)?);
            if let Some(z) = z_hjb.as_mut() {
                let zl = factor_level(problem, k, &ms, problem.mode);
                z.set_level(n, &zl);
            }
            if let Some(z) = z_kfp.as_mut() {
                z.set_level(n, &factor_level(problem, k, &ms, Mode::Mfg));
            }
        }
        let mt = m[k].level(nt);
        let terminal = terminal_level(problem, k, mt, None);
        pops.push(PopData { f, terminal, z_hjb, z_kfp });
    }
    Ok(CouplingData { pops })
}

fn factor_level(problem: &MfgProblem, k: usize, ms: &[&[f64]], mode: Mode) -> Vec<f64> {
    let h = &problem.populations[k].hamiltonian;
    (0..ms[k].len())
        .map(|i| {
            let aux = aux_at(ms, k, i);
            let c = h.density_factor(&aux);
            match mode {
                Mode::Mfg => c,
                Mode::Mfc => c + aux[0] * h.density_factor_grad(&aux)[0],
            }
        })
        .collect()
}

fn factor_derivative(problem: &MfgProblem, k: usize, ms: &[&[f64]], dms: &[&[f64]], mode: Mode) -> Vec<f64> {
    let h = &problem.populations[k].hamiltonian;
    (0..ms[k].len())
        .map(|i| {
            let aux = aux_at(ms, k, i);
            let daux = aux_at(dms, k, i);
            let [ga, gb] = h.density_factor_grad(&aux);
            match mode {
                Mode::Mfg => ga * daux[0] + gb * daux[1],
                Mode::Mfc => {
                    let e = 1e-6 * (1.0 + aux[0].abs());
                    let up = [aux[0] + e, aux[1]];
                    let dn = [aux[0] - e, aux[1]];
                    let g_up = h.density_factor_grad(&up)[0];
                    let g_dn = h.density_factor_grad(&dn)[0];
                    let dga = (g_up - g_dn) / (2.0 * e);
                    (2.0 * ga + aux[0] * dga) * daux[0] + gb * daux[1]
                }
            }
        })
        .collect()
}

fn aux_at(ms: &[&[f64]], k: usize, i: usize) -> [f64; 2] {
    let own = ms[k][i];
    let oth = if ms.len() == 2 { ms[1 - k][i] } else { 0.0 };
    [own, oth]
}

fn terminal_level(problem: &MfgProblem, k: usize, m: &[f64], dm: Option<&[f64]>) -> Vec<f64> {
    let t = &problem.populations[k].terminal;
    let slope = match problem.mode {
        Mode::Mfg => t.slope,
        Mode::Mfc => 2.0 * t.slope,
    };
    match dm {
        None => t.shift.iter().zip(m).map(|(s, v)| s + slope * v).collect(),
        Some(d) => d.iter().map(|v| slope * v).collect(),
    }
}

fn coupling_derivative(problem: &MfgProblem, m: &[Field], dm: &[Field]) -> Result<CouplingData> {
    let grid = &problem.grid;
    let nt = grid.nt;
    let nodes = grid.nodes();
    let mut pops = Vec::new();
    for (k, pop) in problem.populations.iter().enumerate() {
        let (has_z, has_zk) = problem.factor_channels(k);
        let mut f = Field::zeros(nt, nodes);
        let mut z_hjb = has_z.then(|| Field::zeros(nt, nodes));
        let mut z_kfp = has_zk.then(|| Field::zeros(nt, nodes));
        for n in 0..nt {
            let ms: Vec<&[f64]> = m.iter().map(|f| f.level(n + 1)).collect();
            let dms: Vec<&[f64]> = dm.iter().map(|f| f.level(n + 1)).collect();
            f.set_level(n, &pop.cost.derivative_level(k, &ms, &dms, problem.mode)?);
            if let Some(z) = z_hjb.as_mut() {
                z.set_level(n, &factor_derivative(problem, k, &ms, &dms, problem.mode));
            }
            if let Some(z) = z_kfp.as_mut() {
                z.set_level(n, &factor_derivative(problem, k, &ms, &dms, Mode::Mfg));
            }
        }
        let terminal = terminal_level(problem, k, m[k].level(nt), Some(dm[k].level(nt)));
        pops.push(PopData { f, terminal, z_hjb, z_kfp });
    }
    Ok(CouplingData { pops })
}

/// Data of the initial densities replicated over all levels.
pub fn initial_data(problem: &MfgProblem) -> Result<CouplingData> {
    let m: Vec<Field> = problem.populations.iter().map(|p| Field::from_level(problem.grid.nt + 1, &p.m0)).collect();
    coupling_data(problem, &m)
}

struct PopTrace {
    hjb_jac: Vec<crate::linalg::CsrMatrix>,
    hjb_solver: Vec<OnceCell<LevelSolver>>,
    kfp_solver: Vec<LevelSolver>,
}

/// One evaluation of the fixed-point map, with everything needed to apply
/// its derivative.
pub struct XiEvaluation {
    pub input: CouplingData,
    pub output: CouplingData,
    pub solution: MfgSolution,
    pub hjb_newton_steps: usize,
    traces: Vec<PopTrace>,
}

/// Solves the HJB equation backward for population `k` with given data.
fn hjb_backward(
    problem: &MfgProblem,
    k: usize,
    data: &PopData,
) -> Result<(Field, Vec<crate::linalg::CsrMatrix>, usize)> {
    let ctx = PopCtx::new(problem, k);
    let nt = problem.grid.nt;
    let mut u = Field::zeros(nt + 1, ctx.nodes);
    u.set_level(nt, &data.terminal);
    let mut jacs = Vec::with_capacity(nt);
    let mut steps = 0;
    for n in (0..nt).rev() {
        let z = data.z_hjb.as_ref().map(|z| z.level(n));
        let next = u.level(n + 1).to_vec();
        let (un, st) = hjb_solve_level(&ctx, &next, data.f.level(n), z)?;
        steps += st.iterations;
        jacs.push(ctx.hjb_jacobian(&un, z));
        u.set_level(n, &un);
    }
    jacs.reverse();
    Ok((u, jacs, steps))
}

fn kfp_forward(problem: &MfgProblem, k: usize, u: &Field, data: &PopData) -> Result<(Field, Vec<LevelSolver>)> {
    let ctx = PopCtx::new(problem, k);
    let nt = problem.grid.nt;
    let mut m = Field::zeros(nt + 1, ctx.nodes);
    m.set_level(0, &problem.populations[k].m0);
    let mut solvers = Vec::with_capacity(nt);
    for n in 0..nt {
        let z = data.z_transport().map(|z| z.level(n));
        let a = ctx.kfp_matrix(u.level(n), z);
        let rhs: Vec<f64> = m.level(n).iter().zip(&ctx.source).map(|(v, s)| v / ctx.dt + s).collect();
        let solver = LevelSolver::new(a)?;
        let next = solver.solve(&rhs)?;
        m.set_level(n + 1, &next);
        solvers.push(solver);
    }
    Ok((m, solvers))
}

pub fn xi_evaluate(problem: &MfgProblem, data: &CouplingData) -> Result<XiEvaluation> {
    let mut us = Vec::new();
    let mut ms = Vec::new();
    let mut traces = Vec::new();
    let mut steps = 0;
    for k in 0..problem.populations() {
        let (u, jacs, st) = hjb_backward(problem, k, &data.pops[k])?;
        steps += st;
        let (m, kfp_solver) = kfp_forward(problem, k, &u, &data.pops[k])?;
        let hjb_solver = (0..jacs.len()).map(|_| OnceCell::new()).collect();
        traces.push(PopTrace { hjb_jac: jacs, hjb_solver, kfp_solver });
        us.push(u);
        ms.push(m);
    }
    let output = coupling_data(problem, &ms)?;
    Ok(XiEvaluation {
        input: data.clone(),
        output,
        solution: MfgSolution { u: us, m: ms },
        hjb_newton_steps: steps,
        traces,
    })
}

/// The fixed-point map: HJB backward, KFP forward, then the data generated by `M`.
pub fn xi_map(problem: &MfgProblem, data: &CouplingData) -> Result<CouplingData> {
    Ok(xi_evaluate(problem, data)?.output)
}

impl XiEvaluation {
    /// Derivative of the map at `self.input` along `dd`, through the
    /// linearised HJB and KFP equations.
    pub fn apply_derivative(&self, problem: &MfgProblem, dd: &CouplingData) -> Result<CouplingData> {
        let nt = problem.grid.nt;
        let mut dms = Vec::new();
        for k in 0..problem.populations() {
            let ctx = PopCtx::new(problem, k);
            let s = ctx.slots();
            let trace = &self.traces[k];
            let data = &self.input.pops[k];
            let ddk = &dd.pops[k];
            let u = &self.solution.u[k];
            let m = &self.solution.m[k];
            let mut du = Field::zeros(nt + 1, ctx.nodes);
            du.set_level(nt, &ddk.terminal);
            let mut q = vec![0.0; s];
            for n in (0..nt).rev() {
                let un = u.level(n);
                let mut rhs: Vec<f64> =
                    du.level(n + 1).iter().zip(ddk.f.level(n)).map(|(a, b)| a / ctx.dt + b).collect();
                if let Some(dz) = ddk.z_hjb.as_ref() {
                    for (i, r) in rhs.iter_mut().enumerate() {
                        ctx.hjb.gradient(un, i, true, &mut q);
                        *r -= dz.level(n)[i] * ctx.ham.base_eval(ctx.coords[i], &q);
                    }
                }
                let solver = match trace.hjb_solver[n].get() {
                    Some(s) => s,
                    None => {
                        let s = LevelSolver::new(trace.hjb_jac[n].clone())?;
                        let _ = trace.hjb_solver[n].set(s);
                        trace.hjb_solver[n].get().unwrap()
                    }
                };
                du.set_level(n, &solver.solve(&rhs)?);
            }
            let mut dm = Field::zeros(nt + 1, ctx.nodes);
            let mut hess = vec![0.0; s * s];
            let mut dq = vec![0.0; s];
            let mut g = vec![0.0; s];
            for n in 0..nt {
                let un = u.level(n);
                let dun = du.level(n);
                let z = data.z_transport().map(|z| z.level(n));
                let dz = ddk.z_transport().map(|z| z.level(n));
                let mut dcoef = vec![0.0; ctx.nodes * s];
                for i in 0..ctx.nodes {
                    ctx.hjb.gradient(un, i, true, &mut q);
                    ctx.hjb.gradient(dun, i, false, &mut dq);
                    ctx.ham.base_hessian(ctx.coords[i], &q, &mut hess);
                    ctx.ham.base_grad(ctx.coords[i], &q, &mut g);
                    let zi = z.map_or(1.0, |z| z[i]);
                    let dzi = dz.map_or(0.0, |z| z[i]);
                    for a in 0..s {
                        let hd: f64 = (0..s).map(|b| hess[a * s + b] * dq[b]).sum();
                        dcoef[i * s + a] = zi * hd + dzi * g[a];
                    }
                }
                let corr = ctx.kfp.apply_gt(&dcoef, m.level(n + 1));
                let rhs: Vec<f64> = dm.level(n).iter().zip(&corr).map(|(a, c)| a / ctx.dt - c).collect();
                dm.set_level(n + 1, &trace.kfp_solver[n].solve(&rhs)?);
            }
            dms.push(dm);
        }
        coupling_derivative(problem, &self.solution.m, &dms)
    }
}

/// Transport term `T(U, M)` for population `k`, density factors `z` per node.
pub fn transport(problem: &MfgProblem, k: usize, u: &[f64], m: &[f64], z: Option<&[f64]>) -> Vec<f64> {
    PopCtx::new(problem, k).transport(u, m, z)
}

/// One implicit HJB step for population `k` with data generated by `m_next`.
pub fn hjb_backward_step(
    problem: &MfgProblem,
    k: usize,
    u_next: &[f64],
    m_next: &[&[f64]],
) -> Result<(Vec<f64>, NewtonStepStats)> {
    let ctx = PopCtx::new(problem, k);
    let f = problem.populations[k].cost.eval_level(k, m_next, problem.mode)?;
    let z = problem.factor_channels(k).0.then(|| factor_level(problem, k, m_next, problem.mode));
    hjb_solve_level(&ctx, u_next, &f, z.as_deref())
}

/// One implicit KFP step for population `k` with drift from `u`.
pub fn kfp_forward_step(
    problem: &MfgProblem,
    k: usize,
    u: &[f64],
    m_prev: &[f64],
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let ctx = PopCtx::new(problem, k);
    let a = ctx.kfp_matrix(u, z);
    let rhs: Vec<f64> = m_prev.iter().zip(&ctx.source).map(|(v, s)| v / ctx.dt + s).collect();
    LevelSolver::new(a)?.solve(&rhs)
}

/// Density factors of the transport Hamiltonian of population `k` at the
/// densities `ms` of all populations, `None` when it ignores the density.
pub fn transport_factors(problem: &MfgProblem, k: usize, ms: &[&[f64]]) -> Option<Vec<f64>> {
    problem.populations[k].hamiltonian.depends_on_density().then(|| factor_level(problem, k, ms, Mode::Mfg))
}

/// Entry and exit mass flux rates of population `k` through the boundary for
/// drift from `u` and density `m` on one level.
pub fn boundary_fluxes(problem: &MfgProblem, k: usize, u: &[f64], m: &[f64], z: Option<&[f64]>) -> (f64, f64) {
    let ctx = PopCtx::new(problem, k);
    let grid = &problem.grid;
    let vol = grid.cell_volume();
    let entry = vol * ctx.source.iter().sum::<f64>();
    let coef = ctx.coefficients(u, z);
    let s = ctx.slots();
    let mut exit = 0.0;
    for i in 0..ctx.nodes {
        for slot in 0..s {
            if let Nb::Ghost(_) = ctx.kfp.nb[i * s + slot] {
                exit += vol * m[i] * (ctx.nu / (grid.h * grid.h) + coef[i * s + slot].abs() / grid.h);
            }
        }
    }
    (entry, exit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MfgResidual {
    pub hjb: f64,
    pub kfp: f64,
    pub terminal: f64,
    pub total: f64,
}

/// Max-norm residuals of the full discrete system at `(U, M)`.
pub fn mfg_residual(problem: &MfgProblem, sol: &MfgSolution) -> Result<MfgResidual> {
    let data = coupling_data(problem, &sol.m)?;
    let nt = problem.grid.nt;
    let (mut hjb, mut kfp, mut terminal) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..problem.populations() {
        let ctx = PopCtx::new(problem, k);
        let d = &data.pops[k];
        let (u, m) = (&sol.u[k], &sol.m[k]);
        for n in 0..nt {
            let z = d.z_hjb.as_ref().map(|z| z.level(n));
            let r = ctx.hjb_residual(u.level(n), u.level(n + 1), d.f.level(n), z);
            hjb = hjb.max(max_norm(&r));
            let zt = d.z_transport().map(|z| z.level(n));
            let tr = ctx.transport(u.level(n), m.level(n + 1), zt);
            let lap = ctx.kfp.laplacian(m.level(n + 1), false);
            for i in 0..ctx.nodes {
                let v = (m.level(n + 1)[i] - m.level(n)[i]) / ctx.dt - ctx.nu * lap[i] - tr[i] - ctx.source[i];
                kfp = kfp.max(v.abs());
            }
        }
        let m0 = &problem.populations[k].m0;
        kfp = kfp.max(crate::grid::max_abs_diff(m.level(0), m0));
        terminal = terminal.max(crate::grid::max_abs_diff(u.level(nt), &d.terminal));
    }
    Ok(MfgResidual { hjb, kfp, terminal, total: hjb.max(kfp).max(terminal) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Continuation {
    pub nu0: f64,
    pub kappa: f64,
    pub stage_tol: f64,
}

impl Default for Continuation {
    fn default() -> Self {
        Continuation { nu0: 1.0, kappa: 0.5, stage_tol: 1e-8 }
    }
}

impl Continuation {
    /// Viscosities of the successive stages, ending at `target`.
    pub fn schedule(&self, target: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut nu = self.nu0;
        while nu > target * (1.0 + 1e-12) && self.kappa < 1.0 && self.kappa > 0.0 {
            out.push(nu);
            nu *= self.kappa;
        }
        out.push(target);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonParams {
    pub tol: f64,
    pub max_iter: usize,
    pub inner_tol: f64,
    pub inner_max: usize,
    pub continuation: Option<Continuation>,
}

impl Default for NewtonParams {
    fn default() -> Self {
        NewtonParams {
            tol: 1e-10,
            max_iter: 40,
            inner_tol: 1e-4,
            inner_max: 200,
            continuation: Some(Continuation::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardParams {
    pub delta: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardParams {
    fn default() -> Self {
        PicardParams { delta: 0.5, tol: 1e-9, max_iter: 5000 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    pub solver: &'static str,
    pub iterations: usize,
    pub stages: Vec<f64>,
    pub history: Vec<f64>,
    pub residual: MfgResidual,
}

pub struct MfgOutcome {
    pub solution: MfgSolution,
    pub data: CouplingData,
    pub report: SolverReport,
}

struct NewtonOperator<'a> {
    problem: &'a MfgProblem,
    eval: &'a XiEvaluation,
    template: &'a CouplingData,
    error: RefCell<Option<Error>>,
}

impl LinearOperator for NewtonOperator<'_> {
    fn dim(&self) -> usize {
        self.template.to_vec().len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let dd = self.template.with_values(x);
        match self.eval.apply_derivative(self.problem, &dd) {
            Ok(d) => x.iter().zip(d.to_vec()).map(|(a, b)| a - b).collect(),
            Err(e) => {
                *self.error.borrow_mut() = Some(e);
                vec![0.0; x.len()]
            }
        }
    }
}

fn residual_vec(eval: &XiEvaluation) -> Vec<f64> {
    eval.input.to_vec().iter().zip(eval.output.to_vec()).map(|(a, b)| a - b).collect()
}

/// Newton iterations on `d - Xi(d) = 0` for one viscosity.
fn newton_stage(
    problem: &MfgProblem,
    start: CouplingData,
    tol: f64,
    params: &NewtonParams,
    history: &mut Vec<f64>,
) -> Result<XiEvaluation> {
    let mut eval = xi_evaluate(problem, &start)?;
    let mut r = residual_vec(&eval);
    let mut rn = max_norm(&r);
    history.push(rn);
    let mut it = 0;
    while rn > tol {
        if it == params.max_iter {
            return Err(Error::NotConverged { solver: "newton", iterations: it, residual: rn });
        }
        it += 1;
        let op = NewtonOperator { problem, eval: &eval, template: &eval.input, error: RefCell::new(None) };
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let step = match bicgstab(&op, &rhs, None, &IdentityPreconditioner, params.inner_tol, params.inner_max) {
            Ok(k) => k.x,
            Err(Error::NotConverged { .. }) | Err(Error::Breakdown(_)) => rhs.clone(),
            Err(e) => return Err(e),
        };
        if let Some(e) = op.error.into_inner() {
            return Err(e);
        }
        let base = eval.input.to_vec();
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = base.iter().zip(&step).map(|(a, b)| a + lambda * b).collect();
            let cand = xi_evaluate(problem, &eval.input.with_values(&trial));
            if let Ok(cand) = cand {
                let rc = residual_vec(&cand);
                let rcn = max_norm(&rc);
                if rcn < rn || lambda < 1.0 / 64.0 {
                    eval = cand;
                    r = rc;
                    rn = rcn;
                    break;
                }
            } else if lambda < 1.0 / 64.0 {
                return Err(cand.err().unwrap());
            }
            lambda *= 0.5;
        }
        history.push(rn);
    }
    Ok(eval)
}

fn with_nu(problem: &MfgProblem, nu: f64) -> MfgProblem {
    let mut p = problem.clone();
    p.nu = nu;
    p
}

/// Newton's method on the fixed-point map with continuation in the viscosity.
pub fn solve_newton(problem: &MfgProblem, params: &NewtonParams, warm: Option<CouplingData>) -> Result<MfgOutcome> {
    problem.validate()?;
    let stages = match (&params.continuation, &warm) {
        (Some(c), None) => c.schedule(problem.nu),
        _ => vec![problem.nu],
    };
    let mut data = match warm {
        Some(d) => d,
        None => initial_data(&with_nu(problem, stages[0]))?,
    };
    let mut history = Vec::new();
    let mut eval = None;
    for (s, &nu) in stages.iter().enumerate() {
        let p = with_nu(problem, nu);
        let last = s + 1 == stages.len();
        let tol = if last { params.tol } else { params.continuation.map_or(params.tol, |c| c.stage_tol) };
        let e = newton_stage(&p, data, tol, params, &mut history)?;
        data = e.input.clone();
        eval = Some(e);
    }
    let eval = eval.unwrap();
    let residual = mfg_residual(problem, &eval.solution)?;
    Ok(MfgOutcome {
        solution: eval.solution,
        data: eval.input,
        report: SolverReport { solver: "newton", iterations: history.len() - stages.len(), stages, history, residual },
    })
}

/// Damped fixed-point iterations `d <- (1 - delta) d + delta Xi(d)`.
pub fn solve_picard(problem: &MfgProblem, params: &PicardParams, warm: Option<CouplingData>) -> Result<MfgOutcome> {
    problem.validate()?;
    if !(params.delta > 0.0 && params.delta <= 1.0) {
        return Err(Error::Problem("damping must lie in (0, 1]".into()));
    }
    let mut data = match warm {
        Some(d) => d,
        None => initial_data(problem)?,
    };
    let mut history = Vec::new();
    for it in 1..=params.max_iter {
        let eval = xi_evaluate(problem, &data)?;
        let d = data.to_vec();
        let out = eval.output.to_vec();
        let change = params.delta * crate::grid::max_abs_diff(&d, &out);
        history.push(change);
        if change <= params.tol {
            let residual = mfg_residual(problem, &eval.solution)?;
            return Ok(MfgOutcome {
                solution: eval.solution,
                data: eval.input,
                report: SolverReport { solver: "picard", iterations: it, stages: vec![problem.nu], history, residual },
            });
        }
        let next: Vec<f64> = d.iter().zip(&out).map(|(a, b)| (1.0 - params.delta) * a + params.delta * b).collect();
        data = data.with_values(&next);
    }
    Err(Error::NotConverged {
        solver: "picard",
        iterations: params.max_iter,
        residual: *history.last().unwrap_or(&f64::NAN),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecursiveParams {
    pub subintervals: usize,
    pub rounds: usize,
    pub picard: PicardParams,
}

impl Default for RecursiveParams {
    fn default() -> Self {
        RecursiveParams { subintervals: 4, rounds: 3, picard: PicardParams { delta: 0.5, tol: 1e-10, max_iter: 5000 } }
    }
}

pub struct RecursiveOutcome {
    pub solution: MfgSolution,
    pub leaf_calls: usize,
    pub elementary_calls: usize,
    pub residual: MfgResidual,
}

/// Leaf calls `J^(K-k)` made by the recursive solver started at subinterval `k`.
pub fn recursive_leaf_count(subintervals: usize, rounds: usize, k: usize) -> usize {
    rounds.pow((subintervals - k) as u32)
}

/// Elementary solves `sum_{i=1}^{K-k} J^i` made from subinterval `k`.
pub fn recursive_elementary_count(subintervals: usize, rounds: usize, k: usize) -> usize {
    (1..=subintervals - k).map(|i| rounds.pow(i as u32)).sum()
}

struct Recursion<'a> {
    problem: &'a MfgProblem,
    params: RecursiveParams,
    steps: usize,
    leaves: usize,
    elementary: usize,
}

impl Recursion<'_> {
    /// Solution on `[k T/K, T]` from initial densities `m_init`.
    fn solve(&mut self, k: usize, m_init: &[Vec<f64>]) -> Result<(Vec<Field>, Vec<Field>)> {
        let big_k = self.params.subintervals;
        let pops = self.problem.populations();
        let nodes = self.problem.grid.nodes();
        if k == big_k {
            self.leaves += 1;
            let mut u = Vec::new();
            let mut m = Vec::new();
            for (p, mi) in m_init.iter().enumerate() {
                u.push(Field::from_level(1, &terminal_level(self.problem, p, mi, None)));
                m.push(Field::from_level(1, mi));
            }
            return Ok((u, m));
        }
        let levels = (big_k - k) * self.steps + 1;
        let mut u: Vec<Field> = (0..pops).map(|_| Field::zeros(levels, nodes)).collect();
        let mut m: Vec<Field> = m_init.iter().map(|mi| Field::from_level(levels, mi)).collect();
        let sub_horizon = self.problem.grid.dt * self.steps as f64;
        for _ in 0..self.params.rounds {
            let mid: Vec<Vec<f64>> = m.iter().map(|f| f.level(self.steps).to_vec()).collect();
            let (ut, mt) = self.solve(k + 1, &mid)?;
            for p in 0..pops {
                for l in 0..ut[p].levels {
                    u[p].set_level(self.steps + l, ut[p].level(l));
                    m[p].set_level(self.steps + l, mt[p].level(l));
                }
            }
            let terminal: Vec<Vec<f64>> = u.iter().map(|f| f.level(self.steps).to_vec()).collect();
            let sub = self.problem.restricted(self.steps, sub_horizon, m_init, Some(&terminal))?;
            let guess: Vec<Field> = m
                .iter()
                .map(|f| Field { levels: self.steps + 1, nodes, data: f.data[..(self.steps + 1) * nodes].to_vec() })
                .collect();
            let warm = coupling_data(&sub, &guess)?;
            let out = solve_picard(&sub, &self.params.picard, Some(warm))?;
            self.elementary += 1;
            for p in 0..pops {
                for l in 0..=self.steps {
                    u[p].set_level(l, out.solution.u[p].level(l));
                    m[p].set_level(l, out.solution.m[p].level(l));
                }
            }
        }
        Ok((u, m))
    }
}

/// Recursive time-splitting solver: `K` subintervals, `J` rounds per level.
pub fn recursive_solve(problem: &MfgProblem, params: &RecursiveParams) -> Result<RecursiveOutcome> {
    problem.validate()?;
    let big_k = params.subintervals;
    if big_k == 0 || problem.grid.nt % big_k != 0 {
        return Err(Error::Problem(format!("{} steps do not split into {big_k} subintervals", problem.grid.nt)));
    }
    if params.rounds == 0 {
        return Err(Error::Problem("at least one round is needed".into()));
    }
    let mut rec = Recursion { problem, params: *params, steps: problem.grid.nt / big_k, leaves: 0, elementary: 0 };
    let m0: Vec<Vec<f64>> = problem.populations.iter().map(|p| p.m0.clone()).collect();
    let (u, m) = rec.solve(0, &m0)?;
    let solution = MfgSolution { u, m };
    let residual = mfg_residual(problem, &solution)?;
    Ok(RecursiveOutcome { solution, leaf_calls: rec.leaves, elementary_calls: rec.elementary, residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LongTimeParams {
    pub tol: f64,
    pub max_iter: usize,
    pub newton: NewtonParams,
}

impl Default for LongTimeParams {
    fn default() -> Self {
        LongTimeParams { tol: 1e-6, max_iter: 200, newton: NewtonParams::default() }
    }
}

pub struct LongTimeOutcome {
    pub u_mid: Vec<Vec<f64>>,
    pub m_mid: Vec<Vec<f64>>,
    pub iterations: usize,
    pub history: Vec<f64>,
    pub last: MfgOutcome,
}

fn centered(v: &[f64], torus: bool) -> Vec<f64> {
    if !torus {
        return v.to_vec();
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Long-horizon iteration: each pass restarts from the mid-horizon density and
/// uses the mid-horizon value function as terminal condition, until the
/// mid-horizon slice stops moving (value functions compared up to constants
/// on the torus).
pub fn ergodic_longtime_solve(problem: &MfgProblem, params: &LongTimeParams) -> Result<LongTimeOutcome> {
    problem.validate()?;
    let nt = problem.grid.nt;
    if nt % 2 != 0 {
        return Err(Error::Problem("long-time iteration needs an even number of steps".into()));
    }
    let half = nt / 2;
    let torus = problem.grid.is_torus();
    let mut current = problem.clone();
    let mut warm: Option<CouplingData> = None;
    let mut prev: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
    let mut history = Vec::new();
    for it in 1..=params.max_iter {
        let out = solve_newton(&current, &params.newton, warm.take())?;
        let u_mid: Vec<Vec<f64>> = out.solution.u.iter().map(|f| f.level(half).to_vec()).collect();
        let m_mid: Vec<Vec<f64>> = out.solution.m.iter().map(|f| f.level(half).to_vec()).collect();
        if let Some((pu, pm)) = &prev {
            let mut d = 0.0f64;
            for p in 0..u_mid.len() {
                d = d.max(crate::grid::max_abs_diff(&m_mid[p], &pm[p]));
                d = d.max(crate::grid::max_abs_diff(&centered(&u_mid[p], torus), &centered(&pu[p], torus)));
            }
            history.push(d);
            if d <= params.tol {
                return Ok(LongTimeOutcome { u_mid, m_mid, iterations: it, history, last: out });
            }
        }
        current = problem.restricted(nt, problem.grid.horizon, &m_mid, Some(&u_mid))?;
        warm = Some(shift_data(&out.data, half));
        prev = Some((u_mid, m_mid));
    }
    Err(Error::NotConverged {
        solver: "long-time iteration",
        iterations: params.max_iter,
        residual: *history.last().unwrap_or(&f64::NAN),
    })
}

/// Data shifted by `half` levels, the tail repeating the last level.
fn shift_data(d: &CouplingData, half: usize) -> CouplingData {
    let shift = |f: &Field| {
        let mut g = f.clone();
        for n in 0..f.levels {
            let src = (n + half).min(f.levels - 1);
            g.set_level(n, f.level(src));
        }
        g
    };
    CouplingData {
        pops: d
            .pops
            .iter()
            .map(|p| PopData {
                f: shift(&p.f),
                terminal: p.terminal.clone(),
                z_hjb: p.z_hjb.as_ref().map(shift),
                z_kfp: p.z_kfp.as_ref().map(shift),
            })
            .collect(),
    }
}
