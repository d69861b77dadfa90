//! Stationary two-income Huggett economy: state-constrained HJB with upwind
//! CRRA envelopes, the stationary Fokker-Planck equation as the adjoint of the
//! linearised HJB, and the interest rate clearing aggregate wealth.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::CrraEnvelopes;
use crate::linalg::{find_root, CsrMatrix, DenseLu, SparseLu, Triplets};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HuggettParams {
    pub rho: f64,
    pub gamma: f64,
    /// Intensity of leaving income state 1.
    pub lambda1: f64,
    /// Intensity of leaving income state 2.
    pub lambda2: f64,
    pub y1: f64,
    pub y2: f64,
    pub x_low: f64,
    pub x_high: f64,
    /// Number of cells; the grid has `n + 1` nodes.
    pub n: usize,
}

impl Default for HuggettParams {
    fn default() -> Self {
        HuggettParams {
            rho: 0.05,
            gamma: 2.0,
            lambda1: 0.25,
            lambda2: 0.25,
            y1: 0.1,
            y2: 0.2,
            x_low: -0.15,
            x_high: 0.6,
            n: 200,
        }
    }
}

impl HuggettParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.rho > 0.0) || !(self.gamma > 0.0) || self.gamma == 1.0 {
            return bad("need rho > 0 and gamma > 0, gamma != 1".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("intensities must be nonnegative".into());
        }
        if !(self.y1 > 0.0 && self.y1 < self.y2) {
            return bad(format!("need 0 < y1 < y2, got {} and {}", self.y1, self.y2));
        }
        if !(self.x_high > self.x_low) || self.n < 4 {
            return bad("need x_high > x_low and at least 4 cells".into());
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        (self.x_high - self.x_low) / self.n as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_low + i as f64 * self.h()
    }

    pub fn income(&self, j: usize) -> f64 {
        if j == 0 {
            self.y1
        } else {
            self.y2
        }
    }

    /// Intensity of leaving income state `j`.
    pub fn lambda(&self, j: usize) -> f64 {
        if j == 0 {
            self.lambda1
        } else {
            self.lambda2
        }
    }

    /// Stationary group masses `(lambda2, lambda1) / (lambda1 + lambda2)`.
    pub fn group_masses(&self) -> [f64; 2] {
        let s = self.lambda1 + self.lambda2;
        if s == 0.0 {
            [0.5, 0.5]
        } else {
            [self.lambda2 / s, self.lambda1 / s]
        }
    }

    /// Lowest resources `y1 + r x` over the grid must stay positive.
    pub fn feasible(&self, r: f64) -> bool {
        self.y1 + r * self.x_low > 0.0 && self.y1 + r * self.x_high > 0.0
    }

    fn nodes(&self) -> usize {
        self.n + 1
    }

    fn envelopes(&self, r: f64, i: usize, j: usize) -> CrraEnvelopes {
        CrraEnvelopes::new(self.gamma, self.income(j) + r * self.x(i))
    }
}

/// Value function and stationary measure, both `(n + 1) x 2`, stored income-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HuggettSolution {
    pub r: f64,
    pub v: [Vec<f64>; 2],
    pub m: [Vec<f64>; 2],
    pub aggregate_wealth: f64,
}

fn forward(v: &[f64], i: usize, h: f64) -> f64 {
    (v[i + 1] - v[i]) / h
}

fn backward(v: &[f64], i: usize, h: f64) -> f64 {
    (v[i] - v[i - 1]) / h
}

/// Residual of `-rho v + H(x, xi_r, xi_l) + lambda_j (v_other - v_j)` at
/// every node, the boundary rows keeping only the admissible envelope.
pub fn hjb_residual(p: &HuggettParams, r: f64, v: &[Vec<f64>; 2]) -> [Vec<f64>; 2] {
    let (n, h) = (p.n, p.h());
    let mut out = [vec![0.0; n + 1], vec![0.0; n + 1]];
    for j in 0..2 {
        let (vj, vo) = (&v[j], &v[1 - j]);
        for i in 0..=n {
            let e = p.envelopes(r, i, j);
            let mut ham = 0.0;
            if i < n {
                ham += e.up(forward(vj, i, h));
            }
            if i > 0 {
                ham += e.down(backward(vj, i, h));
            }
            if i > 0 && i < n {
                ham -= e.min_value();
            }
            out[j][i] = -p.rho * vj[i] + ham + p.lambda(j) * (vo[i] - vj[i]);
        }
    }
    out
}

/// Per-node derivatives of the Hamiltonian part: `(d/d xi_r, d/d xi_l)`.
fn hamiltonian_slopes(p: &HuggettParams, r: f64, v: &[Vec<f64>; 2]) -> [Vec<(f64, f64)>; 2] {
    let (n, h) = (p.n, p.h());
    let mut out = [vec![(0.0, 0.0); n + 1], vec![(0.0, 0.0); n + 1]];
    for j in 0..2 {
        for i in 0..=n {
            let e = p.envelopes(r, i, j);
            let a = if i < n { e.up_deriv(forward(&v[j], i, h)) } else { 0.0 };
            let b = if i > 0 { e.down_deriv(backward(&v[j], i, h)) } else { 0.0 };
            out[j][i] = (a, b);
        }
    }
    out
}

/// Linearised HJB operator without the discount term, on the unknowns
/// `j (n + 1) + i`. Rows sum to zero and off-diagonals are nonnegative.
pub fn generator(p: &HuggettParams, r: f64, v: &[Vec<f64>; 2]) -> CsrMatrix {
    let (np, h) = (p.nodes(), p.h());
    let mut t = Triplets::new(2 * np, 2 * np);
    let slopes = hamiltonian_slopes(p, r, v);
    for j in 0..2 {
        for i in 0..np {
            let row = j * np + i;
            let (a, b) = slopes[j][i];
            let lam = p.lambda(j);
            if i + 1 < np {
                t.push(row, row + 1, a / h);
            }
            if i > 0 {
                t.push(row, row - 1, -b / h);
            }
            t.push(row, row, (b - a) / h - lam);
            t.push(row, (1 - j) * np + i, lam);
        }
    }
    t.to_csr()
}

fn flatten(v: &[Vec<f64>; 2]) -> Vec<f64> {
    v[0].iter().chain(&v[1]).copied().collect()
}

fn split(x: &[f64], np: usize) -> [Vec<f64>; 2] {
    [x[..np].to_vec(), x[np..].to_vec()]
}

/// `u(y_j + r x_i) / rho`, the value of consuming income forever.
pub fn initial_guess(p: &HuggettParams, r: f64) -> [Vec<f64>; 2] {
    let mk = |j: usize| (0..=p.n).map(|i| p.envelopes(r, i, j).min_value() / p.rho).collect();
    [mk(0), mk(1)]
}

const HJB_TOL: f64 = 1e-10;

/// Damped Newton on the stationary HJB, from `warm` or [`initial_guess`].
pub fn stationary_hjb_solve(p: &HuggettParams, r: f64, warm: Option<&[Vec<f64>; 2]>) -> Result<[Vec<f64>; 2]> {
    p.validate()?;
    if !p.feasible(r) {
        return Err(Error::Problem(format!("rate {r} leaves nonpositive resources on the grid")));
    }
    let np = p.nodes();
    let mut v = warm.cloned().unwrap_or_else(|| initial_guess(p, r));
    let norm = |f: &[Vec<f64>; 2]| f[0].iter().chain(&f[1]).fold(0.0f64, |a, x| a.max(x.abs()));
    let mut res = hjb_residual(p, r, &v);
    let mut rn = norm(&res);
    for _ in 0..100 {
        if rn <= HJB_TOL {
            return Ok(v);
        }
        let jac = generator(p, r, &v).add(&CsrMatrix::identity(2 * np).scaled(-p.rho));
        let lu = SparseLu::factor(&jac)?;
        let step = lu.solve(&flatten(&res));
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = flatten(&v).iter().zip(&step).map(|(a, d)| a - t * d).collect();
            let tv = split(&trial, np);
            let tr = hjb_residual(p, r, &tv);
            let tn = norm(&tr);
            if tn < rn || t < 1e-6 {
                v = tv;
                res = tr;
                rn = tn;
                break;
            }
            t *= 0.5;
        }
    }
    if rn <= HJB_TOL {
        return Ok(v);
    }
    Err(Error::NotConverged { solver: "huggett hjb", iterations: 100, residual: rn })
}

/// Stationary measure `M` with `G^T M = 0`, one redundant row per income
/// group replaced by its mass constraint `h sum_i M_ij = group mass`.
pub fn stationary_fp_solve(p: &HuggettParams, r: f64, v: &[Vec<f64>; 2]) -> Result<[Vec<f64>; 2]> {
    let np = p.nodes();
    let dim = 2 * np;
    let gt = generator(p, r, v).transpose();
    let masses = p.group_masses();
    let mut a = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    for row in 0..dim {
        let (j, i) = (row / np, row % np);
        if i == np - 1 {
            a[row * dim + j * np..row * dim + (j + 1) * np].fill(p.h());
            rhs[row] = masses[j];
        } else {
            for (col, val) in gt.row(row) {
                a[row * dim + col] = val;
            }
        }
    }
    let lu = DenseLu::factor(dim, a).map_err(|e| Error::Singular(format!("stationary measure: {e}")))?;
    let mut m = lu.solve(&rhs);
    let scale = m.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    if m.iter().any(|x| *x < -1e-9 * scale) {
        return Err(Error::Problem("stationary measure has negative entries".into()));
    }
    m.iter_mut().for_each(|x| *x = x.max(0.0));
    Ok(split(&m, np))
}

pub fn aggregate_wealth(p: &HuggettParams, m: &[Vec<f64>; 2]) -> f64 {
    let h = p.h();
    (0..2).map(|j| (0..=p.n).map(|i| h * p.x(i) * m[j][i]).sum::<f64>()).sum()
}

pub fn solve_at_rate(p: &HuggettParams, r: f64, warm: Option<&[Vec<f64>; 2]>) -> Result<HuggettSolution> {
    let v = stationary_hjb_solve(p, r, warm)?;
    let m = stationary_fp_solve(p, r, &v)?;
    let aggregate_wealth = aggregate_wealth(p, &m);
    Ok(HuggettSolution { r, v, m, aggregate_wealth })
}

/// Brent search for the rate clearing aggregate wealth, on `[1e-4, rho - 1e-4]`
/// with the lower end pushed towards `-0.05` until the sign changes.
pub fn equilibrium_r_solve(p: &HuggettParams) -> Result<HuggettSolution> {
    p.validate()?;
    let hi = p.rho - 1e-4;
    let warm: RefCell<Option<[Vec<f64>; 2]>> = RefCell::new(None);
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let wealth = |r: f64| -> f64 {
        let out = solve_at_rate(p, r, warm.borrow().as_ref());
        match out {
            Ok(s) => {
                *warm.borrow_mut() = Some(s.v);
                s.aggregate_wealth
            }
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        }
    };
    let s_hi = wealth(hi);
    let mut lo = 1e-4;
    let mut s_lo = wealth(lo);
    while s_lo * s_hi > 0.0 && lo > -0.05 {
        lo = (lo - 0.01).max(-0.05);
        if !p.feasible(lo) {
            break;
        }
        s_lo = wealth(lo);
    }
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e);
    }
    if s_lo * s_hi > 0.0 {
        return Err(Error::Bracket { what: "aggregate wealth", lo, hi });
    }
    let r = find_root("aggregate wealth", lo, hi, 1e-13, wealth)?;
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e);
    }
    let out = solve_at_rate(p, r, warm.borrow().as_ref())?;
    Ok(out)
}

/// Upwind drift `H_p` at every node of income `j`.
pub fn drift(p: &HuggettParams, sol: &HuggettSolution, j: usize) -> Vec<f64> {
    hamiltonian_slopes(p, sol.r, &sol.v)[j].iter().map(|(a, b)| a + b).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryDiagnostics {
    pub mu1: f64,
    pub mu2: f64,
    /// Slope of `log g1` against `log(x - x_low)` over the first interior nodes.
    pub blowup_exponent: f64,
    pub low_income_drift_negative: bool,
    pub high_income_sign_changes: usize,
    /// First node where the high-income drift stops being positive.
    pub high_income_turning_point: Option<f64>,
}

pub fn boundary_diagnostics(p: &HuggettParams, sol: &HuggettSolution) -> BoundaryDiagnostics {
    let h = p.h();
    let fit_nodes = 8.min(p.n - 1);
    let pts: Vec<(f64, f64)> =
        (1..=fit_nodes).filter(|&i| sol.m[0][i] > 0.0).map(|i| ((p.x(i) - p.x_low).ln(), sol.m[0][i].ln())).collect();
    let k = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / k, sy / k);
    let (num, den) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + (x - mx) * (y - my), b + (x - mx) * (x - mx)));
    let blowup_exponent = if den > 0.0 { num / den } else { f64::NAN };
    let d1 = drift(p, sol, 0);
    let d2 = drift(p, sol, 1);
    let interior = 1..p.n;
    let low_income_drift_negative = interior.clone().all(|i| d1[i] < 0.0);
    let signs: Vec<f64> = interior.clone().map(|i| d2[i]).filter(|d| *d != 0.0).map(f64::signum).collect();
    let high_income_sign_changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
    let high_income_turning_point = interior.clone().find(|&i| d2[i] <= 0.0).map(|i| p.x(i));
    BoundaryDiagnostics {
        mu1: h * sol.m[0][0],
        mu2: h * sol.m[1][0],
        blowup_exponent,
        low_income_drift_negative,
        high_income_sign_changes,
        high_income_turning_point,
    }
}
