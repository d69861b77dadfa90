//! Discrete Hamiltonians `H~(x, q)` acting on the one-sided differences of a
//! node. Slots come in pairs per axis: `q[2a]` is the forward difference and
//! `q[2a+1]` the backward one. Upwinding uses the projection `P_K` on
//! `K = (R_- x R_+)^d`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial potential added to a Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Potential {
    #[default]
    Zero,
    /// `sin(2 pi y) + sin(2 pi x) + cos(4 pi x)`.
    TrigLandscape,
}

impl Potential {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::TrigLandscape => (2.0 * PI * x[1]).sin() + (2.0 * PI * x[0]).sin() + (4.0 * PI * x[0]).cos(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiscreteHamiltonian {
    /// `1/2 |P_K q|^2`.
    GodunovQuadratic,
    /// `g(x) + scale |P_K q|^beta`.
    GodunovPower { beta: f64, scale: f64, potential: Potential },
    /// `|P_K q|^2 / (1 + a m_self + b m_other)`.
    Congestion2D { self_weight: f64, other_weight: f64 },
    /// `scale |P_K q|^2 / (1 + m)^exponent`.
    CongestionPower { scale: f64, exponent: f64 },
    /// Upwind envelopes of `(y + r x) p + gamma/(1-gamma) p^(1-1/gamma)` on
    /// the slots `(xi_forward, xi_backward)`.
    HuggettCrra { gamma: f64, income: f64, rate: f64 },
}

/// Value of a convex conjugate; `Infinite` is never fed into arithmetic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conjugate {
    Finite(f64),
    Infinite,
}

impl Conjugate {
    pub fn finite(self) -> Option<f64> {
        match self {
            Conjugate::Finite(v) => Some(v),
            Conjugate::Infinite => None,
        }
    }
}

/// `P_K` applied slot by slot.
pub fn project_k(q: &[f64]) -> Vec<f64> {
    q.iter().enumerate().map(|(k, &v)| project_slot(k, v)).collect()
}

pub fn project_slot(k: usize, v: f64) -> f64 {
    if k % 2 == 0 {
        v.min(0.0)
    } else {
        v.max(0.0)
    }
}

fn slot_active(k: usize, v: f64) -> bool {
    if k % 2 == 0 {
        v < 0.0
    } else {
        v > 0.0
    }
}

pub fn in_cone(g: &[f64]) -> bool {
    g.iter().enumerate().all(|(k, &v)| project_slot(k, v) == v)
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

impl DiscreteHamiltonian {
    pub fn name(&self) -> &'static str {
        match self {
            DiscreteHamiltonian::GodunovQuadratic => "godunov_quadratic",
            DiscreteHamiltonian::GodunovPower { .. } => "godunov_power",
            DiscreteHamiltonian::Congestion2D { .. } => "congestion_2d",
            DiscreteHamiltonian::CongestionPower { .. } => "congestion_power",
            DiscreteHamiltonian::HuggettCrra { .. } => "huggett_crra",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Hamiltonian(m.to_string()));
        match *self {
            DiscreteHamiltonian::GodunovPower { beta, scale, .. } => {
                if !(beta > 1.0) || !(scale > 0.0) {
                    return bad("power Hamiltonian needs beta > 1 and scale > 0");
                }
            }
            DiscreteHamiltonian::Congestion2D { self_weight, other_weight } => {
                if self_weight < 0.0 || other_weight < 0.0 {
                    return bad("congestion weights must be nonnegative");
                }
            }
            DiscreteHamiltonian::CongestionPower { scale, exponent } => {
                if !(scale > 0.0) || exponent < 0.0 {
                    return bad("congestion scale must be positive, exponent nonnegative");
                }
            }
            DiscreteHamiltonian::HuggettCrra { gamma, income, .. } => {
                if !(gamma > 0.0) || gamma == 1.0 || !(income > 0.0) {
                    return bad("CRRA needs gamma > 0, gamma != 1 and positive income");
                }
            }
            DiscreteHamiltonian::GodunovQuadratic => {}
        }
        Ok(())
    }

    /// True when the value depends on the densities passed as `aux`.
    pub fn depends_on_density(&self) -> bool {
        matches!(self, DiscreteHamiltonian::Congestion2D { .. } | DiscreteHamiltonian::CongestionPower { .. })
    }

    /// Orientation of the monotonicity: `1` for nonincreasing in forward
    /// slots (cost minimisation), `-1` for the reverse (value maximisation).
    pub fn orientation(&self) -> f64 {
        match self {
            DiscreteHamiltonian::HuggettCrra { .. } => -1.0,
            _ => 1.0,
        }
    }

    /// Multiplicative density factor `c(m)`; the value is `c(m) base(q) + g(x)`.
    pub fn density_factor(&self, aux: &[f64]) -> f64 {
        let m = |k: usize| aux.get(k).copied().unwrap_or(0.0);
        match *self {
            DiscreteHamiltonian::Congestion2D { self_weight, other_weight } => {
                1.0 / (1.0 + self_weight * m(0) + other_weight * m(1))
            }
            DiscreteHamiltonian::CongestionPower { scale, exponent } => scale * (1.0 + m(0)).powf(-exponent),
            _ => 1.0,
        }
    }

    /// Partial derivatives of [`Self::density_factor`] in `(m_self, m_other)`.
    pub fn density_factor_grad(&self, aux: &[f64]) -> [f64; 2] {
        let m = |k: usize| aux.get(k).copied().unwrap_or(0.0);
        match *self {
            DiscreteHamiltonian::Congestion2D { self_weight, other_weight } => {
                let d = 1.0 + self_weight * m(0) + other_weight * m(1);
                [-self_weight / (d * d), -other_weight / (d * d)]
            }
            DiscreteHamiltonian::CongestionPower { scale, exponent } => {
                [-exponent * scale * (1.0 + m(0)).powf(-exponent - 1.0), 0.0]
            }
            _ => [0.0, 0.0],
        }
    }

    pub fn potential(&self, x: [f64; 2]) -> f64 {
        match self {
            DiscreteHamiltonian::GodunovPower { potential, .. } => potential.eval(x),
            _ => 0.0,
        }
    }

    /// Density-free part of the Hamiltonian, without potential.
    pub fn base_eval(&self, x: [f64; 2], q: &[f64]) -> f64 {
        match *self {
            DiscreteHamiltonian::GodunovQuadratic => 0.5 * norm_sq(&project_k(q)),
            DiscreteHamiltonian::GodunovPower { beta, scale, .. } => scale * norm_sq(&project_k(q)).sqrt().powf(beta),
            DiscreteHamiltonian::Congestion2D { .. } | DiscreteHamiltonian::CongestionPower { .. } => {
                norm_sq(&project_k(q))
            }
            DiscreteHamiltonian::HuggettCrra { gamma, income, rate } => {
                let e = CrraEnvelopes::new(gamma, income + rate * x[0]);
                e.up(q[0]) + e.down(q[1]) - e.min_value()
            }
        }
    }

    pub fn base_grad(&self, x: [f64; 2], q: &[f64], out: &mut [f64]) {
        match *self {
            DiscreteHamiltonian::GodunovQuadratic => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = project_slot(k, q[k]);
                }
            }
            DiscreteHamiltonian::GodunovPower { beta, scale, .. } => {
                let p = project_k(q);
                let r = norm_sq(&p).sqrt();
                let c = if r > 0.0 { scale * beta * r.powf(beta - 2.0) } else { 0.0 };
                for (o, pk) in out.iter_mut().zip(&p) {
                    *o = c * pk;
                }
            }
            DiscreteHamiltonian::Congestion2D { .. } | DiscreteHamiltonian::CongestionPower { .. } => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = 2.0 * project_slot(k, q[k]);
                }
            }
            DiscreteHamiltonian::HuggettCrra { gamma, income, rate } => {
                let e = CrraEnvelopes::new(gamma, income + rate * x[0]);
                out[0] = e.up_deriv(q[0]);
                out[1] = e.down_deriv(q[1]);
            }
        }
    }

    /// Hessian of the base part, row-major `s x s`; kinks take the inactive side.
    pub fn base_hessian(&self, x: [f64; 2], q: &[f64], out: &mut [f64]) {
        let s = q.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        match *self {
            DiscreteHamiltonian::GodunovQuadratic => {
                for k in 0..s {
                    if slot_active(k, q[k]) {
                        out[k * s + k] = 1.0;
                    }
                }
            }
            DiscreteHamiltonian::GodunovPower { beta, scale, .. } => {
                let p = project_k(q);
                let r = norm_sq(&p).sqrt();
                if r > 1e-300 {
                    let a = scale * beta * r.powf(beta - 2.0);
                    let b = scale * beta * (beta - 2.0) * r.powf(beta - 4.0);
                    for i in 0..s {
                        if !slot_active(i, q[i]) {
                            continue;
                        }
                        for j in 0..s {
                            if slot_active(j, q[j]) {
                                out[i * s + j] = b * p[i] * p[j] + if i == j { a } else { 0.0 };
                            }
                        }
                    }
                }
            }
            DiscreteHamiltonian::Congestion2D { .. } | DiscreteHamiltonian::CongestionPower { .. } => {
                for k in 0..s {
                    if slot_active(k, q[k]) {
                        out[k * s + k] = 2.0;
                    }
                }
            }
            DiscreteHamiltonian::HuggettCrra { gamma, income, rate } => {
                let e = CrraEnvelopes::new(gamma, income + rate * x[0]);
                out[0] = e.up_second(q[0]);
                out[3] = e.down_second(q[1]);
            }
        }
    }

    /// Full value `c(m) base(q) + g(x)`; `aux = [m_self, m_other]`.
    pub fn eval(&self, x: [f64; 2], q: &[f64], aux: &[f64]) -> f64 {
        self.density_factor(aux) * self.base_eval(x, q) + self.potential(x)
    }

    pub fn grad_q(&self, x: [f64; 2], q: &[f64], aux: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; q.len()];
        self.base_grad(x, q, &mut g);
        let c = self.density_factor(aux);
        g.iter_mut().for_each(|v| *v *= c);
        g
    }

    /// `argmin_b t H~(b) + |b - v|^2 / 2` for density-free Hamiltonians.
    pub fn prox(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        match *self {
            DiscreteHamiltonian::GodunovQuadratic => {
                let f = t / (1.0 + t);
                Ok(v.iter().enumerate().map(|(k, &x)| x - f * project_slot(k, x)).collect())
            }
            DiscreteHamiltonian::GodunovPower { beta, scale, .. } => {
                let p = project_k(v);
                let r = norm_sq(&p).sqrt();
                if r == 0.0 || t == 0.0 {
                    return Ok(v.to_vec());
                }
                let s = radial_shrink(r, t * scale * beta, beta);
                let f = 1.0 - s / r;
                Ok(v.iter().zip(&p).map(|(&x, &pk)| x - f * pk).collect())
            }
            _ => Err(Error::Hamiltonian(format!("no proximal map for {}", self.name()))),
        }
    }

    /// Convex conjugate in `q` at fixed density, closed form where known.
    pub fn conjugate(&self, x: [f64; 2], gamma: &[f64], aux: &[f64]) -> Result<Conjugate> {
        if matches!(self, DiscreteHamiltonian::HuggettCrra { .. }) {
            return Err(Error::Hamiltonian("conjugate not used for the CRRA envelopes".into()));
        }
        if !in_cone(gamma) {
            return Ok(Conjugate::Infinite);
        }
        let g2 = norm_sq(gamma);
        let v = match *self {
            DiscreteHamiltonian::GodunovQuadratic => 0.5 * g2,
            DiscreteHamiltonian::GodunovPower { beta, scale, .. } => {
                let bp = beta / (beta - 1.0);
                (1.0 - 1.0 / beta) * g2.sqrt().powf(bp) * (scale * beta).powf(-1.0 / (beta - 1.0))
            }
            _ => g2 / (4.0 * self.density_factor(aux)),
        };
        Ok(Conjugate::Finite(v - self.potential(x)))
    }

    /// Conjugate computed by Newton iterations on `grad H~(q) = gamma` inside `K`.
    pub fn conjugate_numeric(&self, x: [f64; 2], gamma: &[f64], aux: &[f64]) -> Result<Conjugate> {
        if !in_cone(gamma) {
            return Ok(Conjugate::Infinite);
        }
        let s = gamma.len();
        let objective = |q: &[f64]| gamma.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() - self.eval(x, q, aux);
        let mut q: Vec<f64> = gamma.to_vec();
        let c = self.density_factor(aux);
        let mut grad = vec![0.0; s];
        let mut hess = vec![0.0; s * s];
        for _ in 0..200 {
            self.base_grad(x, &q, &mut grad);
            let r: Vec<f64> = (0..s).map(|k| gamma[k] - c * grad[k]).collect();
            if r.iter().all(|v| v.abs() <= 1e-13 * (1.0 + gamma.iter().fold(0.0f64, |m, g| m.max(g.abs())))) {
                break;
            }
            self.base_hessian(x, &q, &mut hess);
            let mut step = vec![0.0; s];
            for k in 0..s {
                let d = c * hess[k * s + k];
                step[k] = if d > 1e-300 { r[k] / d } else { r[k] };
            }
            if let Ok(dir) = solve_small(s, &hess.iter().map(|v| c * v).collect::<Vec<_>>(), &r) {
                step = dir;
            }
            let base = objective(&q);
            let mut lambda = 1.0;
            loop {
                let trial: Vec<f64> =
                    q.iter().zip(&step).enumerate().map(|(k, (a, b))| project_slot(k, a + lambda * b)).collect();
                if objective(&trial) >= base - 1e-15 * base.abs() || lambda < 1e-12 {
                    q = trial;
                    break;
                }
                lambda *= 0.5;
            }
        }
        Ok(Conjugate::Finite(objective(&q)))
    }
}

fn solve_small(n: usize, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let active: Vec<usize> = (0..n).filter(|&k| a[k * n + k].abs() > 1e-300).collect();
    let m = active.len();
    let mut dense = vec![0.0; m * m];
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            dense[r * m + c] = a[i * n + j];
        }
    }
    let rhs: Vec<f64> = active.iter().map(|&i| b[i]).collect();
    let sol = crate::linalg::DenseLu::factor(m, dense)?.solve(&rhs);
    let mut out = b.to_vec();
    for (r, &i) in active.iter().enumerate() {
        out[i] = sol[r];
    }
    Ok(out)
}

/// Root `s in [0, r]` of `s + c s^(beta-1) = r`.
fn radial_shrink(r: f64, c: f64, beta: f64) -> f64 {
    let f = |s: f64| s + c * s.powf(beta - 1.0) - r;
    let (mut lo, mut hi) = (0.0f64, r);
    let mut s = r / (1.0 + c * r.powf(beta - 2.0)).max(1.0);
    for _ in 0..200 {
        let fs = f(s);
        if fs > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let d = 1.0 + c * (beta - 1.0) * s.powf(beta - 2.0);
        let mut next = s - fs / d;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - s).abs() <= 1e-16 * r.max(1e-300) {
            return next;
        }
        s = next;
    }
    s
}

/// Upwind envelopes of the CRRA Hamiltonian `H(p) = s p + k p^(1-1/gamma)`,
/// `s = y + r x`, `k = gamma / (1 - gamma)`.
#[derive(Debug, Clone, Copy)]
pub struct CrraEnvelopes {
    gamma: f64,
    s: f64,
    p_min: f64,
    p_lo: f64,
}

impl CrraEnvelopes {
    pub fn new(gamma: f64, resources: f64) -> Self {
        let s = resources.max(1e-300);
        let p_min = s.powf(-gamma);
        CrraEnvelopes { gamma, s, p_min, p_lo: 1e-3 * p_min }
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    fn raw(&self, p: f64) -> f64 {
        let k = self.gamma / (1.0 - self.gamma);
        self.s * p + k * p.powf(1.0 - 1.0 / self.gamma)
    }

    fn raw_deriv(&self, p: f64) -> f64 {
        self.s - p.powf(-1.0 / self.gamma)
    }

    fn raw_second(&self, p: f64) -> f64 {
        p.powf(-1.0 / self.gamma - 1.0) / self.gamma
    }

    /// `H` with a linear extension below a small positive threshold.
    pub fn value(&self, p: f64) -> f64 {
        if p >= self.p_lo {
            self.raw(p)
        } else {
            self.raw(self.p_lo) + self.raw_deriv(self.p_lo) * (p - self.p_lo)
        }
    }

    pub fn deriv(&self, p: f64) -> f64 {
        self.raw_deriv(p.max(self.p_lo))
    }

    fn second(&self, p: f64) -> f64 {
        if p >= self.p_lo {
            self.raw_second(p)
        } else {
            0.0
        }
    }

    /// `u(y + r x)`, the minimum of `H`.
    pub fn min_value(&self) -> f64 {
        self.s.powf(1.0 - self.gamma) / (1.0 - self.gamma)
    }

    pub fn up(&self, p: f64) -> f64 {
        if p >= self.p_min {
            self.value(p)
        } else {
            self.min_value()
        }
    }

    pub fn down(&self, p: f64) -> f64 {
        if p <= self.p_min {
            self.value(p)
        } else {
            self.min_value()
        }
    }

    pub fn up_deriv(&self, p: f64) -> f64 {
        if p > self.p_min {
            self.deriv(p)
        } else {
            0.0
        }
    }

    pub fn down_deriv(&self, p: f64) -> f64 {
        if p < self.p_min {
            self.deriv(p)
        } else {
            0.0
        }
    }

    fn up_second(&self, p: f64) -> f64 {
        if p > self.p_min {
            self.second(p)
        } else {
            0.0
        }
    }

    fn down_second(&self, p: f64) -> f64 {
        if p < self.p_min {
            self.second(p)
        } else {
            0.0
        }
    }
}

/// Outcome of the structural checks on a sample of points.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyReport {
    pub monotone: bool,
    pub consistent: bool,
    pub differentiable: bool,
    pub convex: bool,
    pub growth: Option<[f64; 4]>,
    pub max_gradient_error: f64,
    pub violations: Vec<String>,
}

impl PropertyReport {
    pub fn all_hold(&self) -> bool {
        self.monotone && self.consistent && self.differentiable && self.convex
    }
}

/// Property checks on arbitrary `(eval, grad)` pairs, so that broken
/// Hamiltonians can be fed in as negative controls.
pub struct PropertyCheck<'a> {
    pub eval: &'a dyn Fn([f64; 2], &[f64]) -> f64,
    pub grad: &'a dyn Fn([f64; 2], &[f64]) -> Vec<f64>,
    pub continuous: Option<&'a dyn Fn([f64; 2], f64) -> f64>,
    pub orientation: f64,
    pub slots: usize,
}

impl PropertyCheck<'_> {
    pub fn run(&self, samples: &[([f64; 2], Vec<f64>)]) -> PropertyReport {
        let mut violations = Vec::new();
        let mut monotone = true;
        let mut consistent = true;
        let mut differentiable = true;
        let mut convex = true;
        let mut max_err = 0.0f64;
        let s = self.slots;
        let delta = 1e-6;
        for (idx, (x, q)) in samples.iter().enumerate() {
            let g = (self.grad)(*x, q);
            let scale = q.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for k in 0..s {
                let sign = if k % 2 == 0 { -1.0 } else { 1.0 } * self.orientation;
                let mut up = q.clone();
                up[k] += 0.1 * scale;
                let step = (self.eval)(*x, &up) - (self.eval)(*x, q);
                if sign * step < -1e-10 * (1.0 + step.abs()) || sign * g[k] < -1e-10 {
                    if monotone {
                        violations.push(format!("monotonicity fails at sample {idx}, slot {k}"));
                    }
                    monotone = false;
                }
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += delta;
                qm[k] -= delta;
                let fd = ((self.eval)(*x, &qp) - (self.eval)(*x, &qm)) / (2.0 * delta);
                let err = (fd - g[k]).abs() / g[k].abs().max(1.0);
                max_err = max_err.max(err);
                if err > 1e-6 {
                    if differentiable {
                        violations.push(format!("gradient mismatch {err:e} at sample {idx}"));
                    }
                    differentiable = false;
                }
            }
            let (xo, qo) = &samples[(idx * 7 + 3) % samples.len()];
            if xo == x {
                let mid: Vec<f64> = q.iter().zip(qo).map(|(a, b)| 0.5 * (a + b)).collect();
                let lhs = (self.eval)(*x, &mid);
                let rhs = 0.5 * ((self.eval)(*x, q) + (self.eval)(*x, qo));
                if lhs > rhs + 1e-10 * (1.0 + rhs.abs()) {
                    if convex {
                        violations.push(format!("midpoint convexity fails at sample {idx}"));
                    }
                    convex = false;
                }
            }
            if let Some(h0) = self.continuous {
                let p = q[0];
                let diag: Vec<f64> = (0..s).map(|_| p).collect();
                let a = (self.eval)(*x, &diag);
                let b = h0(*x, p);
                if (a - b).abs() > 1e-10 * (1.0 + b.abs()) {
                    if consistent {
                        violations.push(format!("consistency fails at sample {idx}: {a} vs {b}"));
                    }
                    consistent = false;
                }
            }
        }
        PropertyReport {
            monotone,
            consistent,
            differentiable,
            convex,
            growth: fit_growth(self, samples),
            max_gradient_error: max_err,
            violations,
        }
    }
}

/// Fits `<g, q> - H >= c1 |g|^2 - c2` and `|g| <= c3 |q| + c4`.
fn fit_growth(check: &PropertyCheck<'_>, samples: &[([f64; 2], Vec<f64>)]) -> Option<[f64; 4]> {
    let data: Vec<(f64, f64, f64)> = samples
        .iter()
        .map(|(x, q)| {
            let g = (check.grad)(*x, q);
            let lhs = g.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() - (check.eval)(*x, q);
            (lhs, norm_sq(&g), norm_sq(q).sqrt())
        })
        .collect();
    let shift = data.iter().map(|d| -d.0).fold(0.0, f64::max);
    let shift = if shift > 0.0 { shift + 1.0 } else { 0.0 };
    let c1 = data.iter().filter(|d| d.1 >= 1.0).map(|d| (d.0 + shift) / d.1).fold(f64::INFINITY, f64::min);
    let c1 = if c1.is_finite() { c1 } else { 1.0 };
    let c2 = data.iter().map(|d| (c1 * d.1 - d.0).max(0.0)).fold(0.0, f64::max);
    let c3 = data.iter().filter(|d| d.2 >= 1.0).map(|d| d.1.sqrt() / d.2).fold(0.0, f64::max);
    let c4 = data.iter().map(|d| (d.1.sqrt() - c3 * d.2).max(0.0)).fold(0.0, f64::max);
    (c1 > 0.0 && c3 > 0.0).then_some([c1, c2, c3, c4])
}

impl DiscreteHamiltonian {
    /// Continuous Hamiltonian `H(x, p)` in one dimension, for consistency checks.
    pub fn continuous_1d(&self, x: [f64; 2], p: f64, aux: &[f64]) -> f64 {
        match *self {
            DiscreteHamiltonian::GodunovQuadratic => 0.5 * p * p,
            DiscreteHamiltonian::GodunovPower { beta, scale, potential } => {
                potential.eval(x) + scale * p.abs().powf(beta)
            }
            DiscreteHamiltonian::Congestion2D { .. } | DiscreteHamiltonian::CongestionPower { .. } => {
                self.density_factor(aux) * p * p
            }
            DiscreteHamiltonian::HuggettCrra { gamma, income, rate } => {
                CrraEnvelopes::new(gamma, income + rate * x[0]).value(p)
            }
        }
    }

    /// Deterministic sample of points suited to this Hamiltonian.
    pub fn sample_points(&self, dim: usize, count: usize, seed: u64) -> Vec<([f64; 2], Vec<f64>)> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let slots = if matches!(self, DiscreteHamiltonian::HuggettCrra { .. }) { 2 } else { 2 * dim };
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let x = [rng.gen::<f64>(), rng.gen::<f64>()];
            let q: Vec<f64> = match *self {
                DiscreteHamiltonian::HuggettCrra { gamma, income, rate } => {
                    let pm = CrraEnvelopes::new(gamma, income + rate * x[0]).p_min();
                    (0..2).map(|_| pm * (0.2 + 3.0 * rng.gen::<f64>())).collect()
                }
                _ => (0..slots).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            };
            let near_kink = q.iter().any(|v| v.abs() < 1e-4);
            if !near_kink {
                out.push((x, q));
            }
        }
        out
    }

    /// Runs the structural checks on `count` sample points at densities `aux`.
    pub fn check_properties(&self, dim: usize, count: usize, aux: &[f64]) -> PropertyReport {
        let aux = aux.to_vec();
        let aux2 = aux.clone();
        let aux3 = aux.clone();
        let eval = move |x: [f64; 2], q: &[f64]| self.eval(x, q, &aux);
        let grad = move |x: [f64; 2], q: &[f64]| self.grad_q(x, q, &aux2);
        let cont = move |x: [f64; 2], p: f64| self.continuous_1d(x, p, &aux3);
        let samples = self.sample_points(dim, count, 17);
        let slots = samples[0].1.len();
        let check_consistency = dim == 1 || matches!(self, DiscreteHamiltonian::HuggettCrra { .. });
        PropertyCheck {
            eval: &eval,
            grad: &grad,
            continuous: if check_consistency { Some(&cont) } else { None },
            orientation: self.orientation(),
            slots,
        }
        .run(&samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const X: [f64; 2] = [0.3, 0.7];

    #[test]
    fn quadratic_values_and_gradient() {
        let h = DiscreteHamiltonian::GodunovQuadratic;
        assert_eq!(h.eval(X, &[-1.0, 1.0], &[]), 1.0);
        assert_eq!(h.eval(X, &[1.0, -1.0], &[]), 0.0);
        assert_eq!(h.grad_q(X, &[-2.0, 0.5], &[]), vec![-2.0, 0.5]);
        assert_eq!(h.grad_q(X, &[2.0, -0.5], &[]), vec![0.0, 0.0]);
    }

    #[test]
    fn quadratic_conjugate_closed_form() {
        let h = DiscreteHamiltonian::GodunovQuadratic;
        assert_eq!(h.conjugate(X, &[-1.0, 2.0], &[]).unwrap(), Conjugate::Finite(2.5));
        assert_eq!(h.conjugate(X, &[1.0, 0.0], &[]).unwrap(), Conjugate::Infinite);
    }

    #[test]
    fn numeric_conjugate_matches_closed_forms() {
        let hs = [
            DiscreteHamiltonian::GodunovQuadratic,
            DiscreteHamiltonian::GodunovPower { beta: 1.5, scale: 1.0, potential: Potential::TrigLandscape },
            DiscreteHamiltonian::GodunovPower { beta: 3.0, scale: 0.7, potential: Potential::Zero },
            DiscreteHamiltonian::CongestionPower { scale: 8.0, exponent: 0.75 },
        ];
        let gammas = [vec![-1.0, 2.0], vec![-0.3, 0.1, -2.0, 0.4], vec![-0.5, 0.0]];
        for h in hs {
            for g in &gammas {
                let a = h.conjugate(X, g, &[0.5]).unwrap().finite().unwrap();
                let b = h.conjugate_numeric(X, g, &[0.5]).unwrap().finite().unwrap();
                assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{h:?} {g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn congestion_matches_explicit_formula() {
        let h = DiscreteHamiltonian::Congestion2D { self_weight: 1.0, other_weight: 5.0 };
        let q = [-1.0, 0.5, 2.0, -3.0];
        let aux = [0.2, 0.1];
        let want = (1.0 + 0.25) / (1.0 + 0.2 + 0.5);
        assert!((h.eval(X, &q, &aux) - want).abs() < 1e-15);
    }

    #[test]
    fn prox_solves_its_optimality_condition() {
        let hs = [
            DiscreteHamiltonian::GodunovQuadratic,
            DiscreteHamiltonian::GodunovPower { beta: 1.5, scale: 1.3, potential: Potential::Zero },
        ];
        for h in hs {
            for v in [vec![-2.0, 1.0], vec![1.0, 3.0], vec![0.5, -0.5]] {
                let b = h.prox(0.7, &v).unwrap();
                let g = h.grad_q(X, &b, &[]);
                for k in 0..2 {
                    assert!((0.7 * g[k] + b[k] - v[k]).abs() < 1e-12, "{h:?} {v:?}");
                }
            }
        }
    }

    #[test]
    fn crra_envelopes_split_at_minimiser() {
        let e = CrraEnvelopes::new(2.0, 0.25);
        assert!((e.p_min() - 16.0).abs() < 1e-12);
        assert!((e.min_value() + 4.0).abs() < 1e-12);
        assert!((e.value(16.0) - e.min_value()).abs() < 1e-12);
        assert_eq!(e.up(10.0), e.min_value());
        assert_eq!(e.down(30.0), e.min_value());
        assert!(e.up_deriv(20.0) > 0.0 && e.down_deriv(10.0) < 0.0);
    }

    #[test]
    fn registered_hamiltonians_pass_property_checks() {
        let hs = [
            (DiscreteHamiltonian::GodunovQuadratic, 1),
            (DiscreteHamiltonian::GodunovQuadratic, 2),
            (DiscreteHamiltonian::GodunovPower { beta: 1.5, scale: 1.0, potential: Potential::TrigLandscape }, 2),
            (DiscreteHamiltonian::Congestion2D { self_weight: 1.0, other_weight: 5.0 }, 2),
            (DiscreteHamiltonian::CongestionPower { scale: 8.0, exponent: 0.75 }, 1),
            (DiscreteHamiltonian::HuggettCrra { gamma: 2.0, income: 0.1, rate: 0.03 }, 1),
        ];
        for (h, d) in hs {
            let r = h.check_properties(d, 300, &[0.3, 0.2]);
            assert!(r.all_hold(), "{h:?}: {:?}", r.violations);
            if !matches!(h, DiscreteHamiltonian::HuggettCrra { .. }) {
                assert!(r.growth.is_some(), "{h:?}");
            }
        }
    }

    #[test]
    fn quadratic_growth_constants() {
        let r = DiscreteHamiltonian::GodunovQuadratic.check_properties(1, 300, &[]);
        let [c1, c2, c3, c4] = r.growth.unwrap();
        assert!((c1 - 0.5).abs() < 1e-12 && c2 < 1e-12);
        assert!(c3 <= 1.0 + 1e-12 && c4 < 1e-12);
    }

    #[test]
    fn flipped_projection_fails_monotonicity() {
        let eval = |_: [f64; 2], q: &[f64]| 0.5 * (q[0].max(0.0).powi(2) + q[1].min(0.0).powi(2));
        let grad = |_: [f64; 2], q: &[f64]| vec![q[0].max(0.0), q[1].min(0.0)];
        let samples = DiscreteHamiltonian::GodunovQuadratic.sample_points(1, 100, 3);
        let r = PropertyCheck { eval: &eval, grad: &grad, continuous: None, orientation: 1.0, slots: 2 }.run(&samples);
        assert!(!r.monotone);
        assert!(r.convex && r.differentiable);
    }
}
