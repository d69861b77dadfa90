//! Sparse matrices, direct factorizations, BiCGStab and geometric multigrid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// Collects `(row, col, value)` entries; duplicates are summed.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Triplets { nrows, ncols, entries: Vec::new() }
    }

    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.nrows && c < self.ncols);
        self.entries.push((r, c, v));
    }

    pub fn to_csr(mut self) -> CsrMatrix {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..self.nrows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix { nrows: self.nrows, ncols: self.ncols, indptr, indices, values }
    }
}

impl CsrMatrix {
    pub fn identity(n: usize) -> Self {
        CsrMatrix { nrows: n, ncols: n, indptr: (0..=n).collect(), indices: (0..n).collect(), values: vec![1.0; n] }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).filter(|&(j, _)| j == c).map(|(_, v)| v).sum()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            *yr = acc;
        }
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut t = Triplets::new(self.ncols, self.nrows);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                t.push(c, r, v);
            }
        }
        t.to_csr()
    }

    pub fn scaled(&self, s: f64) -> CsrMatrix {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= s);
        m
    }

    pub fn add(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut t = Triplets::new(self.nrows, self.ncols);
        for m in [self, other] {
            for r in 0..m.nrows {
                for (c, v) in m.row(r) {
                    t.push(r, c, v);
                }
            }
        }
        t.to_csr()
    }

    pub fn matmul(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut cols: Vec<usize> = Vec::new();
        for r in 0..self.nrows {
            cols.clear();
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if mark[c] != r {
                        mark[c] = r;
                        acc[c] = 0.0;
                        cols.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            cols.sort_unstable();
            for &c in &cols {
                indices.push(c);
                values.push(acc[c]);
            }
            indptr[r + 1] = indices.len();
        }
        CsrMatrix { nrows: self.nrows, ncols: other.ncols, indptr, indices, values }
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &CsrMatrix) -> CsrMatrix {
        let mut t = Triplets::new(self.nrows * other.nrows, self.ncols * other.ncols);
        for r in 0..self.nrows {
            for (c, a) in self.row(r) {
                for r2 in 0..other.nrows {
                    for (c2, b) in other.row(r2) {
                        t.push(r * other.nrows + r2, c * other.ncols + c2, a * b);
                    }
                }
            }
        }
        t.to_csr()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] += v;
            }
        }
        d
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense LU with partial pivoting.
#[derive(Debug, Clone)]
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl DenseLu {
    pub fn factor(n: usize, mut a: Vec<f64>) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            for r in k + 1..n {
                if a[r * n + k].abs() > a[p * n + k].abs() {
                    p = r;
                }
            }
            if a[p * n + k].abs() <= 1e-14 * scale {
                return Err(Error::Singular(format!("dense pivot {k} of {n} vanishes")));
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = a[k * n + k];
            for r in k + 1..n {
                let l = a[r * n + k] / pivot;
                if l == 0.0 {
                    continue;
                }
                a[r * n + k] = l;
                for c in k + 1..n {
                    a[r * n + c] -= l * a[k * n + c];
                }
            }
        }
        Ok(DenseLu { n, lu: a, perm })
    }

    pub fn from_csr(m: &CsrMatrix) -> Result<Self> {
        assert_eq!(m.nrows, m.ncols);
        let n = m.nrows;
        let mut a = vec![0.0; n * n];
        for r in 0..n {
            for (c, v) in m.row(r) {
                a[r * n + c] += v;
            }
        }
        Self::factor(n, a)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let mut s = x[r];
            for c in 0..r {
                s -= self.lu[r * n + c] * x[c];
            }
            x[r] = s;
        }
        for r in (0..n).rev() {
            let mut s = x[r];
            for c in r + 1..n {
                s -= self.lu[r * n + c] * x[c];
            }
            x[r] = s / self.lu[r * n + r];
        }
        x
    }
}

/// Reverse Cuthill-McKee ordering of the symmetrized pattern.
pub fn rcm_order(m: &CsrMatrix) -> Vec<usize> {
    let n = m.nrows;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..n {
        for (c, _) in m.row(r) {
            if c != r {
                adj[r].push(c);
                adj[c].push(r);
            }
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let seed = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| degree[i]).unwrap();
        let start = peripheral(seed, &adj, &degree);
        let begin = order.len();
        visited[start] = true;
        order.push(start);
        let mut head = begin;
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| degree[w]);
            for w in next {
                visited[w] = true;
                order.push(w);
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(start: usize, adj: &[Vec<usize>]) -> Vec<usize> {
    let mut level = vec![usize::MAX; adj.len()];
    level[start] = 0;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if level[w] == usize::MAX {
                level[w] = level[v] + 1;
                queue.push_back(w);
            }
        }
    }
    level
}

fn peripheral(seed: usize, adj: &[Vec<usize>], degree: &[usize]) -> usize {
    let mut v = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let level = bfs_levels(v, adj);
        let far = level.iter().filter(|&&l| l != usize::MAX).max().copied().unwrap_or(0);
        if far <= ecc && ecc > 0 {
            break;
        }
        ecc = far;
        v = (0..adj.len()).filter(|&i| level[i] == far).min_by_key(|&i| degree[i]).unwrap();
    }
    v
}

/// Sparse LU: bandwidth-reducing permutation followed by banded LU with
/// partial pivoting.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    band: Vec<f64>,
    pivots: Vec<usize>,
    order: Vec<usize>,
}

impl SparseLu {
    pub fn factor(m: &CsrMatrix) -> Result<Self> {
        assert_eq!(m.nrows, m.ncols, "square matrix required");
        let n = m.nrows;
        let order = rcm_order(m);
        let mut pos = vec![0usize; n];
        for (k, &o) in order.iter().enumerate() {
            pos[o] = k;
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        for r in 0..n {
            for (c, _) in m.row(r) {
                let (pr, pc) = (pos[r], pos[c]);
                if pr > pc {
                    kl = kl.max(pr - pc);
                } else {
                    ku = ku.max(pc - pr);
                }
            }
        }
        let width = 2 * kl + ku + 1;
        let mut band = vec![0.0; n * width];
        let mut scale = 0.0f64;
        for r in 0..n {
            for (c, v) in m.row(r) {
                let (pr, pc) = (pos[r], pos[c]);
                band[pr * width + pc + kl - pr] += v;
                scale = scale.max(v.abs());
            }
        }
        let scale = scale.max(f64::MIN_POSITIVE);
        let mut pivots = vec![0usize; n];
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = band[k * width + kl].abs();
            for r in k + 1..=last {
                let v = band[r * width + k + kl - r].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best <= 1e-14 * scale {
                return Err(Error::Singular(format!("sparse pivot {k} of {n} vanishes")));
            }
            pivots[k] = p;
            let cend = (k + kl + ku).min(n - 1);
            if p != k {
                for c in k..=cend {
                    band.swap(k * width + c + kl - k, p * width + c + kl - p);
                }
            }
            let pivot = band[k * width + kl];
            for r in k + 1..=last {
                let idx = r * width + k + kl - r;
                let l = band[idx] / pivot;
                band[idx] = l;
                if l == 0.0 {
                    continue;
                }
                for c in k + 1..=cend {
                    band[r * width + c + kl - r] -= l * band[k * width + c + kl - k];
                }
            }
        }
        Ok(SparseLu { n, kl, ku, width, band, pivots, order })
    }

    pub fn bandwidth(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kl, w) = (self.n, self.kl, self.width);
        let mut x: Vec<f64> = self.order.iter().map(|&o| b[o]).collect();
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                for r in k + 1..=(k + kl).min(n - 1) {
                    x[r] -= self.band[r * w + k + kl - r] * xk;
                }
            }
        }
        let reach = kl + self.ku;
        for r in (0..n).rev() {
            let mut s = x[r];
            for c in r + 1..=(r + reach).min(n - 1) {
                s -= self.band[r * w + c + kl - r] * x[c];
            }
            x[r] = s / self.band[r * w + kl];
        }
        let mut out = vec![0.0; n];
        for (k, &o) in self.order.iter().enumerate() {
            out[o] = x[k];
        }
        out
    }
}

/// Incomplete LU with the sparsity pattern of the matrix.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows;
        let mut lu = a.clone();
        let mut diag = vec![usize::MAX; n];
        for (r, d) in diag.iter_mut().enumerate() {
            for k in lu.indptr[r]..lu.indptr[r + 1] {
                if lu.indices[k] == r {
                    *d = k;
                }
            }
            if *d == usize::MAX {
                return Err(Error::Singular(format!("row {r} has no diagonal entry")));
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            for k in lu.indptr[i]..lu.indptr[i + 1] {
                pos[lu.indices[k]] = k;
            }
            for p in lu.indptr[i]..lu.indptr[i + 1] {
                let k = lu.indices[p];
                if k >= i {
                    continue;
                }
                let pivot = lu.values[diag[k]];
                if pivot == 0.0 {
                    return Err(Error::Singular(format!("zero pivot in ILU at row {k}")));
                }
                lu.values[p] /= pivot;
                let l = lu.values[p];
                for q in diag[k] + 1..lu.indptr[k + 1] {
                    let j = lu.indices[q];
                    if pos[j] != usize::MAX {
                        lu.values[pos[j]] -= l * lu.values[q];
                    }
                }
            }
            for k in lu.indptr[i]..lu.indptr[i + 1] {
                pos[lu.indices[k]] = usize::MAX;
            }
        }
        Ok(Ilu0 { lu, diag })
    }
}

impl Preconditioner for Ilu0 {
    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let n = r.len();
        let a = &self.lu;
        let mut y = r.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in a.indptr[i]..self.diag[i] {
                s -= a.values[k] * y[a.indices[k]];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in self.diag[i] + 1..a.indptr[i + 1] {
                s -= a.values[k] * y[a.indices[k]];
            }
            y[i] = s / a.values[self.diag[i]];
        }
        y
    }
}

/// Solver for one time level: direct below a size threshold, ILU(0)
/// preconditioned BiCGStab above it.
#[derive(Debug, Clone)]
pub enum LevelSolver {
    Direct(SparseLu),
    Iterative { a: CsrMatrix, ilu: Ilu0 },
}

/// Largest system solved directly by [`LevelSolver::new`].
pub const DIRECT_LIMIT: usize = 600;

impl LevelSolver {
    pub fn new(a: CsrMatrix) -> Result<Self> {
        if a.nrows <= DIRECT_LIMIT {
            Ok(LevelSolver::Direct(SparseLu::factor(&a)?))
        } else {
            let ilu = Ilu0::factor(&a)?;
            Ok(LevelSolver::Iterative { a, ilu })
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            LevelSolver::Direct(lu) => Ok(lu.solve(b)),
            LevelSolver::Iterative { a, ilu } => match bicgstab(a, b, None, ilu, 1e-14, 400) {
                Ok(r) => Ok(r.x),
                Err(_) => {
                    let r = bicgstab(a, b, None, ilu, 1e-12, 2000)?;
                    Ok(r.x)
                }
            },
        }
    }
}

pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x)
    }
}

pub trait Preconditioner {
    fn precondition(&self, r: &[f64]) -> Vec<f64>;
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        r.to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct KrylovResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Right-preconditioned BiCGStab. Stops when `|b - A x| <= tol |b|`.
pub fn bicgstab(
    op: &dyn LinearOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    precond: &dyn Preconditioner,
    tol: f64,
    max_iter: usize,
) -> Result<KrylovResult> {
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    if bnorm == 0.0 {
        return Ok(KrylovResult { x: vec![0.0; n], iterations: 0, relative_residual: 0.0 });
    }
    let ax = op.apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut rel = norm2(&r) / bnorm;
    if rel <= tol {
        return Ok(KrylovResult { x, iterations: 0, relative_residual: rel });
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0f64, 1.0f64, 1.0f64);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 {
            return Err(Error::Breakdown("bicgstab (rho)"));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = precond.precondition(&p);
        v = op.apply(&p_hat);
        let denom = dot(&r_hat, &v);
        if denom.abs() < 1e-300 {
            return Err(Error::Breakdown("bicgstab (alpha)"));
        }
        alpha = rho / denom;
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        let s_rel = norm2(&s) / bnorm;
        if s_rel <= tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            return Ok(KrylovResult { x, iterations: it, relative_residual: s_rel });
        }
        let s_hat = precond.precondition(&s);
        let t = op.apply(&s_hat);
        let tt = dot(&t, &t);
        if tt < 1e-300 {
            return Err(Error::Breakdown("bicgstab (omega)"));
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        rel = norm2(&r) / bnorm;
        if rel <= tol {
            return Ok(KrylovResult { x, iterations: it, relative_residual: rel });
        }
        if omega == 0.0 {
            return Err(Error::Breakdown("bicgstab (omega vanished)"));
        }
    }
    Err(Error::NotConverged { solver: "bicgstab", iterations: max_iter, residual: rel })
}

/// Lexicographic forward Gauss-Seidel sweeps on `A x = b`.
pub fn gauss_seidel(a: &CsrMatrix, x: &mut [f64], b: &[f64], sweeps: usize) {
    for _ in 0..sweeps {
        for r in 0..a.nrows {
            let mut s = b[r];
            let mut diag = 0.0;
            for (c, v) in a.row(r) {
                if c == r {
                    diag += v;
                } else {
                    s -= v * x[c];
                }
            }
            x[r] = s / diag;
        }
    }
}

/// Gauss-Seidel sweeps in reverse row order.
pub fn gauss_seidel_backward(a: &CsrMatrix, x: &mut [f64], b: &[f64], sweeps: usize) {
    for _ in 0..sweeps {
        for r in (0..a.nrows).rev() {
            let mut s = b[r];
            let mut diag = 0.0;
            for (c, v) in a.row(r) {
                if c == r {
                    diag += v;
                } else {
                    s -= v * x[c];
                }
            }
            x[r] = s / diag;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseningMode {
    /// Coarsen the space axes only.
    Semi,
    /// Coarsen space and time together.
    Full,
}

/// Shape of a space-time grid of unknowns, indexed `t * space + node`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpaceTimeShape {
    pub nt: usize,
    pub n: usize,
    pub dim: usize,
}

impl SpaceTimeShape {
    pub fn len(&self) -> usize {
        self.nt * self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coarsen(&self, mode: CoarseningMode) -> Option<SpaceTimeShape> {
        if self.n % 2 != 0 || self.n < 4 {
            return None;
        }
        let nt = match mode {
            CoarseningMode::Semi => self.nt,
            CoarseningMode::Full => {
                if self.nt % 2 != 0 || self.nt < 2 {
                    return None;
                }
                self.nt / 2
            }
        };
        Some(SpaceTimeShape { nt, n: self.n / 2, dim: self.dim })
    }
}

/// Full weighting `(R x)_I = (2 x_{2I} + x_{2I+1} + x_{2I-1}) / 4` along one
/// axis; periodic axes wrap, the time axis drops out-of-range entries.
pub fn restriction_1d(n: usize, periodic: bool) -> CsrMatrix {
    let nc = n / 2;
    let mut t = Triplets::new(nc, n);
    for i in 0..nc {
        t.push(i, 2 * i, 0.5);
        if 2 * i + 1 < n {
            t.push(i, 2 * i + 1, 0.25);
        } else if periodic {
            t.push(i, 0, 0.25);
        }
        if i > 0 {
            t.push(i, 2 * i - 1, 0.25);
        } else if periodic {
            t.push(i, n - 1, 0.25);
        }
    }
    t.to_csr()
}

/// Linear interpolation, the scaled transpose `2 R^T` of [`restriction_1d`].
pub fn prolongation_1d(n: usize, periodic: bool) -> CsrMatrix {
    restriction_1d(n, periodic).transpose().scaled(2.0)
}

/// Spatial intergrid transfer used by the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transfer {
    /// Linear interpolation with full weighting.
    Linear,
    /// Four-point cubic interpolation with its scaled transpose.
    #[default]
    Cubic,
}

/// Periodic cubic interpolation: coincident nodes are injected, midpoints get
/// `(-1, 9, 9, -1) / 16` of the surrounding coarse values.
pub fn cubic_prolongation_1d(n: usize) -> CsrMatrix {
    let nc = n / 2;
    let mut t = Triplets::new(n, nc);
    for i in 0..nc {
        t.push(2 * i, i, 1.0);
        let f = 2 * i + 1;
        for (off, w) in [(-1i64, -1.0 / 16.0), (0, 9.0 / 16.0), (1, 9.0 / 16.0), (2, -1.0 / 16.0)] {
            let c = (i as i64 + off).rem_euclid(nc as i64) as usize;
            t.push(f, c, w);
        }
    }
    t.to_csr()
}

/// Restriction and prolongation between two space-time shapes.
pub fn transfer_operators(fine: SpaceTimeShape, mode: CoarseningMode) -> (CsrMatrix, CsrMatrix) {
    transfer_operators_with(fine, mode, Transfer::Linear)
}

pub fn transfer_operators_with(
    fine: SpaceTimeShape,
    mode: CoarseningMode,
    transfer: Transfer,
) -> (CsrMatrix, CsrMatrix) {
    let (time_r, time_p) = match mode {
        CoarseningMode::Semi => (CsrMatrix::identity(fine.nt), CsrMatrix::identity(fine.nt)),
        CoarseningMode::Full => (restriction_1d(fine.nt, false), prolongation_1d(fine.nt, false)),
    };
    let (space_r, space_p) = match transfer {
        Transfer::Linear => (restriction_1d(fine.n, true), prolongation_1d(fine.n, true)),
        Transfer::Cubic => {
            let p = cubic_prolongation_1d(fine.n);
            (p.transpose().scaled(0.5), p)
        }
    };
    let (mut r, mut p) = (time_r, time_p);
    for _ in 0..fine.dim {
        r = r.kron(&space_r);
        p = p.kron(&space_p);
    }
    (r, p)
}

pub fn restrict(fine: SpaceTimeShape, mode: CoarseningMode, v: &[f64]) -> Vec<f64> {
    transfer_operators(fine, mode).0.matvec(v)
}

pub fn prolong(fine: SpaceTimeShape, mode: CoarseningMode, v: &[f64]) -> Vec<f64> {
    transfer_operators(fine, mode).1.matvec(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultigridParams {
    pub mode: CoarseningMode,
    /// Number of coarse levels below the finest.
    pub levels: usize,
    pub eta1: usize,
    pub eta2: usize,
    pub transfer: Transfer,
}

impl Default for MultigridParams {
    fn default() -> Self {
        MultigridParams { mode: CoarseningMode::Semi, levels: 3, eta1: 2, eta2: 2, transfer: Transfer::Cubic }
    }
}

struct MgLevel {
    a: CsrMatrix,
    r: CsrMatrix,
    p: CsrMatrix,
}

/// Galerkin multigrid hierarchy with Gauss-Seidel smoothing and a dense
/// direct solve on the coarsest level.
pub struct Multigrid {
    levels: Vec<MgLevel>,
    coarse_a: CsrMatrix,
    coarse: DenseLu,
    eta1: usize,
    eta2: usize,
}

impl Multigrid {
    pub fn build(a: &CsrMatrix, shape: SpaceTimeShape, params: &MultigridParams) -> Result<Self> {
        if a.nrows != shape.len() {
            return Err(Error::Grid("operator size does not match grid shape".into()));
        }
        let mut levels = Vec::new();
        let mut current = a.clone();
        let mut s = shape;
        for _ in 0..params.levels {
            let Some(next) = s.coarsen(params.mode) else { break };
            let (r, p) = transfer_operators_with(s, params.mode, params.transfer);
            let coarse = r.matmul(&current).matmul(&p);
            levels.push(MgLevel { a: current, r, p });
            current = coarse;
            s = next;
        }
        if current.nrows > 6000 {
            return Err(Error::Grid(format!("coarsest level has {} unknowns; add levels", current.nrows)));
        }
        let coarse = DenseLu::from_csr(&current)?;
        Ok(Multigrid { levels, coarse_a: current, coarse, eta1: params.eta1, eta2: params.eta2 })
    }

    pub fn depth(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn coarsest_size(&self) -> usize {
        self.coarse_a.nrows
    }

    /// Operator on level `k`, `0` being the finest.
    pub fn operator(&self, k: usize) -> &CsrMatrix {
        self.levels.get(k).map_or(&self.coarse_a, |l| &l.a)
    }

    /// Restriction and prolongation between level `k` and `k + 1`.
    pub fn transfers(&self, k: usize) -> Option<(&CsrMatrix, &CsrMatrix)> {
        self.levels.get(k).map(|l| (&l.r, &l.p))
    }

    /// One V-cycle on `A x = b` starting from `x`.
    pub fn v_cycle(&self, x: &mut [f64], b: &[f64]) {
        self.cycle(0, x, b);
    }

    fn cycle(&self, k: usize, x: &mut [f64], b: &[f64]) {
        if k == self.levels.len() {
            x.copy_from_slice(&self.coarse.solve(b));
            return;
        }
        let lvl = &self.levels[k];
        gauss_seidel(&lvl.a, x, b, self.eta1);
        let ax = lvl.a.matvec(x);
        let res: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let rc = lvl.r.matvec(&res);
        let mut ec = vec![0.0; rc.len()];
        self.cycle(k + 1, &mut ec, &rc);
        let e = lvl.p.matvec(&ec);
        for (xi, ei) in x.iter_mut().zip(&e) {
            *xi += ei;
        }
        gauss_seidel_backward(&lvl.a, x, b, self.eta2);
    }
}

impl Preconditioner for Multigrid {
    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; r.len()];
        self.v_cycle(&mut z, r);
        z
    }
}

struct RootTolerance {
    xtol: f64,
}

impl roots::Convergency<f64> for RootTolerance {
    fn is_root_found(&mut self, y: f64) -> bool {
        y == 0.0
    }

    fn is_converged(&mut self, x1: f64, x2: f64) -> bool {
        (x1 - x2).abs() <= self.xtol
    }

    fn is_iteration_limit_reached(&mut self, iter: usize) -> bool {
        iter >= 400
    }
}

/// Brent's method on a sign-changing bracket `[lo, hi]`.
pub fn find_root(what: &'static str, lo: f64, hi: f64, xtol: f64, f: impl FnMut(f64) -> f64) -> Result<f64> {
    roots::find_root_brent(lo, hi, f, &mut RootTolerance { xtol }).map_err(|e| match e {
        roots::SearchError::NoBracketing => Error::Bracket { what, lo, hi },
        _ => Error::NotConverged { solver: what, iterations: 400, residual: f64::NAN },
    })
}
