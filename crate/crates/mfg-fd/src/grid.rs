//! Space-time grids, fields and the basic difference operators.
//!
//! Torus grids are node centered (`x_i = i h`, `N_h` distinct nodes per axis).
//! Bounded grids are cell centered (`x_i = (i + 1/2) h`) so that boundary
//! conditions act on faces through ghost values. Two-dimensional nodes are
//! stored row-major with the x index running fastest: `node = j * n + i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Torus,
    Interval,
    Rectangle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dim: usize,
    pub kind: DomainKind,
    pub n: usize,
    pub nt: usize,
    pub horizon: f64,
    pub length: f64,
    pub h: f64,
    pub dt: f64,
}

/// Neighbour of a node along one axis and direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Neighbor {
    Node(usize),
    Outside,
}

impl Grid {
    pub fn torus(dim: usize, n: usize, nt: usize, horizon: f64) -> Result<Self> {
        let kind = DomainKind::Torus;
        Self::new(dim, kind, n, nt, horizon, 1.0)
    }

    pub fn bounded(dim: usize, n: usize, nt: usize, horizon: f64, length: f64) -> Result<Self> {
        let kind = if dim == 1 { DomainKind::Interval } else { DomainKind::Rectangle };
        Self::new(dim, kind, n, nt, horizon, length)
    }

    pub fn new(dim: usize, kind: DomainKind, n: usize, nt: usize, horizon: f64, length: f64) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::Grid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if n < 2 {
            return Err(Error::Grid(format!("need at least 2 nodes per axis, got {n}")));
        }
        if nt < 1 {
            return Err(Error::Grid("need at least one time step".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Grid(format!("horizon must be positive, got {horizon}")));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::Grid(format!("side length must be positive, got {length}")));
        }
        match (dim, kind) {
            (_, DomainKind::Torus) | (1, DomainKind::Interval) | (2, DomainKind::Rectangle) => {}
            _ => return Err(Error::Grid(format!("{kind:?} domain is not {dim}-dimensional"))),
        }
        Ok(Grid { dim, kind, n, nt, horizon, length, h: length / n as f64, dt: horizon / nt as f64 })
    }

    pub fn with_time(&self, nt: usize, horizon: f64) -> Result<Self> {
        Self::new(self.dim, self.kind, self.n, nt, horizon, self.length)
    }

    pub fn is_torus(&self) -> bool {
        self.kind == DomainKind::Torus
    }

    pub fn nodes(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Number of gradient slots per node (two one-sided differences per axis).
    pub fn slots(&self) -> usize {
        2 * self.dim
    }

    /// `h^d`, the quadrature weight of one node.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    pub fn multi(&self, node: usize) -> (usize, usize) {
        (node % self.n, node / self.n)
    }

    pub fn axis_coord(&self, k: usize) -> f64 {
        match self.kind {
            DomainKind::Torus => k as f64 * self.h,
            _ => (k as f64 + 0.5) * self.h,
        }
    }

    pub fn coords(&self, node: usize) -> [f64; 2] {
        let (i, j) = self.multi(node);
        if self.dim == 1 {
            [self.axis_coord(node), 0.0]
        } else {
            [self.axis_coord(i), self.axis_coord(j)]
        }
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    fn axis_index(&self, node: usize, axis: usize) -> usize {
        if axis == 0 {
            node % self.n
        } else {
            node / self.n
        }
    }

    fn stride(&self, axis: usize) -> usize {
        if axis == 0 {
            1
        } else {
            self.n
        }
    }

    /// Neighbour at offset `+1` (`forward = true`) or `-1` along `axis`.
    pub fn neighbor(&self, node: usize, axis: usize, forward: bool) -> Neighbor {
        let k = self.axis_index(node, axis);
        let s = self.stride(axis);
        let n = self.n;
        if forward {
            if k + 1 < n {
                Neighbor::Node(node + s)
            } else if self.is_torus() {
                Neighbor::Node(node + s - n * s)
            } else {
                Neighbor::Outside
            }
        } else if k > 0 {
            Neighbor::Node(node - s)
        } else if self.is_torus() {
            Neighbor::Node(node + n * s - s)
        } else {
            Neighbor::Outside
        }
    }

    pub fn uniform_density(&self) -> Vec<f64> {
        let total = self.length.powi(self.dim as i32);
        vec![1.0 / total; self.nodes()]
    }

    /// `h^d * sum(w)`.
    pub fn integrate(&self, w: &[f64]) -> f64 {
        self.cell_volume() * w.iter().sum::<f64>()
    }
}

/// A node-valued quantity over a run of time levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub levels: usize,
    pub nodes: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(levels: usize, nodes: usize) -> Self {
        Field { levels, nodes, data: vec![0.0; levels * nodes] }
    }

    pub fn from_level(levels: usize, level: &[f64]) -> Self {
        let nodes = level.len();
        let mut data = Vec::with_capacity(levels * nodes);
        for _ in 0..levels {
            data.extend_from_slice(level);
        }
        Field { levels, nodes, data }
    }

    pub fn level(&self, n: usize) -> &[f64] {
        &self.data[n * self.nodes..(n + 1) * self.nodes]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.nodes..(n + 1) * self.nodes]
    }

    pub fn set_level(&mut self, n: usize, values: &[f64]) {
        self.level_mut(n).copy_from_slice(values);
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// What sits behind a boundary face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum BoundaryRole {
    Wall,
    Exit { cost: f64 },
    Entrance { cost: f64, flux: f64 },
}

/// A piece of the boundary: the face `axis = low/high`, restricted in 2D to
/// nodes whose other coordinate lies in `[from, to]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySegment {
    pub axis: usize,
    pub high: bool,
    #[serde(default)]
    pub from: f64,
    #[serde(default = "default_segment_end")]
    pub to: f64,
    #[serde(flatten)]
    pub role: BoundaryRole,
}

fn default_segment_end() -> f64 {
    f64::INFINITY
}

/// Boundary description of one population; faces not covered are walls.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub segments: Vec<BoundarySegment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equation {
    Hjb,
    Kfp,
}

impl BoundarySpec {
    pub fn walls() -> Self {
        BoundarySpec::default()
    }

    pub fn role_at(&self, grid: &Grid, node: usize, axis: usize, high: bool) -> BoundaryRole {
        let c = grid.coords(node);
        let other = if grid.dim == 2 { c[1 - axis] } else { 0.0 };
        self.segments
            .iter()
            .rev()
            .find(|s| {
                s.axis == axis
                    && s.high == high
                    && (grid.dim == 1 || (other >= s.from - 1e-12 && other <= s.to + 1e-12))
            })
            .map(|s| s.role)
            .unwrap_or(BoundaryRole::Wall)
    }

    /// Ghost value behind a face for `eq`, given the value at the inner node.
    pub fn ghost(role: BoundaryRole, eq: Equation, own: f64) -> f64 {
        match (role, eq) {
            (BoundaryRole::Wall, _) => own,
            (BoundaryRole::Exit { cost }, Equation::Hjb) => cost,
            (BoundaryRole::Exit { .. }, Equation::Kfp) => 0.0,
            (BoundaryRole::Entrance { cost, .. }, Equation::Hjb) => cost,
            (BoundaryRole::Entrance { .. }, Equation::Kfp) => own,
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        for s in &self.segments {
            if grid.is_torus() {
                return Err(Error::Grid("boundary segments given on a torus".into()));
            }
            if s.axis >= grid.dim {
                return Err(Error::Grid(format!("segment axis {} out of range", s.axis)));
            }
            if s.from > s.to {
                return Err(Error::Grid("segment range is reversed".into()));
            }
        }
        Ok(())
    }
}

/// Value of `w` at the neighbour of `node`, resolving faces through ghosts.
pub fn neighbor_value(
    grid: &Grid,
    bc: &BoundarySpec,
    eq: Equation,
    w: &[f64],
    node: usize,
    axis: usize,
    forward: bool,
) -> f64 {
    match grid.neighbor(node, axis, forward) {
        Neighbor::Node(j) => w[j],
        Neighbor::Outside => BoundarySpec::ghost(bc.role_at(grid, node, axis, forward), eq, w[node]),
    }
}

/// `(W^{n+1} - W^n) / dt` for a level pair of a field.
pub fn time_diff(field: &Field, n: usize, dt: f64) -> Vec<f64> {
    field.level(n + 1).iter().zip(field.level(n)).map(|(a, b)| (a - b) / dt).collect()
}

/// Discrete Laplacian with walls on every face of a bounded grid.
pub fn laplacian(grid: &Grid, w: &[f64]) -> Vec<f64> {
    laplacian_bc(grid, &BoundarySpec::walls(), Equation::Kfp, w)
}

pub fn laplacian_bc(grid: &Grid, bc: &BoundarySpec, eq: Equation, w: &[f64]) -> Vec<f64> {
    let h2 = grid.h * grid.h;
    (0..grid.nodes())
        .map(|i| {
            let mut acc = 0.0;
            for axis in 0..grid.dim {
                let up = neighbor_value(grid, bc, eq, w, i, axis, true);
                let down = neighbor_value(grid, bc, eq, w, i, axis, false);
                acc += up + down - 2.0 * w[i];
            }
            acc / h2
        })
        .collect()
}

/// One-sided differences at every node: per axis `(D W)_i` then `(D W)_{i-1}`,
/// flattened as `[node * 2d + 2 * axis + {0, 1}]`.
pub fn nabla(grid: &Grid, w: &[f64]) -> Vec<f64> {
    nabla_bc(grid, &BoundarySpec::walls(), Equation::Hjb, w)
}

pub fn nabla_bc(grid: &Grid, bc: &BoundarySpec, eq: Equation, w: &[f64]) -> Vec<f64> {
    let s = grid.slots();
    let mut out = vec![0.0; grid.nodes() * s];
    for i in 0..grid.nodes() {
        gradient_at(grid, bc, eq, w, i, &mut out[i * s..(i + 1) * s]);
    }
    out
}

pub fn gradient_at(grid: &Grid, bc: &BoundarySpec, eq: Equation, w: &[f64], node: usize, out: &mut [f64]) {
    for axis in 0..grid.dim {
        let up = neighbor_value(grid, bc, eq, w, node, axis, true);
        let down = neighbor_value(grid, bc, eq, w, node, axis, false);
        out[2 * axis] = (up - w[node]) / grid.h;
        out[2 * axis + 1] = (w[node] - down) / grid.h;
    }
}
