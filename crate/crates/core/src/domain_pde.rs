//! Finite-difference layer for `½u'' = 2u²` on an interval and the linear
//! problems for the killed operator `½Δ − k`.
//!
//! Everything here is deterministic. Grids are uniform with `cells + 1` nodes
//! including both endpoints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficient of the quadratic branching mechanism `ψ(λ) = 2λ²`.
pub const BRANCHING_COEFF: f64 = 2.0;

/// Leading coefficient of the boundary blow-up `u ~ a·s⁻²` (`6a = 4a²`).
pub const BLOW_UP_COEFF: f64 = 1.5;

/// Default number of cells for PDE solves.
pub const DEFAULT_CELLS: usize = 2048;

pub const MIN_DIRICHLET_CELLS: usize = 16;
pub const MIN_LARGE_CELLS: usize = 64;

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_STEPS: usize = 50;
const LINE_SEARCH_HALVINGS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("invalid domain ({left}, {right}): need left < right, both finite")]
    InvalidDomain { left: f64, right: f64 },
    #[error("grid of {cells} cells is below the minimum of {min}")]
    GridTooSmall { cells: usize, min: usize },
    #[error("invalid boundary data: {0}")]
    InvalidBoundaryData(String),
    #[error("Newton iteration failed after {iterations} steps (scaled residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular tridiagonal system at row {row}")]
    Singular { row: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("nonpositive value {value} at node {node}")]
    NonPositive { node: usize, value: f64 },
    #[error("invalid kill field: {0}")]
    InvalidKill(String),
}

/// One of the two endpoints of an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain1D {
    pub left: f64,
    pub right: f64,
}

impl Domain1D {
    pub fn new(left: f64, right: f64) -> Result<Self, PdeError> {
        if !(left.is_finite() && right.is_finite() && left < right) {
            return Err(PdeError::InvalidDomain { left, right });
        }
        Ok(Domain1D { left, right })
    }

    pub fn unit() -> Self {
        Domain1D { left: 0.0, right: 1.0 }
    }

    pub fn length(&self) -> f64 {
        self.right - self.left
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.left + self.right)
    }

    pub fn endpoint(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }

    /// Open-interval membership.
    pub fn contains(&self, x: f64) -> bool {
        x > self.left && x < self.right
    }

    pub fn contains_closed(&self, x: f64) -> bool {
        x >= self.left && x <= self.right
    }

    /// Which endpoint `x` sits on, up to a relative tolerance.
    pub fn side_of(&self, x: f64) -> Option<Side> {
        let tol = 1e-9 * self.length();
        if (x - self.left).abs() <= tol {
            Some(Side::Left)
        } else if (x - self.right).abs() <= tol {
            Some(Side::Right)
        } else {
            None
        }
    }

    pub fn distance_to_boundary(&self, x: f64) -> f64 {
        (x - self.left).min(self.right - x)
    }

    /// `self ⋐ other`: closure of self inside the open interval `other`.
    pub fn compactly_inside(&self, other: &Domain1D) -> bool {
        self.left > other.left && self.right < other.right
    }

    /// Shrink both ends by `delta` (in units of the length).
    pub fn shrink(&self, delta: f64) -> Result<Domain1D, PdeError> {
        let d = delta * self.length();
        Domain1D::new(self.left + d, self.right - d)
    }

    /// Default exhaustion offset `δ_k = 1/(2(k+2))`, relative to the length.
    pub fn exhaustion_delta(k: usize) -> f64 {
        0.5 / (k as f64 + 2.0)
    }

    /// `D_k` of the default exhaustion, `k ≥ 1`.
    pub fn exhaustion_member(&self, k: usize) -> Domain1D {
        self.shrink(Self::exhaustion_delta(k))
            .expect("exhaustion offsets are below one half")
    }

    /// `D_1, …, D_depth`.
    pub fn exhaustion(&self, depth: usize) -> Vec<Domain1D> {
        (1..=depth).map(|k| self.exhaustion_member(k)).collect()
    }
}

/// Uniform grid over a domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub domain: Domain1D,
    pub cells: usize,
}

impl Grid {
    pub fn new(domain: Domain1D, cells: usize) -> Self {
        Grid { domain, cells }
    }

    pub fn h(&self) -> f64 {
        self.domain.length() / self.cells as f64
    }

    pub fn node_count(&self) -> usize {
        self.cells + 1
    }

    pub fn x(&self, j: usize) -> f64 {
        if j == self.cells {
            self.domain.right
        } else {
            self.domain.left + j as f64 * self.h()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.cells).map(|j| self.x(j)).collect()
    }

    /// Node index if `x` lies on a node (relative tolerance 1e-9 of a cell).
    pub fn node_of(&self, x: f64) -> Option<usize> {
        let t = (x - self.domain.left) / self.h();
        let j = t.round();
        if j < 0.0 || j > self.cells as f64 || (t - j).abs() > 1e-9 {
            None
        } else {
            Some(j as usize)
        }
    }

    pub fn nearest_node(&self, x: f64) -> usize {
        let t = ((x - self.domain.left) / self.h()).round();
        t.clamp(0.0, self.cells as f64) as usize
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self.cells == other.cells
            && (self.domain.left - other.domain.left).abs() <= 1e-12 * self.domain.length()
            && (self.domain.right - other.domain.right).abs() <= 1e-12 * self.domain.length()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Finite,
    BlowUp,
}

/// Node values on a [`Grid`]. For `BlowUp` functions the two boundary entries
/// hold `+∞` and are left out of every serialized form.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub boundary_kind: BoundaryKind,
}

#[derive(Serialize, Deserialize)]
struct GridFunctionRecord {
    left: f64,
    right: f64,
    cells: usize,
    boundary_kind: BoundaryKind,
    /// All nodes for finite functions, interior nodes for blow-up ones.
    values: Vec<f64>,
}

impl GridFunction {
    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        GridFunction {
            grid,
            values: grid.nodes().into_iter().map(f).collect(),
            boundary_kind: BoundaryKind::Finite,
        }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self::from_fn(grid, |_| c)
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn interior(&self) -> &[f64] {
        &self.values[1..self.grid.cells]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        let mut out = self.clone();
        for (j, v) in out.values.iter_mut().enumerate() {
            if self.boundary_kind == BoundaryKind::BlowUp && (j == 0 || j == self.grid.cells) {
                continue;
            }
            *v = f(*v);
        }
        out
    }

    pub fn scaled(&self, c: f64) -> GridFunction {
        self.map(|v| c * v)
    }

    /// Linear interpolation. Blow-up functions are capped at the first interior
    /// node value within one cell of the boundary.
    pub fn eval(&self, x: f64) -> f64 {
        let g = &self.grid;
        let t = ((x - g.domain.left) / g.h()).clamp(0.0, g.cells as f64);
        let mut j = (t.floor() as usize).min(g.cells - 1);
        let mut theta = t - j as f64;
        if self.boundary_kind == BoundaryKind::BlowUp {
            if j == 0 {
                j = 1;
                theta = 0.0;
            } else if j == g.cells - 1 {
                theta = 0.0;
            }
        }
        if theta == 0.0 {
            return self.values[j];
        }
        (1.0 - theta) * self.values[j] + theta * self.values[j + 1]
    }

    pub fn max_interior(&self) -> f64 {
        self.interior().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_interior(&self) -> f64 {
        self.interior().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let values = match self.boundary_kind {
            BoundaryKind::Finite => self.values.clone(),
            BoundaryKind::BlowUp => self.interior().to_vec(),
        };
        serde_json::to_value(GridFunctionRecord {
            left: self.grid.domain.left,
            right: self.grid.domain.right,
            cells: self.grid.cells,
            boundary_kind: self.boundary_kind,
            values,
        })
        .expect("grid function record serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, PdeError> {
        let rec: GridFunctionRecord = serde_json::from_value(value.clone())
            .map_err(|e| PdeError::InvalidBoundaryData(e.to_string()))?;
        let grid = Grid::new(Domain1D::new(rec.left, rec.right)?, rec.cells);
        let values = match rec.boundary_kind {
            BoundaryKind::Finite => rec.values,
            BoundaryKind::BlowUp => {
                let mut v = Vec::with_capacity(rec.cells + 1);
                v.push(f64::INFINITY);
                v.extend(rec.values);
                v.push(f64::INFINITY);
                v
            }
        };
        if values.len() != grid.node_count() {
            return Err(PdeError::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(GridFunction { grid, values, boundary_kind: rec.boundary_kind })
    }

    /// `node,x,value` rows. Blow-up boundary nodes are omitted.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,x,value\n");
        for j in 0..=self.grid.cells {
            if !self.values[j].is_finite() {
                continue;
            }
            s.push_str(&format!("{},{},{}\n", j, self.grid.x(j), self.values[j]));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    /// `‖F‖∞ / (1 + ‖2v²‖∞)` at the returned iterate.
    pub residual: f64,
}

/// Thomas algorithm. `lower[i]` couples row `i` to `i-1`, `upper[i]` to `i+1`.
pub(crate) fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>, PdeError> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot.abs() < 1e-300 || !pivot.is_finite() {
        return Err(PdeError::Singular { row: 0 });
    }
    c[0] = upper[0] / pivot;
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * c[i - 1];
        if pivot.abs() < 1e-300 || !pivot.is_finite() {
            return Err(PdeError::Singular { row: i });
        }
        c[i] = if i + 1 < n { upper[i] / pivot } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Residual `½D₂v − 2v²` at nodes `lo+1 ..= hi-1`, plus the scale `‖2v²‖∞`.
fn semilinear_residual(v: &[f64], lo: usize, hi: usize, h: f64) -> (Vec<f64>, f64) {
    let r = 0.5 / (h * h);
    let mut res = Vec::with_capacity(hi - lo - 1);
    let mut scale: f64 = 0.0;
    for j in lo + 1..hi {
        let nl = BRANCHING_COEFF * v[j] * v[j];
        scale = scale.max(nl);
        res.push(r * (v[j - 1] - 2.0 * v[j] + v[j + 1]) - nl);
    }
    (res, scale)
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Damped Newton on nodes strictly between `lo` and `hi`; `v[lo]`, `v[hi]` are
/// the Dirichlet data and `v` holds the initial guess.
fn newton_inner(v: &mut [f64], lo: usize, hi: usize, h: f64) -> Result<SolverDiagnostics, PdeError> {
    let r = 0.5 / (h * h);
    let n = hi - lo - 1;
    if n == 0 {
        return Ok(SolverDiagnostics { iterations: 0, residual: 0.0 });
    }
    let scaled = |v: &[f64]| {
        let (res, scale) = semilinear_residual(v, lo, hi, h);
        (sup_norm(&res) / (1.0 + scale), res)
    };
    let (mut norm, mut res) = scaled(v);
    let mut iterations = 0;
    while norm >= NEWTON_TOL {
        if iterations == NEWTON_MAX_STEPS {
            return Err(PdeError::NonConvergence { iterations, residual: norm });
        }
        iterations += 1;
        let lower = vec![r; n];
        let upper = vec![r; n];
        let diag: Vec<f64> = (0..n)
            .map(|i| -2.0 * r - 2.0 * BRANCHING_COEFF * v[lo + 1 + i])
            .collect();
        let rhs: Vec<f64> = res.iter().map(|x| -x).collect();
        let step = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
        let base: Vec<f64> = v[lo + 1..hi].to_vec();
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..LINE_SEARCH_HALVINGS {
            for i in 0..n {
                v[lo + 1 + i] = base[i] + lambda * step[i];
            }
            let (trial, trial_res) = scaled(v);
            if trial.is_finite() && trial < norm {
                norm = trial;
                res = trial_res;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            // Roundoff floor: the full step no longer reduces the residual.
            v[lo + 1..hi].copy_from_slice(&base);
            let step_size = sup_norm(&step) / (1.0 + sup_norm(&base));
            if step_size < 1e-13 {
                break;
            }
            return Err(PdeError::NonConvergence { iterations, residual: norm });
        }
    }
    Ok(SolverDiagnostics { iterations, residual: norm })
}

fn check_cells(cells: usize, min: usize) -> Result<(), PdeError> {
    if cells < min {
        Err(PdeError::GridTooSmall { cells, min })
    } else {
        Ok(())
    }
}

/// Solve `½v'' = 2v²` with `v = f` on the boundary; returns solver diagnostics.
pub fn solve_dirichlet_with_diagnostics(
    domain: Domain1D,
    f: (f64, f64),
    cells: usize,
) -> Result<(GridFunction, SolverDiagnostics), PdeError> {
    check_cells(cells, MIN_DIRICHLET_CELLS)?;
    let (a, b) = f;
    if !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0) {
        return Err(PdeError::InvalidBoundaryData(format!(
            "boundary values ({a}, {b}) must be finite and nonnegative"
        )));
    }
    let grid = Grid::new(domain, cells);
    // The harmonic interpolant is a supersolution, so Newton descends monotonically.
    let mut values: Vec<f64> = (0..=cells)
        .map(|j| {
            let t = j as f64 / cells as f64;
            (1.0 - t) * a + t * b
        })
        .collect();
    let diag = newton_inner(&mut values, 0, cells, grid.h())?;
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }
    Ok((GridFunction { grid, values, boundary_kind: BoundaryKind::Finite }, diag))
}

pub fn solve_dirichlet_semilinear(
    domain: Domain1D,
    f: (f64, f64),
    cells: usize,
) -> Result<GridFunction, PdeError> {
    solve_dirichlet_with_diagnostics(domain, f, cells).map(|(g, _)| g)
}

/// `u⁽ⁿ⁾`: boundary value `n` at both ends.
pub fn solve_constant_data(domain: Domain1D, n: f64, cells: usize) -> Result<GridFunction, PdeError> {
    solve_dirichlet_semilinear(domain, (n, n), cells)
}

/// Residual of the transformed problem for `w = u^{-1/2}`:
/// `w_j(w_{j+1} − 2w_j + w_{j−1}) − ¾(w_{j+1} − w_{j−1})² + 2h² = 0`,
/// the discretization of `w w'' = 3w'² − 2`.
fn transformed_residual(w: &[f64], lo: usize, hi: usize, h: f64) -> Vec<f64> {
    (lo + 1..hi)
        .map(|j| {
            let c = w[j + 1] - w[j - 1];
            w[j] * (w[j + 1] - 2.0 * w[j] + w[j - 1]) - 0.75 * c * c + 2.0 * h * h
        })
        .collect()
}

/// Large solution. The unknown is `w = u^{-1/2}`, which vanishes linearly at
/// the boundary with slope `√(2/3)`; the closure fixes `w = √(2/3)·s` at the
/// `offset`-th node from each end (offset 0 is the boundary node itself).
pub fn solve_large_solution_with_offset(
    domain: Domain1D,
    cells: usize,
    offset: usize,
) -> Result<(GridFunction, SolverDiagnostics), PdeError> {
    check_cells(cells, MIN_LARGE_CELLS)?;
    if 2 * offset + 2 > cells {
        return Err(PdeError::InvalidBoundaryData(format!("closure offset {offset} out of range")));
    }
    let grid = Grid::new(domain, cells);
    let h = grid.h();
    let slope = (1.0 / BLOW_UP_COEFF).sqrt();
    let mut w: Vec<f64> = (0..=cells)
        .map(|j| slope * domain.distance_to_boundary(grid.x(j)).max(0.0))
        .collect();
    let (lo, hi) = (offset, cells - offset);
    let n = hi - lo - 1;
    let scale = 2.0 * h * h;
    let norm_of = |r: &[f64]| sup_norm(r) / scale;
    let mut res = transformed_residual(&w, lo, hi, h);
    let mut norm = norm_of(&res);
    let mut iterations = 0;
    while norm >= NEWTON_TOL {
        if iterations == NEWTON_MAX_STEPS {
            return Err(PdeError::NonConvergence { iterations, residual: norm });
        }
        iterations += 1;
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            let j = lo + 1 + i;
            let c = w[j + 1] - w[j - 1];
            diag[i] = w[j + 1] - 4.0 * w[j] + w[j - 1];
            lower[i] = w[j] + 1.5 * c;
            upper[i] = w[j] - 1.5 * c;
        }
        let rhs: Vec<f64> = res.iter().map(|x| -x).collect();
        let step = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
        let base: Vec<f64> = w[lo + 1..hi].to_vec();
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..LINE_SEARCH_HALVINGS {
            for i in 0..n {
                w[lo + 1 + i] = base[i] + lambda * step[i];
            }
            let trial_res = transformed_residual(&w, lo, hi, h);
            let trial = norm_of(&trial_res);
            if trial.is_finite() && trial < norm && w[lo + 1..hi].iter().all(|v| *v > 0.0) {
                norm = trial;
                res = trial_res;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            w[lo + 1..hi].copy_from_slice(&base);
            if sup_norm(&step) / (1.0 + sup_norm(&base)) < 1e-13 {
                break;
            }
            return Err(PdeError::NonConvergence { iterations, residual: norm });
        }
    }
    let values = w
        .iter()
        .enumerate()
        .map(|(j, v)| if j == 0 || j == cells { f64::INFINITY } else { 1.0 / (v * v) })
        .collect();
    Ok((GridFunction { grid, values, boundary_kind: BoundaryKind::BlowUp }, SolverDiagnostics { iterations, residual: norm }))
}

pub fn solve_large_solution(domain: Domain1D, cells: usize) -> Result<GridFunction, PdeError> {
    solve_large_solution_with_offset(domain, cells, 0).map(|(g, _)| g)
}

/// Largest relative change between closures at distance `h` and `2h`, over
/// nodes at least `min_distance` from the boundary.
pub fn closure_sensitivity(domain: Domain1D, cells: usize, min_distance: f64) -> Result<f64, PdeError> {
    let (a, _) = solve_large_solution_with_offset(domain, cells, 1)?;
    let (b, _) = solve_large_solution_with_offset(domain, cells, 2)?;
    // Offsets 1 and 2 put the closure at distance h and 2h.
    let mut worst: f64 = 0.0;
    for j in 1..cells {
        if domain.distance_to_boundary(a.grid.x(j)) >= min_distance {
            worst = worst.max((a.values[j] - b.values[j]).abs() / a.values[j]);
        }
    }
    Ok(worst)
}

fn check_kill(kill: &GridFunction, domain: &Domain1D) -> Result<(), PdeError> {
    if !Grid::new(*domain, kill.grid.cells).same_as(&kill.grid) {
        return Err(PdeError::GridMismatch("kill field lives on a different domain".into()));
    }
    for (i, k) in kill.interior().iter().enumerate() {
        if !(k.is_finite() && *k >= 0.0) {
            return Err(PdeError::InvalidKill(format!("value {k} at node {}", i + 1)));
        }
    }
    Ok(())
}

fn killed_operator(kill: &GridFunction) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = kill.grid.h();
    let r = 0.5 / (h * h);
    let n = kill.grid.cells - 1;
    let diag = kill.interior().iter().map(|k| -2.0 * r - k).collect();
    (vec![r; n], diag, vec![r; n])
}

/// `g` with `½g'' − kill·g = −f` in the interior and `g = 0` on the boundary.
pub fn green_apply(domain: Domain1D, kill: &GridFunction, f: &GridFunction) -> Result<GridFunction, PdeError> {
    check_kill(kill, &domain)?;
    if !kill.grid.same_as(&f.grid) {
        return Err(PdeError::GridMismatch("kill and load grids differ".into()));
    }
    let (lower, diag, upper) = killed_operator(kill);
    let rhs: Vec<f64> = f.interior().iter().map(|x| -x).collect();
    let inner = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
    let mut values = Vec::with_capacity(kill.grid.node_count());
    values.push(0.0);
    values.extend(inner);
    values.push(0.0);
    Ok(GridFunction { grid: kill.grid, values, boundary_kind: BoundaryKind::Finite })
}

/// `h` with `½h'' − kill·h = 0`, `h(z) = 1` and `h = 0` at the other end.
pub fn poisson_kernel(domain: Domain1D, kill: &GridFunction, z: Side) -> Result<GridFunction, PdeError> {
    check_kill(kill, &domain)?;
    let (lower, diag, upper) = killed_operator(kill);
    let r = lower[0];
    let n = diag.len();
    let mut rhs = vec![0.0; n];
    match z {
        Side::Left => rhs[0] = -r,
        Side::Right => rhs[n - 1] = -r,
    }
    let inner = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
    let mut values = Vec::with_capacity(n + 2);
    values.push(if z == Side::Left { 1.0 } else { 0.0 });
    values.extend(inner);
    values.push(if z == Side::Right { 1.0 } else { 0.0 });
    Ok(GridFunction { grid: kill.grid, values, boundary_kind: BoundaryKind::Finite })
}

/// Derivative of `log h`: central differences where both neighbours are
/// positive, one-sided at the ends of the positive range. Nodes with `h = 0`
/// (only allowed on the boundary) get `NaN`.
pub fn grad_log(h: &GridFunction) -> Result<GridFunction, PdeError> {
    let m = h.grid.cells;
    for j in 1..m {
        if !(h.values[j] > 0.0) {
            return Err(PdeError::NonPositive { node: j, value: h.values[j] });
        }
    }
    let dx = h.grid.h();
    let valid = |j: usize| h.values[j] > 0.0 && h.values[j].is_finite();
    let logs: Vec<f64> = h.values.iter().map(|v| v.ln()).collect();
    let mut out = vec![f64::NAN; m + 1];
    for j in 0..=m {
        if !valid(j) {
            continue;
        }
        let left_ok = j > 0 && valid(j - 1);
        let right_ok = j < m && valid(j + 1);
        out[j] = match (left_ok, right_ok) {
            (true, true) => (logs[j + 1] - logs[j - 1]) / (2.0 * dx),
            (false, true) => (logs[j + 1] - logs[j]) / dx,
            (true, false) => (logs[j] - logs[j - 1]) / dx,
            (false, false) => 0.0,
        };
    }
    Ok(GridFunction { grid: h.grid, values: out, boundary_kind: BoundaryKind::Finite })
}

/// Interior residual `‖½h'' − kill·h‖∞` of a candidate kernel or Green function
/// with load `f`.
pub fn linear_residual(kill: &GridFunction, h: &GridFunction, f: Option<&GridFunction>) -> f64 {
    let dx = kill.grid.h();
    let r = 0.5 / (dx * dx);
    let mut worst: f64 = 0.0;
    for j in 1..kill.grid.cells {
        let lap = r * (h.values[j - 1] - 2.0 * h.values[j] + h.values[j + 1]);
        let load = f.map_or(0.0, |f| f.values[j]);
        worst = worst.max((lap - kill.values[j] * h.values[j] + load).abs());
    }
    worst
}

/// Residual `‖½v'' − 2v²‖∞` of a grid function against the continuum equation,
/// measured with difference quotients of step `h`.
pub fn semilinear_residual_norm(v: &GridFunction) -> f64 {
    let (res, _) = semilinear_residual(&v.values, 0, v.grid.cells, v.grid.h());
    sup_norm(&res)
}

/// Smallest `m ≥ from` such that `sup_{D_k}(u_{D_m} − u_D) < bound` on the
/// nodes of a `cells`-grid over `D_k`. Searches up to `max_m`.
pub fn large_solution_schedule_index(
    domain: Domain1D,
    k_domain: Domain1D,
    from: usize,
    bound: f64,
    cells: usize,
    max_m: usize,
) -> Result<Option<usize>, PdeError> {
    let u = solve_large_solution(domain, cells)?;
    let probe = Grid::new(k_domain, 64);
    let excess = |m: usize| -> Result<f64, PdeError> {
        let dm = domain.exhaustion_member(m);
        if !k_domain.compactly_inside(&dm) {
            return Ok(f64::INFINITY);
        }
        let um = solve_large_solution(dm, cells)?;
        Ok(probe
            .nodes()
            .into_iter()
            .map(|x| um.eval(x) - u.eval(x))
            .fold(f64::NEG_INFINITY, f64::max))
    };
    // Excess decreases in m; double, then bisect.
    let mut hi = from.max(1);
    while excess(hi)? >= bound {
        if hi >= max_m {
            return Ok(None);
        }
        hi = (hi * 2).min(max_m);
    }
    let mut lo = from.max(1);
    if excess(lo)? < bound {
        return Ok(Some(lo));
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if excess(mid)? < bound {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Domain1D {
        Domain1D::unit()
    }

    #[test]
    fn zero_data_gives_zero() {
        let v = solve_dirichlet_semilinear(unit(), (0.0, 0.0), 64).unwrap();
        assert!(v.values.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn u1_center_value() {
        let v = solve_constant_data(unit(), 1.0, 2048).unwrap();
        assert!((v.eval(0.5) - 0.712256).abs() < 2e-5, "{}", v.eval(0.5));
        let v5 = solve_constant_data(unit(), 5.0, 2048).unwrap();
        assert!((v5.eval(0.5) - 2.005042).abs() < 5e-5, "{}", v5.eval(0.5));
    }

    #[test]
    fn large_solution_center_value() {
        let u = solve_large_solution(unit(), 2048).unwrap();
        assert!((u.eval(0.5) - 8.8475).abs() < 2e-3, "{}", u.eval(0.5));
    }

    #[test]
    fn too_small_grids_rejected() {
        assert!(matches!(
            solve_dirichlet_semilinear(unit(), (1.0, 1.0), 8),
            Err(PdeError::GridTooSmall { .. })
        ));
        assert!(matches!(solve_large_solution(unit(), 32), Err(PdeError::GridTooSmall { .. })));
    }

    #[test]
    fn negative_data_rejected() {
        assert!(solve_dirichlet_semilinear(unit(), (-1.0, 1.0), 32).is_err());
    }

    #[test]
    fn green_of_one_is_parabola() {
        let g = Grid::new(unit(), 64);
        let out = green_apply(unit(), &GridFunction::zeros(g), &GridFunction::constant(g, 1.0)).unwrap();
        for (j, x) in g.nodes().into_iter().enumerate() {
            assert!((out.values[j] - x * (1.0 - x)).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_kernel_free_is_linear() {
        let g = Grid::new(unit(), 64);
        let k = poisson_kernel(unit(), &GridFunction::zeros(g), Side::Right).unwrap();
        for (j, x) in g.nodes().into_iter().enumerate() {
            assert!((k.values[j] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_log_of_identity() {
        let g = Grid::new(unit(), 256);
        let h = GridFunction::from_fn(g, |x| x);
        let d = grad_log(&h).unwrap();
        assert!(d.values[0].is_nan());
        for j in 8..256 {
            let x = g.x(j);
            assert!((d.values[j] - 1.0 / x).abs() < 0.01 / x, "node {j}");
        }
    }

    #[test]
    fn grad_log_rejects_nonpositive() {
        let g = Grid::new(unit(), 16);
        let mut h = GridFunction::constant(g, 1.0);
        h.values[5] = 0.0;
        assert!(matches!(grad_log(&h), Err(PdeError::NonPositive { node: 5, .. })));
    }

    #[test]
    fn blow_up_json_round_trip_drops_boundary() {
        let u = solve_large_solution(unit(), 64).unwrap();
        let js = u.to_json();
        assert_eq!(js["values"].as_array().unwrap().len(), 63);
        let back = GridFunction::from_json(&js).unwrap();
        assert_eq!(back.interior(), u.interior());
        assert!(back.values[0].is_infinite());
    }

    #[test]
    fn exhaustion_is_nested() {
        let d = unit().exhaustion(6);
        for w in d.windows(2) {
            assert!(w[0].compactly_inside(&w[1]));
        }
        assert!((d[0].left - 1.0 / 6.0).abs() < 1e-15);
    }
}
