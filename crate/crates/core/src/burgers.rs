//! Viscous Burgers full-order model on a uniform 1-D grid with homogeneous
//! Dirichlet boundaries.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::CsrMatrix;
use crate::error::{Error, Result};
use crate::integrate::ssp_rk3_step;
use crate::snapshot::SnapshotMatrix;

/// Uniform grid `x_i = i·dx`, `i = 0..n`, spanning `[0, length]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub n: usize,
    pub length: f64,
    pub dx: f64,
}

impl Grid1D {
    pub fn new(n: usize, length: f64) -> Result<Self> {
        if n < 5 {
            return Err(Error::Parameter(format!("grid needs at least 5 points, got {n}")));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::Parameter(format!("domain length must be positive, got {length}")));
        }
        Ok(Grid1D {
            n,
            length,
            dx: length / (n - 1) as f64,
        })
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BurgersConfig {
    pub re: f64,
    pub n: usize,
    pub length: f64,
    pub t_final: f64,
    pub n_steps: usize,
    /// Disabling advection leaves pure diffusion.
    pub advection: bool,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        BurgersConfig {
            re: 500.0,
            n: 128,
            length: 1.0,
            t_final: 2.0,
            n_steps: 300,
            advection: true,
        }
    }
}

impl BurgersConfig {
    pub fn validate(&self) -> Result<Grid1D> {
        if !(self.re > 0.0) || !self.re.is_finite() {
            return Err(Error::Parameter(format!("Reynolds number must be positive, got {}", self.re)));
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(Error::Parameter(format!("t_final must be positive, got {}", self.t_final)));
        }
        Grid1D::new(self.n, self.length)
    }

    pub fn dt(&self) -> f64 {
        if self.n_steps == 0 {
            0.0
        } else {
            self.t_final / self.n_steps as f64
        }
    }
}

/// Closed-form solution of the viscous Burgers problem with the
/// `u(x, 0) = x / (1 + sqrt(1/t0) exp(Re x²/4))`, `t0 = exp(Re/8)` family.
pub fn analytic_solution(x: f64, t: f64, re: f64) -> f64 {
    let tp = t + 1.0;
    // sqrt(tp/t0)·exp(Re x²/4tp) in log form, since t0 = exp(Re/8) overflows
    // for large Re; an infinite denominator means the solution is zero.
    let log_term = 0.5 * tp.ln() - re / 16.0 + re * x * x / (4.0 * tp);
    let denom = 1.0 + log_term.exp();
    if denom.is_infinite() {
        return 0.0;
    }
    (x / tp) / denom
}

pub fn initial_condition(grid: &Grid1D, re: f64) -> Vec<f64> {
    let mut u: Vec<f64> = grid.points().iter().map(|&x| analytic_solution(x, 0.0, re)).collect();
    apply_dirichlet(&mut u);
    u
}

pub fn apply_dirichlet(u: &mut [f64]) {
    if let Some(first) = u.first_mut() {
        *first = 0.0;
    }
    if let Some(last) = u.last_mut() {
        *last = 0.0;
    }
}

/// Three-point one-sided stencil for `d(u²/2)/dx` at an interior point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub points: [usize; 3],
    pub weights: [f64; 3],
}

/// Second-order upwind stencil at interior point `i`: backward when
/// `upwind_from_left` (u ≥ 0), forward otherwise. Where the preferred stencil
/// would leave the domain the opposite one-sided stencil is used.
pub fn advection_stencil(i: usize, n: usize, upwind_from_left: bool, dx: f64) -> Stencil {
    debug_assert!(i >= 1 && i + 1 < n);
    let backward = if upwind_from_left { i >= 2 } else { i + 2 >= n };
    let s = 1.0 / (2.0 * dx);
    if backward {
        Stencil {
            points: [i - 2, i - 1, i],
            weights: [s, -4.0 * s, 3.0 * s],
        }
    } else {
        Stencil {
            points: [i, i + 1, i + 2],
            weights: [-3.0 * s, 4.0 * s, -s],
        }
    }
}

/// Nonlinear term `−d(u²/2)/dx` at one grid point, reading `u` through `value`.
/// Boundary points return zero.
pub fn nonlinear_at(i: usize, grid: &Grid1D, value: impl Fn(usize) -> f64) -> f64 {
    if i == 0 || i + 1 >= grid.n {
        return 0.0;
    }
    let st = advection_stencil(i, grid.n, value(i) >= 0.0, grid.dx);
    let mut d = 0.0;
    for (&p, &w) in st.points.iter().zip(&st.weights) {
        let v = value(p);
        d += w * 0.5 * v * v;
    }
    -d
}

fn check_finite(u: &[f64], grid: &Grid1D) -> Result<()> {
    if u.len() != grid.n {
        return Err(Error::Input(format!("state has {} entries, grid has {}", u.len(), grid.n)));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("state contains non-finite values".into()));
    }
    Ok(())
}

pub fn nonlinear_term(u: &[f64], grid: &Grid1D) -> Result<Vec<f64>> {
    check_finite(u, grid)?;
    Ok((0..grid.n).map(|i| nonlinear_at(i, grid, |j| u[j])).collect())
}

/// Sparse matrix `S` with `nonlinear_term(u) = S · (u²/2)`, built from the
/// upwind directions of `u`. Rows are restricted to `rows` (all points when `None`).
pub fn advection_matrix(u: &[f64], grid: &Grid1D, rows: Option<&[usize]>) -> CsrMatrix {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..grid.n).collect();
            &all
        }
    };
    let mut row_ptr = vec![0];
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    for &i in rows {
        if i > 0 && i + 1 < grid.n {
            let st = advection_stencil(i, grid.n, u[i] >= 0.0, grid.dx);
            for (&p, &w) in st.points.iter().zip(&st.weights) {
                col_idx.push(p);
                values.push(-w);
            }
        }
        row_ptr.push(col_idx.len());
    }
    CsrMatrix {
        rows: rows.len(),
        cols: grid.n,
        row_ptr,
        col_idx,
        values,
    }
}

pub fn advection_matrix_rc(u: &[f64], grid: &Grid1D, rows: Option<&[usize]>) -> Rc<CsrMatrix> {
    Rc::new(advection_matrix(u, grid, rows))
}

/// Diffusion `(1/Re) d²u/dx²` by central differences, zero at the boundaries.
pub fn linear_term(u: &[f64], grid: &Grid1D, re: f64) -> Vec<f64> {
    let n = u.len();
    let c = 1.0 / (re * grid.dx * grid.dx);
    let mut out = vec![0.0; n];
    for i in 1..n.saturating_sub(1) {
        out[i] = c * (u[i + 1] - 2.0 * u[i] + u[i - 1]);
    }
    out
}

pub fn fom_rhs(u: &[f64], grid: &Grid1D, re: f64) -> Result<Vec<f64>> {
    let mut r = nonlinear_term(u, grid)?;
    for (a, b) in r.iter_mut().zip(linear_term(u, grid, re)) {
        *a += b;
    }
    Ok(r)
}

#[derive(Debug, Clone)]
pub struct FomRun {
    pub grid: Grid1D,
    pub times: Vec<f64>,
    pub states: SnapshotMatrix,
    pub nonlinear: SnapshotMatrix,
    /// Pointwise squared error against [`analytic_solution`], boundaries pinned to zero.
    pub squared_error: SnapshotMatrix,
}

impl FomRun {
    pub fn max_squared_error(&self) -> f64 {
        self.squared_error.as_slice().iter().fold(0.0, |m, &e| m.max(e))
    }
}

pub fn run_fom(config: &BurgersConfig) -> Result<FomRun> {
    let grid = config.validate()?;
    let dt = config.dt();
    let re = config.re;
    let mut u = initial_condition(&grid, re);
    let dims = [grid.n];
    let mut states = SnapshotMatrix::new(&dims);
    let mut nonlinear = SnapshotMatrix::new(&dims);
    let mut squared_error = SnapshotMatrix::new(&dims);
    let mut times = Vec::with_capacity(config.n_steps + 1);
    let advection = config.advection;
    let mut rhs = |v: &[f64]| -> Result<Vec<f64>> {
        if advection {
            fom_rhs(v, &grid, re)
        } else {
            check_finite(v, &grid)?;
            Ok(linear_term(v, &grid, re))
        }
    };
    let record = |u: &[f64], t: f64, states: &mut SnapshotMatrix, nl: &mut SnapshotMatrix, se: &mut SnapshotMatrix| -> Result<()> {
        states.push(u)?;
        nl.push(&nonlinear_term(u, &grid)?)?;
        let mut exact: Vec<f64> = grid.points().iter().map(|&x| analytic_solution(x, t, re)).collect();
        apply_dirichlet(&mut exact);
        let err: Vec<f64> = u.iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).collect();
        se.push(&err)
    };
    record(&u, 0.0, &mut states, &mut nonlinear, &mut squared_error)?;
    times.push(0.0);
    for step in 1..=config.n_steps {
        u = ssp_rk3_step(&u, dt, &mut rhs, &apply_dirichlet).map_err(|e| match e {
            Error::Input(detail) => Error::Instability { step, detail },
            other => other,
        })?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instability {
                step,
                detail: "non-finite state".into(),
            });
        }
        let t = step as f64 * dt;
        record(&u, t, &mut states, &mut nonlinear, &mut squared_error)?;
        times.push(t);
    }
    Ok(FomRun {
        grid,
        times,
        states,
        nonlinear,
        squared_error,
    })
}
