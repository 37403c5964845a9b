//! Vorticity-streamfunction Navier-Stokes on the periodic square [0, 2π]².
//!
//! Fields are row-major `ny × nx` with `x_i = i·dx` along rows and
//! `y_j = j·dy` down columns.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2_real, ifft2_real, wavenumber, Complex};
use crate::integrate::rollout;
use crate::snapshot::SnapshotMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        for n in [nx, ny] {
            if n < 16 || !n.is_power_of_two() {
                return Err(Error::Parameter(format!("grid sizes must be powers of two >= 16, got {nx}x{ny}")));
            }
        }
        Ok(Grid2D {
            nx,
            ny,
            dx: 2.0 * PI / nx as f64,
            dy: 2.0 * PI / ny as f64,
        })
    }

    pub fn square(n: usize) -> Result<Self> {
        Grid2D::new(n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.ny, self.nx]
    }

    /// Physical coordinates `(x, y)` of a flat index.
    pub fn coords(&self, idx: usize) -> (f64, f64) {
        ((idx % self.nx) as f64 * self.dx, (idx / self.nx) as f64 * self.dy)
    }

    #[inline]
    fn at(&self, f: &[f64], i: usize, j: usize, di: isize, dj: isize) -> f64 {
        let ii = (i as isize + di).rem_euclid(self.nx as isize) as usize;
        let jj = (j as isize + dj).rem_euclid(self.ny as isize) as usize;
        f[jj * self.nx + ii]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub omega: Vec<f64>,
    pub psi: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianVortex {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    /// Decay rate ρ in `A·exp(−ρ r²)`.
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitTag {
    Horizontal,
    Vertical,
    Asymmetric,
    CloseHorizontal,
}

impl InitTag {
    pub const ALL: [InitTag; 4] = [
        InitTag::Horizontal,
        InitTag::Vertical,
        InitTag::Asymmetric,
        InitTag::CloseHorizontal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitTag::Horizontal => "horizontal",
            InitTag::Vertical => "vertical",
            InitTag::Asymmetric => "asymmetric",
            InitTag::CloseHorizontal => "close-horizontal",
        }
    }
}

impl std::str::FromStr for InitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        InitTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown initial condition '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VortexInit {
    pub tag: InitTag,
    pub vortices: Vec<GaussianVortex>,
}

impl VortexInit {
    /// Vortex pair for `tag` with peak amplitude `amplitude` and decay rate `rho`.
    pub fn preset(tag: InitTag, amplitude: f64, rho: f64) -> Self {
        let v = |x: f64, y: f64, a: f64| GaussianVortex {
            x,
            y,
            amplitude: a,
            rho,
        };
        let a = amplitude;
        let vortices = match tag {
            InitTag::Horizontal => vec![v(0.75 * PI, PI, a), v(1.25 * PI, PI, a)],
            InitTag::Vertical => vec![v(PI, 0.75 * PI, a), v(PI, 1.25 * PI, a)],
            InitTag::Asymmetric => vec![v(0.75 * PI, PI, a), v(1.25 * PI, PI, 0.8 * a)],
            InitTag::CloseHorizontal => vec![v(0.875 * PI, PI, a), v(1.125 * PI, PI, a)],
        };
        VortexInit { tag, vortices }
    }

    pub fn validate(&self) -> Result<()> {
        for v in &self.vortices {
            let inside = (0.0..=2.0 * PI).contains(&v.x) && (0.0..=2.0 * PI).contains(&v.y);
            if !inside || !(v.rho > 0.0) || !v.amplitude.is_finite() {
                return Err(Error::Parameter(format!("invalid vortex {v:?}")));
            }
        }
        Ok(())
    }
}

/// Mean-free superposition of the Gaussian vortices, with its streamfunction.
pub fn make_initial(grid: &Grid2D, init: &VortexInit) -> Result<FlowField> {
    init.validate()?;
    let mut omega: Vec<f64> = (0..grid.len())
        .map(|idx| {
            let (x, y) = grid.coords(idx);
            init.vortices
                .iter()
                .map(|v| v.amplitude * (-v.rho * ((x - v.x).powi(2) + (y - v.y).powi(2))).exp())
                .sum()
        })
        .collect();
    let mean = omega.iter().sum::<f64>() / omega.len() as f64;
    omega.iter_mut().for_each(|w| *w -= mean);
    let psi = poisson_solve(&omega, grid)?;
    Ok(FlowField { omega, psi, t: 0.0 })
}

/// Mean magnitude above which a field is rejected by [`poisson_solve`].
pub const MEAN_TOLERANCE: f64 = 1e-8;

/// Spectral solve of `∇²ψ = −ω` with zero-mean ψ.
pub fn poisson_solve(omega: &[f64], grid: &Grid2D) -> Result<Vec<f64>> {
    check_field(omega, grid)?;
    let mean = omega.iter().sum::<f64>() / omega.len() as f64;
    if mean.abs() > MEAN_TOLERANCE {
        return Err(Error::Input(format!("vorticity mean {mean:e} is not zero")));
    }
    let mut spec = fft2_real(omega, grid.nx, grid.ny)?;
    for q in 0..grid.ny {
        let ky = wavenumber(q, grid.ny);
        for p in 0..grid.nx {
            let kx = wavenumber(p, grid.nx);
            let k2 = kx * kx + ky * ky;
            let c = &mut spec[q * grid.nx + p];
            *c = if k2 == 0.0 { Complex::default() } else { c.scale(1.0 / k2) };
        }
    }
    ifft2_real(spec, grid.nx, grid.ny)
}

/// Spectral Laplacian, used to verify the Poisson residual and for convergence studies.
pub fn spectral_laplacian(f: &[f64], grid: &Grid2D) -> Result<Vec<f64>> {
    check_field(f, grid)?;
    let mut spec = fft2_real(f, grid.nx, grid.ny)?;
    for q in 0..grid.ny {
        let ky = wavenumber(q, grid.ny);
        for p in 0..grid.nx {
            let kx = wavenumber(p, grid.nx);
            let c = &mut spec[q * grid.nx + p];
            *c = c.scale(-(kx * kx + ky * ky));
        }
    }
    ifft2_real(spec, grid.nx, grid.ny)
}

fn check_field(f: &[f64], grid: &Grid2D) -> Result<()> {
    if f.len() != grid.len() {
        return Err(Error::Input(format!("field has {} entries, grid has {}", f.len(), grid.len())));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("field contains non-finite values".into()));
    }
    Ok(())
}

/// Arakawa's energy- and enstrophy-conserving Jacobian `J(ω, ψ) = ω_x ψ_y − ω_y ψ_x`.
pub fn arakawa_jacobian(w: &[f64], p: &[f64], grid: &Grid2D) -> Vec<f64> {
    let s = 1.0 / (12.0 * grid.dx * grid.dy);
    let mut out = vec![0.0; grid.len()];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let a = |f: &[f64], di: isize, dj: isize| grid.at(f, i, j, di, dj);
            let j1 = (a(w, 1, 0) - a(w, -1, 0)) * (a(p, 0, 1) - a(p, 0, -1))
                - (a(w, 0, 1) - a(w, 0, -1)) * (a(p, 1, 0) - a(p, -1, 0));
            let j2 = a(w, 1, 0) * (a(p, 1, 1) - a(p, 1, -1)) - a(w, -1, 0) * (a(p, -1, 1) - a(p, -1, -1))
                - a(w, 0, 1) * (a(p, 1, 1) - a(p, -1, 1))
                + a(w, 0, -1) * (a(p, 1, -1) - a(p, -1, -1));
            let j3 = a(w, 1, 1) * (a(p, 0, 1) - a(p, 1, 0)) - a(w, -1, -1) * (a(p, -1, 0) - a(p, 0, -1))
                - a(w, -1, 1) * (a(p, 0, 1) - a(p, -1, 0))
                + a(w, 1, -1) * (a(p, 1, 0) - a(p, 0, -1));
            out[j * grid.nx + i] = (j1 + j2 + j3) * s;
        }
    }
    out
}

/// Plain central-difference Jacobian, kept as a cross-check.
pub fn central_jacobian(w: &[f64], p: &[f64], grid: &Grid2D) -> Vec<f64> {
    let s = 1.0 / (4.0 * grid.dx * grid.dy);
    let mut out = vec![0.0; grid.len()];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let a = |f: &[f64], di: isize, dj: isize| grid.at(f, i, j, di, dj);
            out[j * grid.nx + i] = ((a(w, 1, 0) - a(w, -1, 0)) * (a(p, 0, 1) - a(p, 0, -1))
                - (a(w, 0, 1) - a(w, 0, -1)) * (a(p, 1, 0) - a(p, -1, 0)))
                * s;
        }
    }
    out
}

/// Second-order five-point Laplacian.
pub fn laplacian(f: &[f64], grid: &Grid2D) -> Vec<f64> {
    let (cx, cy) = (1.0 / (grid.dx * grid.dx), 1.0 / (grid.dy * grid.dy));
    let mut out = vec![0.0; grid.len()];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let c = f[j * grid.nx + i];
            out[j * grid.nx + i] = cx * (grid.at(f, i, j, 1, 0) - 2.0 * c + grid.at(f, i, j, -1, 0))
                + cy * (grid.at(f, i, j, 0, 1) - 2.0 * c + grid.at(f, i, j, 0, -1));
        }
    }
    out
}

/// `−J(ω, ψ) + (1/Re) ∇²ω` with ψ from the Poisson solve.
pub fn vortex_rhs(omega: &[f64], grid: &Grid2D, re: f64) -> Result<Vec<f64>> {
    let psi = poisson_solve(omega, grid)?;
    let jac = arakawa_jacobian(omega, &psi, grid);
    let lap = laplacian(omega, grid);
    Ok(jac.iter().zip(&lap).map(|(j, l)| -j + l / re).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VortexConfig {
    pub n: usize,
    pub re: f64,
    pub dt: f64,
    /// Saved snapshots after the initial one.
    pub n_snapshots: usize,
    /// Solver steps between saved snapshots.
    pub save_every: usize,
    pub amplitude: f64,
    pub rho: f64,
}

impl Default for VortexConfig {
    fn default() -> Self {
        VortexConfig {
            n: 128,
            re: 1000.0,
            dt: 0.02,
            n_snapshots: 200,
            save_every: 5,
            amplitude: 1.0,
            rho: PI,
        }
    }
}

impl VortexConfig {
    pub fn grid(&self) -> Result<Grid2D> {
        Grid2D::square(self.n)
    }

    pub fn n_steps(&self) -> usize {
        self.n_snapshots * self.save_every
    }

    pub fn init(&self, tag: InitTag) -> VortexInit {
        VortexInit::preset(tag, self.amplitude, self.rho)
    }

    pub fn validate(&self) -> Result<Grid2D> {
        if !(self.re > 0.0) || !(self.dt > 0.0) || self.save_every == 0 {
            return Err(Error::Parameter(format!("invalid vortex run settings {self:?}")));
        }
        self.grid()
    }
}

/// Courant number `dt·max(|u|/dx + |v|/dy)` of a streamfunction.
pub fn cfl_number(psi: &[f64], grid: &Grid2D, dt: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let u = (grid.at(psi, i, j, 0, 1) - grid.at(psi, i, j, 0, -1)) / (2.0 * grid.dy);
            let v = -(grid.at(psi, i, j, 1, 0) - grid.at(psi, i, j, -1, 0)) / (2.0 * grid.dx);
            worst = worst.max(u.abs() / grid.dx + v.abs() / grid.dy);
        }
    }
    worst * dt
}

/// Saved states of a periodic field integration with the tendency at each.
#[derive(Debug, Clone)]
pub struct FieldTrajectory {
    pub times: Vec<f64>,
    pub omega: SnapshotMatrix,
    pub rhs: SnapshotMatrix,
    /// Step at which the stop predicate fired, if it did.
    pub stopped_at: Option<usize>,
}

/// Integrates `omega0` with SSP-RK3 under an arbitrary tendency. Shared by the
/// solver and the learned model so that both follow the same time stepping.
pub fn integrate_field<F, S>(
    grid: &Grid2D,
    omega0: &[f64],
    dt: f64,
    n_steps: usize,
    save_every: usize,
    rhs: &mut F,
    stop: S,
) -> Result<FieldTrajectory>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    S: Fn(&[f64]) -> bool,
{
    if omega0.len() != grid.len() {
        return Err(Error::Shape {
            op: "integrate_field",
            lhs: grid.dims().to_vec(),
            rhs: vec![omega0.len()],
        });
    }
    let out = rollout(omega0, &grid.dims(), dt, n_steps, save_every, rhs, stop).map_err(|e| match e {
        Error::Input(detail) => Error::Instability { step: 0, detail },
        other => other,
    })?;
    let mut rhs_snaps = SnapshotMatrix::new(&grid.dims());
    for w in out.states.columns() {
        rhs_snaps.push(&rhs(w)?)?;
    }
    Ok(FieldTrajectory {
        times: out.steps.iter().map(|&s| s as f64 * dt).collect(),
        omega: out.states,
        rhs: rhs_snaps,
        stopped_at: out.stopped_at,
    })
}

#[derive(Debug, Clone)]
pub struct VortexRun {
    pub grid: Grid2D,
    pub init: VortexInit,
    pub times: Vec<f64>,
    pub omega: SnapshotMatrix,
    /// Right-hand side at every saved state.
    pub rhs: SnapshotMatrix,
}

pub fn run_vortex(config: &VortexConfig, init: &VortexInit) -> Result<VortexRun> {
    let grid = config.validate()?;
    let field = make_initial(&grid, init)?;
    let cfl = cfl_number(&field.psi, &grid, config.dt);
    if cfl > 1.0 {
        return Err(Error::Parameter(format!("initial Courant number {cfl:.3} exceeds 1")));
    }
    let re = config.re;
    let mut rhs = |w: &[f64]| vortex_rhs(w, &grid, re);
    let traj = integrate_field(&grid, &field.omega, config.dt, config.n_steps(), config.save_every, &mut rhs, |_| false)?;
    Ok(VortexRun {
        grid,
        init: init.clone(),
        times: traj.times,
        omega: traj.omega,
        rhs: traj.rhs,
    })
}

/// `½ Σ ω²`.
pub fn enstrophy(omega: &[f64]) -> f64 {
    0.5 * omega.iter().map(|w| w * w).sum::<f64>()
}

/// `½ Σ ψ ω`, the discrete kinetic energy up to the cell area.
pub fn energy(omega: &[f64], psi: &[f64]) -> f64 {
    0.5 * omega.iter().zip(psi).map(|(w, p)| w * p).sum::<f64>()
}

/// Number of strict 8-neighbour local maxima at or above `fraction · max ω`.
pub fn census(omega: &[f64], grid: &Grid2D, fraction: f64) -> usize {
    let peak = omega.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut count = 0;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let v = omega[j * grid.nx + i];
            if v < fraction * peak {
                continue;
            }
            let strict = (-1..=1)
                .flat_map(|dj| (-1..=1).map(move |di| (di, dj)))
                .filter(|&d| d != (0, 0))
                .all(|(di, dj)| v > grid.at(omega, i, j, di, dj));
            if strict {
                count += 1;
            }
        }
    }
    count
}

/// Binary greyscale image (PGM) of a field, linearly scaled to its range.
/// Row 0 of the image is the top of the domain (largest y).
pub fn to_pgm(field: &[f64], grid: &Grid2D) -> Vec<u8> {
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", grid.nx, grid.ny).into_bytes();
    for j in (0..grid.ny).rev() {
        for i in 0..grid.nx {
            let v = (field[j * grid.nx + i] - lo) / span;
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobian_of_field_with_itself_vanishes() {
        let g = Grid2D::square(16).unwrap();
        let f: Vec<f64> = (0..g.len()).map(|k| ((k * 7919) % 101) as f64 / 101.0).collect();
        assert!(arakawa_jacobian(&f, &f, &g).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sine_mode_is_poisson_eigenfunction() {
        let g = Grid2D::square(32).unwrap();
        let w: Vec<f64> = (0..g.len())
            .map(|k| {
                let (x, y) = g.coords(k);
                x.sin() * y.sin()
            })
            .collect();
        let p = poisson_solve(&w, &g).unwrap();
        for (a, b) in p.iter().zip(&w) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nonzero_mean_rejected() {
        let g = Grid2D::square(16).unwrap();
        assert!(matches!(poisson_solve(&vec![1.0; 256], &g), Err(Error::Input(_))));
    }

    #[test]
    fn bad_grid_rejected() {
        assert!(Grid2D::new(24, 32).is_err());
        assert!(Grid2D::new(8, 8).is_err());
    }
}
