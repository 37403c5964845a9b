//! POD bases, classical greedy DEIM and the hyper-reduced Galerkin ROM.

use serde::{Deserialize, Serialize};

use crate::burgers::{self, FomRun, Grid1D};
use crate::error::{shape_err, Error, Result};
use crate::integrate::{no_constraint, ssp_rk3_step};
use crate::linalg::{dot, thin_svd, Lu, Matrix};
use crate::snapshot::SnapshotMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    Modes(usize),
    /// Smallest count whose cumulative energy reaches the threshold.
    Energy(f64),
}

/// Orthonormal POD modes of a snapshot matrix. Also used for the basis of
/// nonlinear-term snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PodBasis {
    pub modes: Matrix,
    pub sigma: Vec<f64>,
    pub energy_fractions: Vec<f64>,
}

impl PodBasis {
    pub fn n_modes(&self) -> usize {
        self.modes.cols()
    }
}

/// Singular values below this fraction of the largest count as zero for rank checks.
pub const RANK_RTOL: f64 = 1e-10;

pub fn numerical_rank(sigma: &[f64]) -> usize {
    let smax = sigma.first().copied().unwrap_or(0.0);
    sigma.iter().filter(|&&s| s > smax * RANK_RTOL).count()
}

pub fn build_pod(snapshots: &Matrix, truncation: Truncation) -> Result<PodBasis> {
    if snapshots.rows() == 0 || snapshots.cols() == 0 {
        return Err(Error::Input("empty snapshot matrix".into()));
    }
    let svd = thin_svd(snapshots)?;
    let total: f64 = svd.sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::Rank {
            requested: 1,
            available: 0,
        });
    }
    let mut acc = 0.0;
    let energy_fractions: Vec<f64> = svd
        .sigma
        .iter()
        .map(|s| {
            acc += s * s;
            (acc / total).min(1.0)
        })
        .collect();
    let rank = numerical_rank(&svd.sigma);
    let m = match truncation {
        Truncation::Modes(m) => m,
        Truncation::Energy(th) => {
            if !(th > 0.0 && th <= 1.0) {
                return Err(Error::Parameter(format!("energy threshold must be in (0, 1], got {th}")));
            }
            // Guard against rounding in the last cumulative entry.
            energy_fractions
                .iter()
                .position(|&e| e >= th - 1e-15)
                .map_or(rank, |k| k + 1)
        }
    };
    if m == 0 || m > rank {
        return Err(Error::Rank {
            requested: m,
            available: rank,
        });
    }
    Ok(PodBasis {
        modes: svd.u.leading_columns(m),
        sigma: svd.sigma,
        energy_fractions,
    })
}

/// Index of the largest |v_i|, lowest index on ties.
pub fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_abs = f64::NEG_INFINITY;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    best
}

/// Classical greedy DEIM point selection over the columns of `phi`.
pub fn deim_indices(phi: &Matrix) -> Result<Vec<usize>> {
    let l = phi.cols();
    if l == 0 || l > phi.rows() {
        return shape_err("deim_indices", &phi.shape(), &[phi.rows(), l]);
    }
    let mut p = vec![argmax_abs(&phi.column(0))];
    for k in 1..l {
        let sub = Matrix::from_fn(k, k, |i, j| phi[(p[i], j)]);
        let rhs: Vec<f64> = p.iter().map(|&i| phi[(i, k)]).collect();
        let lu = Lu::factor(&sub).map_err(|_| Error::Singular {
            index: k,
            magnitude: 0.0,
        })?;
        let c = lu.solve_vec(&rhs)?;
        let r: Vec<f64> = (0..phi.rows())
            .map(|i| phi[(i, k)] - (0..k).map(|j| phi[(i, j)] * c[j]).sum::<f64>())
            .collect();
        let next = argmax_abs(&r);
        if p.contains(&next) {
            return Err(Error::Singular {
                index: k,
                magnitude: r[next].abs(),
            });
        }
        p.push(next);
    }
    Ok(p)
}

/// Hyper-reduction operator for a fixed set of sampling points.
#[derive(Debug, Clone)]
pub struct DeimOperator {
    pub indices: Vec<usize>,
    /// `Ψᵀ Φ (PᵀΦ)⁻¹`, m×l.
    pub projector: Matrix,
    /// `PᵀΦ`, kept for diagnostics.
    pub phi_rows: Matrix,
    footprint: Vec<usize>,
    psi_footprint: Matrix,
}

impl DeimOperator {
    /// Builds the operator for given sampling points. `stencil_radius` is the
    /// half-width of the nonlinear stencil, used to size the reconstruction footprint.
    pub fn new(psi: &Matrix, phi: &Matrix, indices: &[usize], stencil_radius: usize) -> Result<Self> {
        let psi_t_phi = psi.transpose().matmul(phi)?;
        DeimOperator::with_psi_t_phi(psi, &psi_t_phi, phi, indices, stencil_radius)
    }

    pub fn with_psi_t_phi(
        psi: &Matrix,
        psi_t_phi: &Matrix,
        phi: &Matrix,
        indices: &[usize],
        stencil_radius: usize,
    ) -> Result<Self> {
        let n = phi.rows();
        if psi.rows() != n {
            return shape_err("DeimOperator::new", &psi.shape(), &phi.shape());
        }
        if indices.len() != phi.cols() {
            return shape_err("DeimOperator::new", &[indices.len()], &phi.shape());
        }
        let mut seen = indices.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != indices.len() || seen.last().is_some_and(|&i| i >= n) {
            return Err(Error::Input(format!("sampling indices must be distinct and below {n}: {indices:?}")));
        }
        let phi_rows = phi.select_rows(indices);
        let lu = Lu::factor(&phi_rows)?;
        // projector = ΨᵀΦ (PᵀΦ)⁻¹, i.e. projectorᵀ = (PᵀΦ)⁻ᵀ (ΨᵀΦ)ᵀ.
        let mut projector = Matrix::zeros(psi_t_phi.rows(), indices.len());
        for r in 0..psi_t_phi.rows() {
            let row = lu.solve_transpose_vec(psi_t_phi.row(r))?;
            for (c, v) in row.into_iter().enumerate() {
                projector[(r, c)] = v;
            }
        }
        let mut footprint: Vec<usize> = indices
            .iter()
            .flat_map(|&p| p.saturating_sub(stencil_radius)..(p + stencil_radius + 1).min(n))
            .collect();
        footprint.sort_unstable();
        footprint.dedup();
        let psi_footprint = psi.select_rows(&footprint);
        Ok(DeimOperator {
            indices: indices.to_vec(),
            projector,
            phi_rows,
            footprint,
            psi_footprint,
        })
    }

    pub fn n_points(&self) -> usize {
        self.indices.len()
    }

    /// Grid points at which the state must be reconstructed.
    pub fn footprint(&self) -> &[usize] {
        &self.footprint
    }

    /// `Φ (PᵀΦ)⁻¹ Pᵀ v`, the DEIM interpolant of a full vector.
    pub fn interpolate(&self, phi: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
        let sampled: Vec<f64> = self.indices.iter().map(|&i| v[i]).collect();
        let c = Lu::factor(&self.phi_rows)?.solve_vec(&sampled)?;
        phi.matvec(&c)
    }
}

/// Counts of nonlinear-term point evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounter {
    /// One batch of `l` evaluations per time step.
    pub per_step_batch: u64,
    /// Every right-hand-side stage.
    pub per_stage: u64,
}

/// Reduced tendency contribution `projector · sampled`; consumes `l` evaluations.
pub fn deim_apply(op: &DeimOperator, sampled: &[f64], counter: &mut EvalCounter) -> Result<Vec<f64>> {
    if sampled.len() != op.n_points() {
        return shape_err("deim_apply", &[op.n_points()], &[sampled.len()]);
    }
    counter.per_stage += op.n_points() as u64;
    op.projector.matvec(sampled)
}

/// Builds a [`DeimOperator`] from nonlinear POD modes with greedy points.
pub fn deim_select(psi: &Matrix, phi: &Matrix) -> Result<DeimOperator> {
    let idx = deim_indices(phi)?;
    DeimOperator::new(psi, phi, &idx, STENCIL_RADIUS)
}

/// Half-width of the Burgers advection stencil.
pub const STENCIL_RADIUS: usize = 2;

/// Galerkin projection of the Burgers model onto POD modes.
#[derive(Debug, Clone)]
pub struct GalerkinRom {
    pub grid: Grid1D,
    pub re: f64,
    pub psi: Matrix,
    /// `(1/Re) Ψᵀ D₂ Ψ`.
    pub lr: Matrix,
}

impl GalerkinRom {
    pub fn new(psi: Matrix, grid: Grid1D, re: f64) -> Result<Self> {
        if psi.rows() != grid.n {
            return shape_err("GalerkinRom::new", &psi.shape(), &[grid.n]);
        }
        let m = psi.cols();
        let mut lpsi = Matrix::zeros(grid.n, m);
        for j in 0..m {
            lpsi.set_column(j, &burgers::linear_term(&psi.column(j), &grid, re));
        }
        let lr = psi.transpose().matmul(&lpsi)?;
        Ok(GalerkinRom { grid, re, psi, lr })
    }

    pub fn n_modes(&self) -> usize {
        self.psi.cols()
    }

    pub fn project(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.psi.tr_matvec(u)
    }

    pub fn reconstruct(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.psi.matvec(a)
    }

    /// `L_r a + Ψᵀ N_f(Ψa)` with the full nonlinear term.
    pub fn rhs_full(&self, a: &[f64]) -> Result<Vec<f64>> {
        let u = self.reconstruct(a)?;
        let nl = self.psi.tr_matvec(&burgers::nonlinear_term(&u, &self.grid)?)?;
        let mut r = self.lr.matvec(a)?;
        for (x, y) in r.iter_mut().zip(nl) {
            *x += y;
        }
        Ok(r)
    }

    /// Nonlinear term sampled at the operator's points, reconstructing the
    /// state only on the stencil footprint.
    pub fn sample_nonlinear(&self, a: &[f64], op: &DeimOperator) -> Result<Vec<f64>> {
        let local = op.psi_footprint.matvec(a)?;
        let fp = &op.footprint;
        let lookup = |j: usize| -> f64 {
            match fp.binary_search(&j) {
                Ok(k) => local[k],
                Err(_) => unreachable!("stencil point {j} outside footprint"),
            }
        };
        Ok(op
            .indices
            .iter()
            .map(|&i| burgers::nonlinear_at(i, &self.grid, lookup))
            .collect())
    }

    pub fn rhs_deim(&self, a: &[f64], op: &DeimOperator, counter: &mut EvalCounter) -> Result<Vec<f64>> {
        let sampled = self.sample_nonlinear(a, op)?;
        let nl = deim_apply(op, &sampled, counter)?;
        let mut r = self.lr.matvec(a)?;
        for (x, y) in r.iter_mut().zip(nl) {
            *x += y;
        }
        Ok(r)
    }
}

/// Reduced model, nonlinear basis and classical DEIM operator built from one
/// full-order run with `m` state modes and `l` nonlinear modes and points.
#[derive(Debug, Clone)]
pub struct DeimSetup {
    pub rom: GalerkinRom,
    pub state_basis: PodBasis,
    pub nonlinear_basis: PodBasis,
    pub static_op: DeimOperator,
}

impl DeimSetup {
    pub fn phi(&self) -> &Matrix {
        &self.nonlinear_basis.modes
    }
}

pub fn build_deim_setup(fom: &FomRun, re: f64, m: usize, l: usize) -> Result<DeimSetup> {
    let state_basis = build_pod(&fom.states.to_matrix(), Truncation::Modes(m))?;
    let nonlinear_basis = build_pod(&fom.nonlinear.to_matrix(), Truncation::Modes(l))?;
    let rom = GalerkinRom::new(state_basis.modes.clone(), fom.grid, re)?;
    let static_op = deim_select(&rom.psi, &nonlinear_basis.modes)?;
    Ok(DeimSetup {
        rom,
        state_basis,
        nonlinear_basis,
        static_op,
    })
}

/// State handed to an adaptive point provider at the start of a step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub step: usize,
    pub coefficients: &'a [f64],
    pub reconstruction: &'a [f64],
    /// Full-order state at the same time, when available.
    pub reference: Option<&'a [f64]>,
}

/// Chooses sampling points once per time step.
pub trait PointProvider {
    fn select(&mut self, ctx: &StepContext<'_>) -> Result<DeimOperator>;
}

pub enum Sampler<'a> {
    Full,
    Static(&'a DeimOperator),
    Adaptive(&'a mut dyn PointProvider),
}

#[derive(Debug, Clone)]
pub struct RomRun {
    pub coefficients: Vec<Vec<f64>>,
    pub reconstruction: SnapshotMatrix,
    /// Mean squared error over all grid points at every saved time, t = 0 included.
    pub mse: Vec<f64>,
    /// Sampling points used during each step (empty for the full model).
    pub indices: Vec<Vec<usize>>,
    pub counter: EvalCounter,
}

impl RomRun {
    pub fn mean_mse(&self) -> f64 {
        self.mse.iter().sum::<f64>() / self.mse.len() as f64
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Integrates the ROM for `n_steps` from `a₀ = Ψᵀ u₀`, where `u₀` is the first
/// reference snapshot; every step is compared against the reference.
pub fn run_rom(rom: &GalerkinRom, reference: &SnapshotMatrix, dt: f64, n_steps: usize, sampler: Sampler<'_>) -> Result<RomRun> {
    if reference.n_rows() != rom.grid.n {
        return shape_err("run_rom", &[reference.n_rows()], &[rom.grid.n]);
    }
    if reference.n_cols() < n_steps + 1 {
        return Err(Error::Input(format!(
            "reference has {} snapshots, {} steps need {}",
            reference.n_cols(),
            n_steps,
            n_steps + 1
        )));
    }
    let mut sampler = sampler;
    let mut a = rom.project(reference.column(0))?;
    let mut counter = EvalCounter::default();
    let mut recon = SnapshotMatrix::new(&[rom.grid.n]);
    let u0 = rom.reconstruct(&a)?;
    let mut mse_series = vec![mse(&u0, reference.column(0))];
    recon.push(&u0)?;
    let mut coefficients = vec![a.clone()];
    let mut indices = Vec::new();
    let mut u_rec = u0;
    for step in 1..=n_steps {
        let next = match &mut sampler {
            Sampler::Full => {
                indices.push(Vec::new());
                ssp_rk3_step(&a, dt, &mut |x: &[f64]| rom.rhs_full(x), &no_constraint)?
            }
            Sampler::Static(op) => {
                indices.push(op.indices.clone());
                counter.per_step_batch += op.n_points() as u64;
                ssp_rk3_step(&a, dt, &mut |x: &[f64]| rom.rhs_deim(x, op, &mut counter), &no_constraint)?
            }
            Sampler::Adaptive(provider) => {
                let ctx = StepContext {
                    step: step - 1,
                    coefficients: &a,
                    reconstruction: &u_rec,
                    reference: Some(reference.column(step - 1)),
                };
                let op = provider.select(&ctx)?;
                indices.push(op.indices.clone());
                counter.per_step_batch += op.n_points() as u64;
                ssp_rk3_step(&a, dt, &mut |x: &[f64]| rom.rhs_deim(x, &op, &mut counter), &no_constraint)?
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instability {
                step,
                detail: "non-finite reduced coefficients".into(),
            });
        }
        a = next;
        u_rec = rom.reconstruct(&a)?;
        mse_series.push(mse(&u_rec, reference.column(step)));
        recon.push(&u_rec)?;
        coefficients.push(a.clone());
    }
    Ok(RomRun {
        coefficients,
        reconstruction: recon,
        mse: mse_series,
        indices,
        counter,
    })
}

/// Maximum deviation of `QᵀQ` from the identity.
pub fn orthonormality_defect(q: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..q.cols() {
        let ci = q.column(i);
        for j in i..q.cols() {
            let d = dot(&ci, &q.column(j)) - if i == j { 1.0 } else { 0.0 };
            worst = worst.max(d.abs());
        }
    }
    worst
}
