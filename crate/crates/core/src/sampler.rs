//! Learned adaptive DEIM: a fully connected network maps the current state to
//! per-slot logits over grid points. Training relaxes the discrete choice with
//! a (Gumbel-)softmax and back-propagates through the reduced rollout;
//! inference takes column-wise argmaxes.

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::burgers;
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::rom::{run_rom, DeimOperator, GalerkinRom, PointProvider, RomRun, Sampler, StepContext, STENCIL_RADIUS};
use crate::snapshot::SnapshotMatrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub hidden: Vec<usize>,
}

impl SamplerConfig {
    pub fn new(n: usize, m: usize, l: usize) -> Self {
        SamplerConfig {
            n,
            m,
            l,
            hidden: vec![256, 256],
        }
    }

    /// Widths of every layer, input first.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.n + self.m];
        d.extend(&self.hidden);
        d.push(self.n * self.l);
        d
    }
}

/// Weights `W_k` (fan_in × fan_out) and biases `b_k`, stored alternately.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerNet {
    pub config: SamplerConfig,
    pub params: Vec<Tensor>,
}

impl SamplerNet {
    /// Uniform ±sqrt(6/(fan_in+fan_out)) weights and zero biases.
    pub fn new(config: SamplerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.n == 0 || config.m == 0 || config.l == 0 || config.l > config.n {
            return Err(Error::Parameter(format!("invalid sampler sizes {config:?}")));
        }
        let dims = config.layer_dims();
        let mut params = Vec::new();
        for w in dims.windows(2) {
            let (fi, fo) = (w[0], w[1]);
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            let data = (0..fi * fo).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::new(&[fi, fo], data)?);
            params.push(Tensor::zeros(&[fo]));
        }
        Ok(SamplerNet { config, params })
    }

    pub fn from_params(config: SamplerConfig, params: Vec<Tensor>) -> Result<Self> {
        let dims = config.layer_dims();
        if params.len() != 2 * (dims.len() - 1) {
            return shape_err("SamplerNet::from_params", &[2 * (dims.len() - 1)], &[params.len()]);
        }
        for (k, w) in dims.windows(2).enumerate() {
            if params[2 * k].shape() != [w[0], w[1]] || params[2 * k + 1].shape() != [w[1]] {
                return shape_err("SamplerNet::from_params", w, params[2 * k].shape());
            }
        }
        Ok(SamplerNet { config, params })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_final_layer(&mut self) {
        let k = self.params.len();
        for p in &mut self.params[k - 2..] {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Sets the output bias of slot `k` to `−sharpness·(j − p_k)²`, a prior
    /// that centres each slot's logits on a given sampling point.
    pub fn warm_start(&mut self, indices: &[usize], sharpness: f64) -> Result<()> {
        let (n, l) = (self.config.n, self.config.l);
        if indices.len() != l {
            return shape_err("warm_start", &[l], &[indices.len()]);
        }
        let bias = self.params.last_mut().expect("network has layers");
        for j in 0..n {
            for (k, &p) in indices.iter().enumerate() {
                let d = j as f64 - p as f64;
                bias.data_mut()[j * l + k] = -sharpness * d * d;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data().iter().all(|v| v.is_finite()))
    }

    /// Records the parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Logits (n × l) for state `u` and coefficients `a`, both column vectors on the tape.
    pub fn forward_logits(&self, tape: &mut Tape, params: &[Var], u: Var, a: Var) -> Result<Var> {
        if tape.value(u).len() != self.config.n || tape.value(a).len() != self.config.m {
            return shape_err(
                "forward_logits",
                &[self.config.n, self.config.m],
                &[tape.value(u).len(), tape.value(a).len()],
            );
        }
        let mut h = tape.concat(&[u, a]);
        let layers = params.len() / 2;
        for k in 0..layers {
            let z = tape.matmul(h, params[2 * k])?;
            let z = tape.add_row(z, params[2 * k + 1])?;
            h = if k + 1 < layers { tape.relu(z) } else { z };
        }
        tape.reshape(h, &[self.config.n, self.config.l])
    }

    /// Plain evaluation of the logits.
    pub fn logits(&self, u: &[f64], a: &[f64]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let uv = tape.constant(Tensor::column(u));
        let av = tape.constant(Tensor::column(a));
        let z = self.forward_logits(&mut tape, &params, uv, av)?;
        tape.value(z).to_matrix()
    }
}

/// Column-stochastic relaxation of a point selection.
#[derive(Debug, Clone)]
pub struct RelaxedSelection {
    pub pi: Matrix,
    pub tau: f64,
}

/// Standard Gumbel samples `−ln(−ln U)`.
pub fn gumbel_noise(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(&[rows, cols], data).expect("shape matches")
}

/// `softmax((z + g) / τ)` over each column; `g` is Gumbel noise when `rng` is given.
pub fn relax(tape: &mut Tape, logits: Var, tau: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.value(logits).shape().to_vec();
    let z = match rng {
        Some(rng) => {
            let g = tape.constant(gumbel_noise(shape[0], shape[1], rng));
            tape.add(logits, g)?
        }
        None => logits,
    };
    let z = tape.scale(z, 1.0 / tau);
    tape.softmax_cols(z)
}

pub fn relaxed_selection(logits: &Matrix, tau: f64, rng: Option<&mut ChaCha8Rng>) -> Result<RelaxedSelection> {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::from_matrix(logits));
    let pi = relax(&mut tape, z, tau, rng)?;
    Ok(RelaxedSelection {
        pi: tape.value(pi).to_matrix()?,
        tau,
    })
}

/// `ΨᵀΦ (ΠᵀΦ)⁻¹ Πᵀ N` on the tape, with `nonlinear` an n×1 column.
pub fn soft_deim_apply(tape: &mut Tape, pi: Var, phi: Var, psi_t_phi: Var, nonlinear: Var) -> Result<Var> {
    let pit = tape.transpose(pi)?;
    let m = tape.matmul(pit, phi)?;
    let b = tape.matmul(pit, nonlinear)?;
    let c = tape.solve(m, b)?;
    tape.matmul(psi_t_phi, c)
}

/// Reduced Burgers model with its operators recorded as tape constants.
pub struct DiffRom<'a> {
    pub rom: &'a GalerkinRom,
    pub psi: Var,
    pub phi: Var,
    pub psi_t_phi: Var,
    pub lr: Var,
}

impl<'a> DiffRom<'a> {
    pub fn new(tape: &mut Tape, rom: &'a GalerkinRom, phi: &Matrix) -> Result<Self> {
        let psi_t_phi = rom.psi.transpose().matmul(phi)?;
        Ok(DiffRom {
            rom,
            psi: tape.constant(Tensor::from_matrix(&rom.psi)),
            phi: tape.constant(Tensor::from_matrix(phi)),
            psi_t_phi: tape.constant(Tensor::from_matrix(&psi_t_phi)),
            lr: tape.constant(Tensor::from_matrix(&rom.lr)),
        })
    }

    /// Full nonlinear term of `u = Ψa` as an n×1 column.
    pub fn nonlinear(&self, tape: &mut Tape, u: Var) -> Result<Var> {
        let s = burgers::advection_matrix_rc(tape.value(u).data(), &self.rom.grid, None);
        let sq = tape.mul(u, u)?;
        let f = tape.scale(sq, 0.5);
        tape.sparse_matvec(s, f)
    }

    pub fn rhs(&self, tape: &mut Tape, a: Var, pi: Var) -> Result<Var> {
        let u = tape.matmul(self.psi, a)?;
        let nl = self.nonlinear(tape, u)?;
        let y = soft_deim_apply(tape, pi, self.phi, self.psi_t_phi, nl)?;
        let lin = tape.matmul(self.lr, a)?;
        tape.add(lin, y)
    }

    /// One SSP-RK3 step with the selection held fixed across stages.
    pub fn step(&self, tape: &mut Tape, a: Var, pi: Var, dt: f64) -> Result<Var> {
        let k0 = self.rhs(tape, a, pi)?;
        let d0 = tape.scale(k0, dt);
        let a1 = tape.add(a, d0)?;
        let k1 = self.rhs(tape, a1, pi)?;
        let d1 = tape.scale(k1, dt);
        let s1 = tape.add(a1, d1)?;
        let p = tape.scale(a, 0.75);
        let q = tape.scale(s1, 0.25);
        let a2 = tape.add(p, q)?;
        let k2 = self.rhs(tape, a2, pi)?;
        let d2 = tape.scale(k2, dt);
        let s2 = tape.add(a2, d2)?;
        let p = tape.scale(a, 1.0 / 3.0);
        let q = tape.scale(s2, 2.0 / 3.0);
        tape.add(p, q)
    }
}

/// Which state the network sees at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetInput {
    /// Ψa, available online.
    Reconstruction,
    /// The full-order state at the same time.
    Reference,
}

/// Argmax point choice per slot in slot order; a slot whose best point is
/// taken falls back to its best untaken point.
pub fn argmax_points(logits: &Matrix) -> Vec<usize> {
    let (n, l) = (logits.rows(), logits.cols());
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(l);
    for k in 0..l {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            if best.map_or(true, |b| logits[(j, k)] > logits[(b, k)]) {
                best = Some(j);
            }
        }
        let j = best.expect("l <= n leaves an untaken point");
        taken[j] = true;
        out.push(j);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub operator: DeimOperator,
    pub fell_back: bool,
}

/// Discrete point selection for one state, falling back to `fallback` when
/// the selected rows of Φ are singular.
pub fn infer_points(
    net: &SamplerNet,
    u: &[f64],
    a: &[f64],
    rom: &GalerkinRom,
    phi: &Matrix,
    psi_t_phi: &Matrix,
    fallback: &DeimOperator,
) -> Result<Inference> {
    let idx = argmax_points(&net.logits(u, a)?);
    match DeimOperator::with_psi_t_phi(&rom.psi, psi_t_phi, phi, &idx, STENCIL_RADIUS) {
        Ok(operator) => Ok(Inference {
            operator,
            fell_back: false,
        }),
        Err(Error::Singular { .. }) => {
            warn!("selected points {idx:?} give a singular system; using static points");
            Ok(Inference {
                operator: fallback.clone(),
                fell_back: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// [`PointProvider`] backed by a trained network.
pub struct AdaptiveProvider<'a> {
    pub net: &'a SamplerNet,
    pub rom: &'a GalerkinRom,
    pub phi: &'a Matrix,
    pub fallback: &'a DeimOperator,
    pub input: NetInput,
    psi_t_phi: Matrix,
    pub fallbacks: usize,
}

impl<'a> AdaptiveProvider<'a> {
    pub fn new(net: &'a SamplerNet, rom: &'a GalerkinRom, phi: &'a Matrix, fallback: &'a DeimOperator, input: NetInput) -> Result<Self> {
        Ok(AdaptiveProvider {
            net,
            rom,
            phi,
            fallback,
            input,
            psi_t_phi: rom.psi.transpose().matmul(phi)?,
            fallbacks: 0,
        })
    }
}

impl PointProvider for AdaptiveProvider<'_> {
    fn select(&mut self, ctx: &StepContext<'_>) -> Result<DeimOperator> {
        let u = match (self.input, ctx.reference) {
            (NetInput::Reference, Some(r)) => r,
            _ => ctx.reconstruction,
        };
        let inf = infer_points(self.net, u, ctx.coefficients, self.rom, self.phi, &self.psi_t_phi, self.fallback)?;
        if inf.fell_back {
            self.fallbacks += 1;
        }
        Ok(inf.operator)
    }
}

/// Relative margin by which a hard rollout must beat the best so far.
pub const IMPROVEMENT_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub segment: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub gumbel: bool,
    pub input: NetInput,
    /// Sharpness of the output-bias prior around the static DEIM points; 0 disables it.
    pub warm_start: f64,
    pub zero_final_layer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            learning_rate: 1e-3,
            segment: 20,
            tau_start: 1.0,
            tau_end: 0.3,
            gumbel: true,
            input: NetInput::Reconstruction,
            warm_start: 0.25,
            zero_final_layer: false,
        }
    }
}

impl TrainConfig {
    pub fn tau_at(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.epochs.saturating_sub(1).max(1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * frac
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::Parameter("temperatures must stay positive".into()));
        }
        if self.segment == 0 {
            return Err(Error::Parameter("segment length must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the trainer needs about the reduced problem.
pub struct TrainingProblem<'a> {
    pub rom: &'a GalerkinRom,
    pub phi: &'a Matrix,
    pub reference: &'a SnapshotMatrix,
    pub dt: f64,
    pub n_steps: usize,
    pub static_op: &'a DeimOperator,
}

impl TrainingProblem<'_> {
    /// Hard-selection rollout of the network over the full horizon.
    pub fn evaluate(&self, net: &SamplerNet, input: NetInput) -> Result<(RomRun, usize)> {
        let mut provider = AdaptiveProvider::new(net, self.rom, self.phi, self.static_op, input)?;
        let run = run_rom(self.rom, self.reference, self.dt, self.n_steps, Sampler::Adaptive(&mut provider))?;
        Ok((run, provider.fallbacks))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau: f64,
    pub train_loss: f64,
    pub rollout_mse: f64,
    pub best_rollout_mse: f64,
    pub skipped_segments: usize,
    pub ridge_events: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_rollout_mse: f64,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Loss of one rollout segment starting from the projected reference state,
/// recorded on `tape`. Returns the loss variable.
pub fn segment_loss(
    tape: &mut Tape,
    net: &SamplerNet,
    params: &[Var],
    problem: &TrainingProblem<'_>,
    start: usize,
    len: usize,
    tau: f64,
    input: NetInput,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let drom = DiffRom::new(tape, problem.rom, problem.phi)?;
    let a0 = problem.rom.project(problem.reference.column(start))?;
    let mut a = tape.constant(Tensor::column(&a0));
    let mut total: Option<Var> = None;
    for s in start..start + len {
        let u_in = match input {
            NetInput::Reconstruction => tape.matmul(drom.psi, a)?,
            NetInput::Reference => tape.constant(Tensor::column(problem.reference.column(s))),
        };
        let z = net.forward_logits(tape, params, u_in, a)?;
        let pi = relax(tape, z, tau, rng.as_deref_mut())?;
        a = drom.step(tape, a, pi, problem.dt)?;
        let u = tape.matmul(drom.psi, a)?;
        let target = tape.constant(Tensor::column(problem.reference.column(s + 1)));
        let err = tape.mse(u, target)?;
        total = Some(match total {
            Some(t) => tape.add(t, err)?,
            None => err,
        });
    }
    let total = total.ok_or_else(|| Error::Parameter("empty segment".into()))?;
    Ok(tape.scale(total, 1.0 / len as f64))
}

/// Trains `net` in place and leaves it at the best hard-rollout checkpoint
/// (the initial network counts as a checkpoint).
pub fn train(net: &mut SamplerNet, problem: &TrainingProblem<'_>, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    cfg.validate()?;
    if problem.reference.n_cols() < problem.n_steps + 1 {
        return Err(Error::Input("reference shorter than the training horizon".into()));
    }
    if cfg.zero_final_layer {
        net.zero_final_layer();
    }
    if cfg.warm_start > 0.0 {
        net.warm_start(&problem.static_op.indices, cfg.warm_start)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let (init_run, _) = problem.evaluate(net, cfg.input)?;
    let initial = init_run.mean_mse();
    info!("adaptive sampler: initial hard rollout MSE {initial:.6e}");
    let mut best = (initial, None, net.params.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        let tau = cfg.tau_at(epoch);
        let mut loss_sum = 0.0;
        let mut used = 0;
        let mut skipped = 0;
        let mut ridge = 0;
        let mut start = 0;
        while start < problem.n_steps {
            let len = cfg.segment.min(problem.n_steps - start);
            tape.clear();
            let params = net.bind(&mut tape);
            let noise = if cfg.gumbel { Some(&mut rng) } else { None };
            let outcome = segment_loss(&mut tape, net, &params, problem, start, len, tau, cfg.input, noise);
            ridge += tape.ridge_events();
            let loss = match outcome {
                Ok(l) if tape.value(l).item().is_finite() => l,
                Ok(_) | Err(Error::Instability { .. }) => {
                    debug!("epoch {epoch}: skipping non-finite segment at step {start}");
                    skipped += 1;
                    start += len;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = params
                .iter()
                .zip(&net.params)
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            if g.iter().any(|t| t.data().iter().any(|x| !x.is_finite())) {
                skipped += 1;
                start += len;
                continue;
            }
            opt.step(&mut net.params, &g)?;
            loss_sum += tape.value(loss).item();
            used += 1;
            start += len;
        }
        if used == 0 || !net.all_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: f64::NAN,
            });
        }
        let train_loss = loss_sum / used as f64;
        let rollout_mse = match problem.evaluate(net, cfg.input) {
            Ok((run, _)) => run.mean_mse(),
            Err(Error::Instability { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        // Ties up to summation noise keep the earlier checkpoint.
        if rollout_mse < best.0 * (1.0 - IMPROVEMENT_RTOL) {
            best = (rollout_mse, Some(epoch), net.params.clone());
        }
        info!("epoch {epoch}: tau {tau:.3} loss {train_loss:.6e} rollout {rollout_mse:.6e} best {:.6e}", best.0);
        history.push(EpochRecord {
            epoch,
            tau,
            train_loss,
            rollout_mse,
            best_rollout_mse: best.0,
            skipped_segments: skipped,
            ridge_events: ridge,
        });
    }
    net.params = best.2;
    Ok(TrainReport {
        initial_rollout_mse: initial,
        best_epoch: best.1,
        history,
    })
}

/// Convenience for tests and tools: the reduced tendency with a one-hot
/// selection at `indices`, evaluated through the differentiable path.
pub fn soft_rhs_value(rom: &GalerkinRom, phi: &Matrix, pi: &Matrix, a: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let drom = DiffRom::new(&mut tape, rom, phi)?;
    let av = tape.constant(Tensor::column(a));
    let piv = tape.constant(Tensor::from_matrix(pi));
    let r = drom.rhs(&mut tape, av, piv)?;
    Ok(tape.value(r).data().to_vec())
}

pub fn one_hot(n: usize, indices: &[usize]) -> Matrix {
    let mut p = Matrix::zeros(n, indices.len());
    for (k, &i) in indices.iter().enumerate() {
        p[(i, k)] = 1.0;
    }
    p
}
