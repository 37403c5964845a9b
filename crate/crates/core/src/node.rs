//! Convolutional neural ODE for the vorticity right-hand side.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::snapshot::SnapshotMatrix;
use crate::vortex::{integrate_field, FieldTrajectory, Grid2D};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub width: usize,
    /// 3×3 convolution layers; the first lifts 1 → width, the rest are residual.
    pub conv_layers: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            width: 32,
            conv_layers: 4,
        }
    }
}

/// Scale factors applied around the network: `f(ω) = out · net(ω / in)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_scale: f64,
    pub output_scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            input_scale: 1.0,
            output_scale: 1.0,
        }
    }
}

/// Kernel radius of the hidden convolutions.
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CnnRhs {
    pub config: CnnConfig,
    pub ny: usize,
    pub nx: usize,
    pub norm: Normalization,
    /// Kernels and biases, alternating; the last pair is the 1×1 projection.
    pub params: Vec<Tensor>,
}

impl CnnRhs {
    /// Weights and biases uniform in ±1/sqrt(fan_in).
    pub fn new(config: CnnConfig, grid: &Grid2D, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.width == 0 || config.conv_layers == 0 {
            return Err(Error::Parameter(format!("invalid CNN layout {config:?}")));
        }
        let mut params = Vec::new();
        let c = config.width;
        for (cin, cout, k) in layer_shapes(&config) {
            let bound = 1.0 / ((cin * k * k) as f64).sqrt();
            let w = (0..cout * cin * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::new(&[cout, cin, k, k], w)?);
            let b = (0..cout).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::new(&[cout], b)?);
        }
        debug_assert_eq!(params[params.len() - 2].shape(), [1, c, 1, 1]);
        Ok(CnnRhs {
            config,
            ny: grid.ny,
            nx: grid.nx,
            norm: Normalization::default(),
            params,
        })
    }

    pub fn from_params(config: CnnConfig, ny: usize, nx: usize, norm: Normalization, params: Vec<Tensor>) -> Result<Self> {
        let shapes = layer_shapes(&config);
        if params.len() != 2 * shapes.len() {
            return shape_err("CnnRhs::from_params", &[2 * shapes.len()], &[params.len()]);
        }
        for (k, (cin, cout, ks)) in shapes.into_iter().enumerate() {
            if params[2 * k].shape() != [cout, cin, ks, ks] || params[2 * k + 1].shape() != [cout] {
                return shape_err("CnnRhs::from_params", &[cout, cin, ks, ks], params[2 * k].shape());
            }
        }
        Ok(CnnRhs {
            config,
            ny,
            nx,
            norm,
            params,
        })
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

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data().iter().all(|v| v.is_finite()))
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Tendency of a `[1, ny, nx]` vorticity variable, recorded on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], omega: Var) -> Result<Var> {
        if tape.value(omega).shape() != [1, self.ny, self.nx] {
            return shape_err("cnn_forward", &[1, self.ny, self.nx], tape.value(omega).shape());
        }
        let x = tape.scale(omega, 1.0 / self.norm.input_scale);
        let layers = params.len() / 2;
        let first = tape.conv2d_periodic(x, params[0], params[1])?;
        let mut h = tape.relu(first);
        for k in 1..layers - 1 {
            let z = tape.conv2d_periodic(h, params[2 * k], params[2 * k + 1])?;
            let z = tape.relu(z);
            h = tape.add(h, z)?;
        }
        let out = tape.conv2d_periodic(h, params[2 * layers - 2], params[2 * layers - 1])?;
        Ok(tape.scale(out, self.norm.output_scale))
    }

    pub fn forward(&self, omega: &[f64]) -> Result<Vec<f64>> {
        if omega.len() != self.ny * self.nx {
            return shape_err("cnn_forward", &[self.ny * self.nx], &[omega.len()]);
        }
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(Tensor::new(&[1, self.ny, self.nx], omega.to_vec())?);
        let y = self.forward_tape(&mut tape, &params, x)?;
        Ok(tape.value(y).data().to_vec())
    }
}

fn layer_shapes(config: &CnnConfig) -> Vec<(usize, usize, usize)> {
    let c = config.width;
    let mut shapes = vec![(1, c, KERNEL)];
    shapes.extend((1..config.conv_layers).map(|_| (c, c, KERNEL)));
    shapes.push((c, 1, 1));
    shapes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Match the network output to the stored right-hand side.
    Derivative,
    /// Match one SSP-RK3 step over the snapshot interval to the next snapshot.
    OneStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NodeTrainConfig {
    pub n_train: usize,
    pub learning_rate: f64,
    /// Cosine-annealed target reached at the last epoch; equal to
    /// `learning_rate` for a constant rate.
    pub final_learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    pub standardize: bool,
}

impl Default for NodeTrainConfig {
    fn default() -> Self {
        NodeTrainConfig {
            n_train: 100,
            learning_rate: 1e-3,
            final_learning_rate: 1e-3,
            epochs: 2000,
            batch_size: 10,
            loss_mode: LossMode::Derivative,
            standardize: true,
        }
    }
}

impl NodeTrainConfig {
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.epochs.saturating_sub(1).max(1) as f64;
        let c = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.final_learning_rate + (self.learning_rate - self.final_learning_rate) * c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeEpoch {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeTrainReport {
    pub history: Vec<NodeEpoch>,
    /// Variance of the targets over all training samples and grid points.
    pub target_variance: f64,
    /// Mean squared error over the whole training set after the last epoch.
    pub final_loss: f64,
}

impl NodeTrainReport {
    pub fn relative_loss(&self) -> f64 {
        self.final_loss / self.target_variance
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64
}

/// Training pairs: inputs and targets for the configured loss mode.
fn training_pairs<'a>(omega: &'a SnapshotMatrix, rhs: &'a SnapshotMatrix, cfg: &NodeTrainConfig) -> Result<Vec<(&'a [f64], &'a [f64])>> {
    let needed = match cfg.loss_mode {
        LossMode::Derivative => cfg.n_train,
        LossMode::OneStep => cfg.n_train + 1,
    };
    if cfg.n_train == 0 || omega.n_cols() < needed || rhs.n_cols() < cfg.n_train {
        return Err(Error::Input(format!(
            "training needs {needed} snapshots, {} available",
            omega.n_cols().min(rhs.n_cols())
        )));
    }
    Ok((0..cfg.n_train)
        .map(|k| match cfg.loss_mode {
            LossMode::Derivative => (omega.column(k), rhs.column(k)),
            LossMode::OneStep => (omega.column(k), omega.column(k + 1)),
        })
        .collect())
}

/// Mean squared error of one sample, recorded on `tape`.
fn sample_loss(net: &CnnRhs, tape: &mut Tape, params: &[Var], input: &[f64], target: &[f64], mode: LossMode, dt: f64) -> Result<Var> {
    let shape = [1, net.ny, net.nx];
    let x = tape.constant(Tensor::new(&shape, input.to_vec())?);
    let pred = match mode {
        LossMode::Derivative => net.forward_tape(tape, params, x)?,
        LossMode::OneStep => {
            let k0 = net.forward_tape(tape, params, x)?;
            let d0 = tape.scale(k0, dt);
            let u1 = tape.add(x, d0)?;
            let k1 = net.forward_tape(tape, params, u1)?;
            let d1 = tape.scale(k1, dt);
            let s1 = tape.add(u1, d1)?;
            let p = tape.scale(x, 0.75);
            let q = tape.scale(s1, 0.25);
            let u2 = tape.add(p, q)?;
            let k2 = net.forward_tape(tape, params, u2)?;
            let d2 = tape.scale(k2, dt);
            let s2 = tape.add(u2, d2)?;
            let p = tape.scale(x, 1.0 / 3.0);
            let q = tape.scale(s2, 2.0 / 3.0);
            tape.add(p, q)?
        }
    };
    let t = tape.constant(Tensor::new(&shape, target.to_vec())?);
    tape.mse(pred, t)
}

/// Trains on the first `n_train` snapshots. `snapshot_dt` is the time between
/// stored snapshots, used by the one-step loss.
pub fn train_node(
    net: &mut CnnRhs,
    omega: &SnapshotMatrix,
    rhs: &SnapshotMatrix,
    snapshot_dt: f64,
    cfg: &NodeTrainConfig,
    seed: u64,
) -> Result<NodeTrainReport> {
    if omega.n_rows() != net.ny * net.nx {
        return shape_err("train_node", &[net.ny, net.nx], omega.dims());
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.final_learning_rate > 0.0) {
        return Err(Error::Parameter("batch size and learning rate must be positive".into()));
    }
    let pairs = training_pairs(omega, rhs, cfg)?;
    let all_targets: Vec<f64> = pairs.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let target_variance = variance(&all_targets);
    if cfg.standardize {
        let inputs: Vec<f64> = pairs.iter().flat_map(|(x, _)| x.iter().copied()).collect();
        let rhs_all: Vec<f64> = (0..cfg.n_train).flat_map(|k| rhs.column(k).iter().copied()).collect();
        let (si, so) = (rms(&inputs), rms(&rhs_all));
        if !(si > 0.0 && so > 0.0) {
            return Err(Error::Input("training data has zero scale".into()));
        }
        net.norm = Normalization {
            input_scale: si,
            output_scale: so,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Tensor> = net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            for &k in batch {
                tape.clear();
                let params = net.bind(&mut tape);
                let (x, t) = pairs[k];
                let loss = sample_loss(net, &mut tape, &params, x, t, cfg.loss_mode, snapshot_dt)?;
                let lv = tape.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Divergence { epoch, loss: lv });
                }
                epoch_loss += lv;
                let grads = tape.backward(loss)?;
                for (a, &v) in acc.iter_mut().zip(&params) {
                    if let Some(g) = grads.get(v) {
                        for (p, q) in a.data_mut().iter_mut().zip(g.data()) {
                            *p += q / batch.len() as f64;
                        }
                    }
                }
            }
            opt.step(&mut net.params, &acc)?;
        }
        let loss = epoch_loss / pairs.len() as f64;
        if epoch % 10 == 0 || epoch + 1 == cfg.epochs {
            info!("node epoch {epoch}: loss {loss:.6e} ({:.4} of target variance)", loss / target_variance);
        }
        history.push(NodeEpoch { epoch, loss });
    }
    if !net.all_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            loss: f64::NAN,
        });
    }
    let final_loss = dataset_loss(net, &pairs, cfg.loss_mode, snapshot_dt)?;
    Ok(NodeTrainReport {
        history,
        target_variance,
        final_loss,
    })
}

fn dataset_loss(net: &CnnRhs, pairs: &[(&[f64], &[f64])], mode: LossMode, dt: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let mut total = 0.0;
    for &(x, t) in pairs {
        tape.clear();
        let params: Vec<Var> = net.params.iter().map(|p| tape.constant(p.clone())).collect();
        let l = sample_loss(net, &mut tape, &params, x, t, mode, dt)?;
        total += tape.value(l).item();
    }
    Ok(total / pairs.len() as f64)
}

/// Growth factor of `max|ω|` over its initial value that ends a rollout.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

/// Rolls out `omega0` with the network as the tendency; stops early with a
/// warning if the field blows up.
pub fn rollout_node(net: &CnnRhs, grid: &Grid2D, omega0: &[f64], dt: f64, n_steps: usize, save_every: usize) -> Result<FieldTrajectory> {
    if grid.ny != net.ny || grid.nx != net.nx {
        return shape_err("rollout_node", &[net.ny, net.nx], &[grid.ny, grid.nx]);
    }
    let limit = DIVERGENCE_FACTOR * omega0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut rhs = |w: &[f64]| net.forward(w);
    let traj = integrate_field(grid, omega0, dt, n_steps, save_every, &mut rhs, |w| w.iter().any(|v| !(v.abs() <= limit)))?;
    if let Some(step) = traj.stopped_at {
        warn!("NODE rollout diverged at step {step}; trajectory truncated");
    }
    Ok(traj)
}

/// `‖pred_t − truth_t‖₂` for every stored time.
pub fn l2_error_series(pred: &SnapshotMatrix, truth: &SnapshotMatrix) -> Result<Vec<f64>> {
    if pred.dims() != truth.dims() || pred.n_cols() != truth.n_cols() {
        return shape_err(
            "l2_error_series",
            &[pred.n_rows(), pred.n_cols()],
            &[truth.n_rows(), truth.n_cols()],
        );
    }
    Ok(pred
        .columns()
        .zip(truth.columns())
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect())
}
