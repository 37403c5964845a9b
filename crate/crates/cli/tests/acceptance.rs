//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when a gated criterion fails.
//!
//! `cargo test -p deimlab-cli --test acceptance -- 3 7` runs only criteria 3 and 7.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::OnceLock;
use std::time::Instant;

use deimlab::autodiff::{grad_check, Tape, Tensor, Var};
use deimlab::burgers::{advection_matrix_rc, nonlinear_term, run_fom, BurgersConfig, FomRun, Grid1D};
use deimlab::linalg::Matrix;
use deimlab::node::{CnnRhs, NodeTrainReport};
use deimlab::rom::{build_deim_setup, deim_apply, deim_indices, run_rom, DeimOperator, DeimSetup, EvalCounter, Sampler, STENCIL_RADIUS};
use deimlab::sampler::{argmax_points, relax, relaxed_selection, segment_loss, soft_deim_apply, NetInput, SamplerConfig, SamplerNet, TrainingProblem};
use deimlab::vortex::*;
use deimlab::windowed::{revisit_count, trajectories, window_count, window_points, WindowSpec};
use deimlab_cli::pipeline::{self, Format, OutputDir, RomMode};
use deimlab_cli::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const ORDER_TARGET: f64 = 2.0;
const ORDER_TOL: f64 = 0.3;
const SPAN_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const GRAD_PROBES: usize = 20;
const GRAD_BUDGET_S: f64 = 60.0;
const RELAX_TAU: f64 = 1e-3;
const RELAX_TOL: f64 = 1e-6;
const ARAKAWA_TOL: f64 = 1e-10;
const POISSON_TOL: f64 = 1e-8;
const NODE_LOSS_BAR: f64 = 0.10;
const EQUIVARIANCE_TOL: f64 = 1e-10;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk() -> ExperimentConfig {
    ExperimentConfig::load(&repo().join("configs/desk.toml")).expect("desk config")
}

/// Throwaway output directory, removed when the guard drops.
fn scratch() -> (tempfile::TempDir, OutputDir) {
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir::new(dir.path(), Format::Binary).unwrap();
    (dir, out)
}

struct Burgers {
    cfg: ExperimentConfig,
    fom: FomRun,
}

fn burgers() -> &'static Burgers {
    static CELL: OnceLock<Burgers> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = desk();
        let fom = run_fom(&cfg.burgers).unwrap();
        Burgers { cfg, fom }
    })
}

fn setup(points: usize) -> DeimSetup {
    let b = burgers();
    build_deim_setup(&b.fom, b.cfg.burgers.re, b.cfg.rom.modes, points).unwrap()
}

// ---------------------------------------------------------------- 1

fn max_abs_error(n: usize, steps: usize) -> f64 {
    let cfg = BurgersConfig { n, n_steps: steps, ..BurgersConfig::default() };
    run_fom(&cfg).unwrap().max_squared_error().sqrt()
}

fn criterion_1() -> Outcome {
    let b = burgers();
    let fom = &b.fom;
    let stable = fom.states.all_finite() && fom.states.n_cols() == 301;
    let e128 = fom.max_squared_error();
    // Diffusive step scaling keeps the refined runs stable: dt ∝ dx².
    let e256 = max_abs_error(256, 1200);
    let e512 = max_abs_error(512, 4800);
    let dx = |n: usize| 1.0 / (n as f64 - 1.0);
    // Error predicted at n=128 from the finest grid under second-order convergence.
    let bar = (e512 * (dx(128) / dx(512)).powi(2)).powi(2);
    let order = (e128.sqrt() / e256).ln() / (dx(128) / dx(256)).ln();
    check(
        stable && e128 < bar && (order - ORDER_TARGET).abs() <= ORDER_TOL,
        format!("max sq error {e128:.3e} < bar {bar:.3e}; order {order:.3} (target {ORDER_TARGET}±{ORDER_TOL})"),
    )
}

// ---------------------------------------------------------------- 2

fn random_orthonormal(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|a| a / norm).collect());
    }
    Matrix::from_columns(&cols).unwrap()
}

/// Greedy point selection, restated from the algorithm: largest entry of the
/// first mode, then the largest residual of each next mode after
/// interpolating it at the points chosen so far.
fn greedy_oracle(phi: &[Vec<f64>]) -> Vec<usize> {
    let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
    let mut p = vec![argmax(&phi[0])];
    for k in 1..phi.len() {
        let mut a: Vec<Vec<f64>> = p.iter().map(|&r| (0..=k).map(|j| phi[j][r]).collect()).collect();
        for col in 0..k {
            let piv = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in col + 1..k {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
        let mut c = vec![0.0; k];
        for r in (0..k).rev() {
            c[r] = (a[r][k] - (r + 1..k).map(|j| a[r][j] * c[j]).sum::<f64>()) / a[r][r];
        }
        let res: Vec<f64> = (0..phi[0].len()).map(|i| phi[k][i] - (0..k).map(|j| phi[j][i] * c[j]).sum::<f64>()).collect();
        p.push(argmax(&res));
    }
    p
}

fn columns(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.cols()).map(|j| m.column(j).to_vec()).collect()
}

fn criterion_2() -> Outcome {
    let s = setup(24);
    let phi = s.phi();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c: Vec<f64> = (0..phi.cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = phi.matvec(&c).unwrap();
        let back = s.static_op.interpolate(phi, &f).unwrap();
        worst = worst.max(back.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let mut agree = 0;
    for _ in 0..25 {
        let n = rng.gen_range(8..=32);
        let l = rng.gen_range(1..=8);
        let basis = random_orthonormal(n, l, &mut rng);
        if deim_indices(&basis).unwrap() == greedy_oracle(&columns(&basis)) {
            agree += 1;
        }
    }
    check(worst < SPAN_TOL && agree == 25, format!("span error {worst:.2e}; oracle agreement {agree}/25"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let b = burgers();
    let mut counts = Vec::new();
    for l in [18, 24] {
        let s = setup(l);
        let run = run_rom(&s.rom, &b.fom.states, b.cfg.burgers.dt(), b.cfg.burgers.n_steps, Sampler::Static(&s.static_op)).unwrap();
        counts.push(run.counter.per_step_batch);
    }
    check(counts == [5400, 7200], format!("per-step-batch evaluations l=18: {}, l=24: {}", counts[0], counts[1]))
}

// ---------------------------------------------------------------- 4

type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> deimlab::Result<Var> + 'a;

fn fd_error(shapes: &[Vec<usize>], build: &Builder, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let x0: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eval = |x: &[f64], grad: bool| -> deimlab::Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let mut off = 0;
        for (s, &n) in shapes.iter().zip(&sizes) {
            vars.push(tape.param(Tensor::new(s, x[off..off + n].to_vec())?));
            off += n;
        }
        let out = build(&mut tape, &vars)?;
        let f = tape.value(out).item();
        if !grad {
            return Ok((f, vec![]));
        }
        let g = tape.backward(out)?;
        Ok((f, vars.iter().zip(shapes).flat_map(|(v, s)| g.get_or_zeros(*v, s).data().to_vec()).collect()))
    };
    let (_, analytic) = eval(&x0, true).unwrap();
    let count = GRAD_PROBES.max(total.min(24));
    let picks: Vec<usize> = (0..count).map(|k| k * total / count).collect();
    let mut f = |x: &[f64]| eval(x, false).map(|r| r.0);
    let c = grad_check(&mut f, &x0, &analytic, &picks, 1e-6).unwrap();
    (c.probes, c.max_rel_err)
}

fn weighted_square(tape: &mut Tape, y: Var) -> deimlab::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).len();
    let w = tape.constant(Tensor::new(&shape, (0..n).map(|i| 0.3 + (i % 7) as f64 * 0.1).collect())?);
    let wy = tape.mul(w, y)?;
    let sq = tape.mul(wy, y)?;
    Ok(tape.sum(sq))
}

fn rollout_gradient() -> (usize, f64) {
    let b = burgers();
    let s = setup(24);
    let mut net = SamplerNet::new(SamplerConfig::new(b.cfg.burgers.n, 12, 24), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    net.warm_start(&s.static_op.indices, 0.05).unwrap();
    let problem = TrainingProblem {
        rom: &s.rom,
        phi: s.phi(),
        reference: &b.fom.states,
        dt: b.cfg.burgers.dt(),
        n_steps: b.cfg.burgers.n_steps,
        static_op: &s.static_op,
    };
    let eval = |params: &[Tensor], grad: bool| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = segment_loss(&mut tape, &net, &vars, &problem, 100, 2, 0.7, NetInput::Reconstruction, None).unwrap();
        let f = tape.value(loss).item();
        if !grad {
            return (f, vec![]);
        }
        let g = tape.backward(loss).unwrap();
        (f, vars.iter().zip(params).flat_map(|(v, p)| g.get_or_zeros(*v, p.shape()).data().to_vec()).collect())
    };
    let x0: Vec<f64> = net.params.iter().flat_map(|p| p.data().to_vec()).collect();
    let rebuild = |x: &[f64]| -> Vec<Tensor> {
        let mut off = 0;
        net.params
            .iter()
            .map(|p| {
                off += p.len();
                Tensor::new(p.shape(), x[off - p.len()..off].to_vec()).unwrap()
            })
            .collect()
    };
    let (_, analytic) = eval(&net.params, true);
    // The loss is small in absolute terms; probe coordinates with a
    // non-negligible gradient and compare relatively.
    let scale = analytic.iter().map(|g| g.abs()).fold(0.0, f64::max);
    let picks: Vec<usize> = (0..x0.len()).filter(|&i| analytic[i].abs() > 1e-3 * scale).step_by(97).take(24).collect();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut xp = x0.clone();
    for &i in &picks {
        xp[i] = x0[i] + h;
        let fp = eval(&rebuild(&xp), false).0;
        xp[i] = x0[i] - h;
        let fm = eval(&rebuild(&xp), false).0;
        xp[i] = x0[i];
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - analytic[i]).abs() / analytic[i].abs().max(fd.abs()));
    }
    (picks.len(), worst)
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let grid = Grid1D::new(24, 1.0).unwrap();
    let u: Vec<f64> = (0..24).map(|i| ((i as f64) * 0.4).sin()).collect();
    let sparse = advection_matrix_rc(&u, &grid, None);
    let cnn_grid = Grid2D::square(16).unwrap();
    let cnn = CnnRhs::new(deimlab::node::CnnConfig { width: 4, conv_layers: 3 }, &cnn_grid, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let sampler = SamplerNet::new(SamplerConfig { n: 16, m: 3, l: 4, hidden: vec![8] }, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let eye = |n: usize, s: f64| Tensor::new(&[n, n], (0..n * n).map(|i| if i % (n + 1) == 0 { s } else { 0.0 }).collect()).unwrap();
    let cases: Vec<(&str, Vec<Vec<usize>>, Box<Builder>)> = vec![
        ("add", vec![vec![4, 5], vec![4, 5]], Box::new(|t, v| { let y = t.add(v[0], v[1])?; weighted_square(t, y) })),
        ("sub", vec![vec![4, 5], vec![4, 5]], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; weighted_square(t, y) })),
        ("mul", vec![vec![4, 5], vec![4, 5]], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; weighted_square(t, y) })),
        ("scale", vec![vec![21]], Box::new(|t, v| { let y = t.scale(v[0], -1.7); weighted_square(t, y) })),
        ("add_row", vec![vec![5, 4], vec![4]], Box::new(|t, v| { let y = t.add_row(v[0], v[1])?; weighted_square(t, y) })),
        ("matmul", vec![vec![4, 5], vec![5, 3]], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; weighted_square(t, y) })),
        ("transpose", vec![vec![4, 6]], Box::new(|t, v| { let y = t.transpose(v[0])?; weighted_square(t, y) })),
        ("reshape", vec![vec![4, 6]], Box::new(|t, v| { let y = t.reshape(v[0], &[3, 8])?; weighted_square(t, y) })),
        ("concat", vec![vec![3, 4], vec![10]], Box::new(|t, v| { let y = t.concat(&[v[0], v[1]]); weighted_square(t, y) })),
        ("relu", vec![vec![30]], Box::new(|t, v| { let y = t.relu(v[0]); weighted_square(t, y) })),
        ("softmax_cols", vec![vec![6, 4]], Box::new(|t, v| { let y = t.softmax_cols(v[0])?; weighted_square(t, y) })),
        ("solve", vec![vec![5, 5], vec![5, 2]], Box::new(move |t, v| {
            let shift = t.constant(eye(5, 4.0));
            let m = t.add(v[0], shift)?;
            let x = t.solve(m, v[1])?;
            weighted_square(t, x)
        })),
        ("sparse_matvec", vec![vec![24, 1]], Box::new(move |t, v| { let y = t.sparse_matvec(Rc::clone(&sparse), v[0])?; weighted_square(t, y) })),
        ("conv2d_periodic", vec![vec![2, 5, 6], vec![3, 2, 3, 3], vec![3]], Box::new(|t, v| { let y = t.conv2d_periodic(v[0], v[1], v[2])?; weighted_square(t, y) })),
        ("sum", vec![vec![5, 5]], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; Ok(t.sum(y)) })),
        ("mean", vec![vec![25]], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; let m = t.mean(y); Ok(t.scale(m, 3.0)) })),
        ("mse", vec![vec![5, 5], vec![5, 5]], Box::new(|t, v| t.mse(v[0], v[1]))),
        ("gumbel_relax", vec![vec![6, 4]], Box::new(|t, v| {
            let y = relax(t, v[0], 0.7, Some(&mut ChaCha8Rng::seed_from_u64(1)))?;
            weighted_square(t, y)
        })),
        ("soft_deim", vec![vec![12, 3], vec![12, 3], vec![2, 3], vec![12, 1]], Box::new(move |t, v| {
            let pi = t.softmax_cols(v[0])?;
            let shift = t.constant(Tensor::new(&[12, 3], (0..36).map(|i| if i % 4 == 0 { 3.0 } else { 0.0 }).collect())?);
            let phi = t.add(v[1], shift)?;
            let y = soft_deim_apply(t, pi, phi, v[2], v[3])?;
            weighted_square(t, y)
        })),
        ("sampler_mlp", vec![vec![16, 1], vec![3, 1]], Box::new(|t, v| {
            let params = sampler.bind(t);
            let z = sampler.forward_logits(t, &params, v[0], v[1])?;
            weighted_square(t, z)
        })),
        ("cnn_tendency", vec![vec![1, 16, 16]], Box::new(|t, v| {
            let params = cnn.bind(t);
            let y = cnn.forward_tape(t, &params, v[0])?;
            weighted_square(t, y)
        })),
    ];
    let mut worst = ("", 0.0f64);
    let mut min_probes = usize::MAX;
    for (k, (name, shapes, build)) in cases.iter().enumerate() {
        let (probes, err) = fd_error(shapes, build.as_ref(), 100 + k as u64);
        min_probes = min_probes.min(probes);
        if err >= worst.1 {
            worst = (name, err);
        }
    }
    let (rollout_probes, rollout_err) = rollout_gradient();
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.1 < GRAD_TOL && rollout_err < GRAD_TOL && min_probes >= GRAD_PROBES && rollout_probes >= GRAD_PROBES && secs < GRAD_BUDGET_S,
        format!(
            "{} ops, worst {} {:.2e} (min {min_probes} probes); 2-step rollout {rollout_err:.2e} over {rollout_probes} probes; {secs:.1} s",
            cases.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---------------------------------------------------------------- 5

fn adaptive_mse(points: usize) -> (f64, f64) {
    let b = burgers();
    let mut cfg = b.cfg.clone();
    cfg.rom.points = points;
    let (_dir, mut out) = scratch();
    let (net, _) = pipeline::train_adaptive(&cfg, &mut out, &b.fom).unwrap();
    let (_, adaptive) = pipeline::rom_adaptive(&cfg, &mut out, &b.fom, &net).unwrap();
    let mut cfg24 = b.cfg.clone();
    cfg24.rom.points = 24;
    let (_, stat) = pipeline::deim_rom(&cfg24, &mut out, &b.fom, RomMode::Static).unwrap();
    (adaptive.mean_mse, stat.mean_mse)
}

fn criterion_5() -> Outcome {
    let (adaptive, stat) = adaptive_mse(24);
    check(adaptive < stat, format!("adaptive l=24 mean MSE {adaptive:.6e} vs static l=24 {stat:.6e}"))
}

fn criterion_5_stretch() -> Outcome {
    let (adaptive, stat) = adaptive_mse(18);
    check(adaptive < stat, format!("adaptive l=18 mean MSE {adaptive:.6e} vs static l=24 {stat:.6e}"))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let b = burgers();
    let s = setup(24);
    let mut net = SamplerNet::new(SamplerConfig::new(b.cfg.burgers.n, 12, 24), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    net.warm_start(&s.static_op.indices, 1.0).unwrap();
    let psi_t_phi = s.rom.psi.transpose().matmul(s.phi()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.gen_range(0..b.fom.states.n_cols());
        let mut a = s.rom.project(b.fom.states.column(k)).unwrap();
        a.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        let u = s.rom.reconstruct(&a).unwrap();
        let logits = net.logits(&u, &a).unwrap();
        let idx = argmax_points(&logits);
        let op = DeimOperator::new(&s.rom.psi, s.phi(), &idx, STENCIL_RADIUS).unwrap();
        let nl = nonlinear_term(&u, &b.fom.grid).unwrap();
        let sampled: Vec<f64> = idx.iter().map(|&i| nl[i]).collect();
        let hard = deim_apply(&op, &sampled, &mut EvalCounter::default()).unwrap();
        let pi = relaxed_selection(&logits, RELAX_TAU, None).unwrap().pi;
        let mut tape = Tape::new();
        let piv = tape.constant(Tensor::from_matrix(&pi));
        let phiv = tape.constant(Tensor::from_matrix(s.phi()));
        let ptp = tape.constant(Tensor::from_matrix(&psi_t_phi));
        let nlv = tape.constant(Tensor::column(&nl));
        let soft = soft_deim_apply(&mut tape, piv, phiv, ptp, nlv).unwrap();
        for (x, y) in tape.value(soft).data().iter().zip(&hard) {
            worst = worst.max((x - y).abs());
        }
    }
    check(worst < RELAX_TOL, format!("max |soft - hard| {worst:.2e} at tau {RELAX_TAU} over 20 states"))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    // Enstrophy and Poisson residual on the default configuration.
    let base = VortexConfig { n: 128, n_snapshots: 200, save_every: 1, ..VortexConfig::default() };
    let run = run_vortex(&base, &base.init(InitTag::Horizontal)).unwrap();
    let z: Vec<f64> = run.omega.columns().map(enstrophy).collect();
    let monotone = z.windows(2).all(|p| p[1] < p[0]);
    let mut poisson: f64 = 0.0;
    for w in run.omega.columns().step_by(20) {
        let psi = poisson_solve(w, &run.grid).unwrap();
        let lap = spectral_laplacian(&psi, &run.grid).unwrap();
        poisson = poisson.max(lap.iter().zip(w).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max));
    }
    // Merger run with the conservation sums checked at every stage.
    let merge = VortexConfig { n: 128, amplitude: 8.0, n_snapshots: 50, save_every: 20, ..VortexConfig::default() };
    let grid = merge.grid().unwrap();
    let init = make_initial(&grid, &merge.init(InitTag::Horizontal)).unwrap();
    let mut sums = [0.0f64; 3];
    let mut rhs = |w: &[f64]| {
        let psi = poisson_solve(w, &grid)?;
        let j = arakawa_jacobian(w, &psi, &grid);
        let s = [
            j.iter().sum::<f64>(),
            j.iter().zip(w).map(|(a, b)| a * b).sum::<f64>(),
            j.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>(),
        ];
        for (m, v) in sums.iter_mut().zip(s) {
            *m = m.max(v.abs());
        }
        vortex_rhs(w, &grid, merge.re)
    };
    let traj = integrate_field(&grid, &init.omega, merge.dt, merge.n_steps(), merge.save_every, &mut rhs, |_| false).unwrap();
    let counts: Vec<usize> = traj.omega.columns().map(|w| census(w, &grid, pipeline::CENSUS_FRACTION)).collect();
    let merged_at = counts.iter().position(|&c| c == 1).map(|k| traj.times[k]);
    check(
        sums.iter().all(|&s| s < ARAKAWA_TOL) && monotone && poisson < POISSON_TOL && counts[0] == 2 && merged_at.is_some(),
        format!(
            "max |ΣJ|, |Σω·J|, |Σψ·J| {:.1e}, {:.1e}, {:.1e}; enstrophy monotone {monotone}; Poisson residual {poisson:.1e}; census 2 -> 1 at t = {}",
            sums[0],
            sums[1],
            sums[2],
            merged_at.map_or("never".to_string(), |t| format!("{t:.1}"))
        ),
    )
}

// ---------------------------------------------------------------- NODE fixture

struct NodeFixture {
    cfg: ExperimentConfig,
    truth: BTreeMap<&'static str, VortexRun>,
    net: CnnRhs,
    report: NodeTrainReport,
}

fn node_fixture() -> &'static NodeFixture {
    static CELL: OnceLock<NodeFixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = desk();
        let (_dir, mut out) = scratch();
        let mut truth = BTreeMap::new();
        for tag in InitTag::ALL {
            truth.insert(tag.name(), pipeline::vortex_sim(&cfg, &mut out, tag).unwrap());
        }
        let train = &truth[cfg.node.train_init.name()];
        let t = Instant::now();
        let (net, report) = pipeline::train_node_stage(&cfg, &mut out, &train.omega, &train.rhs).unwrap();
        println!("    (NODE training: {} epochs in {:.0} s)", report.history.len(), t.elapsed().as_secs_f64());
        NodeFixture { cfg, truth, net, report }
    })
}

fn shift(f: &[f64], n: usize, sx: usize, sy: usize) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for j in 0..n {
        for i in 0..n {
            out[((j + sy) % n) * n + (i + sx) % n] = f[j * n + i];
        }
    }
    out
}

fn criterion_8() -> Outcome {
    let fx = node_fixture();
    let rel = fx.report.relative_loss();
    let n = fx.cfg.vortex.n;
    let w = fx.truth["asymmetric"].omega.column(40);
    let base = fx.net.forward(w).unwrap();
    let mut equi: f64 = 0.0;
    for (sx, sy) in [(1, 0), (5, 11), (32, 63)] {
        let moved = fx.net.forward(&shift(w, n, sx, sy)).unwrap();
        let expect = shift(&base, n, sx, sy);
        equi = equi.max(moved.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let run = &fx.truth["horizontal"];
    let vc = &fx.cfg.vortex;
    let mut rhs = |x: &[f64]| vortex_rhs(x, &run.grid, vc.re);
    let gt = integrate_field(&run.grid, run.omega.column(0), vc.dt, vc.n_steps(), vc.save_every, &mut rhs, |_| false).unwrap();
    let identical = gt.omega.as_slice().len() == run.omega.as_slice().len()
        && gt.omega.as_slice().iter().zip(run.omega.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
    check(
        rel < NODE_LOSS_BAR && equi < EQUIVARIANCE_TOL && identical,
        format!("{n}² training loss {rel:.4} of target variance (bar {NODE_LOSS_BAR}); equivariance {equi:.1e}; ground-truth rollout bit-identical {identical}"),
    )
}

// ---------------------------------------------------------------- 9

fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).map(|i| (0..n).filter(|&j| j != i).map(|j| a[i][j] * a[i][j]).sum::<f64>()).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta == 0.0 { 1.0 } else { theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt()) };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (a[p][k], a[q][k]);
                    a[p][k] = c * x - s * y;
                    a[q][k] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    (order.iter().map(|&k| a[k][k]).collect(), order.iter().map(|&k| v.iter().map(|r| r[k]).collect()).collect())
}

/// Leading left singular vectors through the eigenvectors of `WᵀW`.
fn left_singular(w: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let gram: Vec<Vec<f64>> = w.iter().map(|a| w.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect()).collect();
    let (vals, vecs) = jacobi_eigen(gram);
    (0..k)
        .map(|c| (0..w[0].len()).map(|i| w.iter().zip(&vecs[c]).map(|(col, x)| col[i] * x).sum::<f64>() / vals[c].sqrt()).collect())
        .collect()
}

fn criterion_9() -> Outcome {
    let spec = WindowSpec { window_size: 20, stride: 1, n_points: 16 };
    let count = window_count(200, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut agree, mut deterministic, mut invariant) = (0, true, true);
    let trials = 20;
    for _ in 0..trials {
        let cells = rng.gen_range(16..=64);
        let cols = rng.gen_range(4..=20);
        let pts = rng.gen_range(1..=cols.min(16));
        let w: Vec<Vec<f64>> = (0..cols).map(|_| (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let m = Matrix::from_columns(&w).unwrap();
        let ps = window_points(&m, pts).unwrap();
        if ps.indices == greedy_oracle(&left_singular(&w, pts)) {
            agree += 1;
        }
        deterministic &= window_points(&m, pts).unwrap() == ps;
        let mut perm: Vec<usize> = (0..cols).collect();
        for i in (1..cols).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = Matrix::from_columns(&perm.iter().map(|&j| w[j].clone()).collect::<Vec<_>>()).unwrap();
        invariant &= window_points(&shuffled, pts).unwrap().indices == ps.indices;
    }
    check(
        count == 181 && agree == trials && deterministic && invariant,
        format!("{count} windows for T=200, w=20, s=1; oracle agreement {agree}/{trials}; deterministic {deterministic}; permutation invariant {invariant}"),
    )
}

// ---------------------------------------------------------------- 10

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_10() -> Outcome {
    let fx = node_fixture();
    let grid = fx.cfg.vortex.grid().unwrap();
    let horizon = fx.cfg.node.train.n_train;
    let mut early = BTreeMap::new();
    let mut lines = Vec::new();
    let (mut model_rev, mut truth_rev) = (0, 0);
    let mut in_dist = (0.0, 0.0);
    for tag in InitTag::ALL {
        let run = &fx.truth[tag.name()];
        let (_dir, mut out) = scratch();
        let pred = pipeline::node_rollout(&fx.cfg, &mut out, &fx.net, tag, &run.omega).unwrap();
        let quarter = pred.l2.len() / 4;
        early.insert(tag.name(), mean(&pred.l2[1..=quarter]));
        let truth_traj = trajectories(&run.rhs, &grid, &fx.cfg.window).unwrap();
        let model_traj = trajectories(&pred.rhs, &grid, &fx.cfg.window).unwrap();
        let (rt, rm) = (revisit_count(&truth_traj, 0), revisit_count(&model_traj, 0));
        if tag == fx.cfg.node.train_init {
            in_dist = (mean(&pred.l2[1..horizon]), mean(&pred.l2[horizon..]));
        } else {
            truth_rev += rt;
            model_rev += rm;
        }
        lines.push(format!(
            "{}: early L2 {:.3}, final L2 {:.3}, revisits truth {rt} / model {rm}{}",
            tag.name(),
            early[tag.name()],
            pred.l2.last().unwrap(),
            pred.stopped_at.map_or(String::new(), |s| format!(", stopped at step {s}"))
        ));
    }
    for l in &lines {
        println!("    {l}");
    }
    let grows = in_dist.1 > in_dist.0;
    let faster = early["vertical"] > early["asymmetric"] && early["close-horizontal"] > early["asymmetric"];
    let revisits = model_rev > truth_rev;
    check(
        grows && faster && revisits,
        format!(
            "in-distribution mean L2 {:.3} within horizon -> {:.3} beyond ({grows}); vertical and close-horizontal grow faster than asymmetric ({faster}); extrapolation revisits model {model_rev} vs truth {truth_rev} ({revisits})",
            in_dist.0, in_dist.1
        ),
    )
}

// ---------------------------------------------------------------- 11

const SMALL: &str = r#"
seed = 5
[burgers]
n = 64
n_steps = 120
[rom]
modes = 8
points = 12
[adaptive]
hidden = [32]
[adaptive.train]
epochs = 2
[vortex]
n = 32
n_snapshots = 30
save_every = 2
[node.cnn]
width = 4
conv_layers = 2
[node.train]
n_train = 20
epochs = 2
[window]
window_size = 10
n_points = 4
"#;

fn run_all(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let cfg = ExperimentConfig::parse(SMALL).unwrap();
    let mut out = OutputDir::new(dir, Format::Csv).unwrap();
    pipeline::reproduce_all(&cfg, &mut out).unwrap();
    pipeline::pod(&cfg, &mut out, &dir.join("burgers_states.dlab"), deimlab::rom::Truncation::Energy(0.999)).unwrap();
    out.finish("reproduce-all", &cfg).unwrap();
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn criterion_11() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_all(a.path());
    let second = run_all(b.path());
    let differing: Vec<&String> = first.keys().filter(|k| second.get(*k) != first.get(*k)).collect();
    let same_names = first.keys().eq(second.keys());
    let stages = ["burgers_states.dlab", "rom_static_mse.csv", "rom_full_mse.csv", "adaptive_sampler.dlck", "rom_adaptive_mse.csv", "cnn_node.dlck", "node_asymmetric_l2.csv", "windowed_vertical_divergence.csv", "burgers_states_energy.csv"];
    let covered = stages.iter().all(|s| first.contains_key(*s));
    check(
        same_names && differing.is_empty() && covered,
        format!("{} files from every stage, {} differing between reruns", first.len(), differing.len()),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(&str, fn() -> Outcome, bool)> = vec![
        ("1", criterion_1, true),
        ("2", criterion_2, true),
        ("3", criterion_3, true),
        ("4", criterion_4, true),
        ("5", criterion_5, true),
        ("5-stretch", criterion_5_stretch, false),
        ("6", criterion_6, true),
        ("7", criterion_7, true),
        ("8", criterion_8, true),
        ("9", criterion_9, true),
        ("10", criterion_10, true),
        ("11", criterion_11, true),
    ];
    let mut failed = Vec::new();
    for (id, f, gated) in criteria {
        let base = id.split('-').next().unwrap();
        if !filters.is_empty() && !filters.iter().any(|x| x == id || x == base) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        let tag = if gated { "" } else { " (not gated)" };
        match outcome {
            Ok(d) => println!("criterion {id}: PASS{tag} [{secs:.1} s] {d}"),
            Err(d) => {
                println!("criterion {id}: FAIL{tag} [{secs:.1} s] {d}");
                if gated {
                    failed.push(id);
                }
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} gated criteria failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
    println!("acceptance: all gated criteria passed");
}
