//! Pipeline stages behind the subcommands. Each stage reads binary inputs,
//! writes its outputs into an [`OutputDir`] and returns the in-memory results
//! so stages can be chained without re-reading files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use deimlab::burgers::{run_fom, FomRun};
use deimlab::io::{self, Metadata};
use deimlab::node::{l2_error_series, rollout_node, train_node, CnnRhs, Normalization, NodeTrainReport};
use deimlab::rom::{build_deim_setup, build_pod, run_rom, DeimSetup, RomRun, Sampler, Truncation};
use deimlab::sampler::{train, SamplerConfig, SamplerNet, TrainReport, TrainingProblem};
use deimlab::snapshot::SnapshotMatrix;
use deimlab::vortex::{census, enstrophy, run_vortex, to_pgm, Grid2D, InitTag, VortexRun};
use deimlab::windowed::{compare_trajectories, revisit_count, trajectories, winding, DivergenceReport, PointTrajectory};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Representation of bulk fields. Binary files are always written since later
/// stages read them; `Csv` adds a text copy next to each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Binary,
    Csv,
}

/// Fraction of the peak vorticity a local maximum must reach to be counted.
pub const CENSUS_FRACTION: f64 = 0.5;

/// Seed offsets so that each random stream of a run is independent.
pub mod seeds {
    pub const SAMPLER_INIT: u64 = 0;
    pub const SAMPLER_TRAIN: u64 = 1;
    pub const NODE_INIT: u64 = 2;
    pub const NODE_TRAIN: u64 = 3;
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub sha256: String,
    pub bytes: u64,
    /// Column layout identifier for CSV files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
}

/// Output directory that remembers what it wrote.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    format: Format,
    files: BTreeMap<String, FileRecord>,
}

impl OutputDir {
    pub fn new(root: &Path, format: Format) -> CliResult<Self> {
        std::fs::create_dir_all(root)?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            format,
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn files(&self) -> &BTreeMap<String, FileRecord> {
        &self.files
    }

    fn record(&mut self, name: &str, bytes: &[u8], schema: Option<&str>) -> CliResult<()> {
        std::fs::write(self.path(name), bytes)?;
        self.files.insert(
            name.to_string(),
            FileRecord {
                sha256: io::sha256_hex(bytes),
                bytes: bytes.len() as u64,
                schema: schema.map(str::to_string),
            },
        );
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        self.record(name, bytes, None)
    }

    /// Writes a CSV with a fixed header; `schema` names the layout version.
    pub fn write_csv(&mut self, name: &str, schema: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Other(e.to_string()))?;
        self.record(name, &bytes, Some(schema))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
        bytes.push(b'\n');
        self.record(name, &bytes, None)
    }

    pub fn write_snapshots(&mut self, stem: &str, snaps: &SnapshotMatrix, meta: Metadata) -> CliResult<()> {
        let bytes = io::encode_snapshots(snaps, meta)?;
        self.record(&format!("{stem}.dlab"), &bytes, None)?;
        if self.format == Format::Csv {
            let header: Vec<String> = (0..snaps.n_cols()).map(|k| format!("s{k}")).collect();
            let rows: Vec<Vec<String>> = (0..snaps.n_rows())
                .map(|i| snaps.columns().map(|c| c[i].to_string()).collect())
                .collect();
            let h: Vec<&str> = header.iter().map(String::as_str).collect();
            self.write_csv(&format!("{stem}.csv"), "field/v1", &h, &rows)?;
        }
        Ok(())
    }

    pub fn write_checkpoint(&mut self, name: &str, tensors: &[deimlab::autodiff::Tensor], meta: Metadata) -> CliResult<()> {
        let bytes = io::encode_checkpoint(tensors, meta)?;
        self.record(name, &bytes, None)
    }

    /// Writes the resolved config echo and a manifest of every file so far.
    pub fn finish(&mut self, command: &str, cfg: &ExperimentConfig) -> CliResult<()> {
        let echo = cfg.echo()?;
        self.record(&format!("config-{command}.toml"), echo.as_bytes(), None)?;
        let manifest = serde_json::json!({
            "command": command,
            "seed": cfg.seed,
            "config": cfg.to_json(),
            "files": self.files,
        });
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Other(e.to_string()))?;
        bytes.push(b'\n');
        std::fs::write(self.path(&format!("manifest-{command}.json")), bytes)?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    v.to_string()
}

fn meta(kind: &str, cfg: &ExperimentConfig) -> Metadata {
    Metadata::new(kind, cfg.seed, cfg.to_json())
}

fn expect_kind(meta: &Metadata, kind: &str, path: &Path) -> CliResult<()> {
    if meta.kind != kind {
        return Err(CliError::Input(format!(
            "{} holds '{}', expected '{kind}'",
            path.display(),
            meta.kind
        )));
    }
    Ok(())
}

pub fn load_snapshots(path: &Path, kind: &str) -> CliResult<SnapshotMatrix> {
    let (s, m) = io::load_snapshots(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    expect_kind(&m, kind, path)?;
    Ok(s)
}

// ---------------------------------------------------------------- Burgers

pub const BURGERS_STATES: &str = "burgers_states";
pub const BURGERS_NONLINEAR: &str = "burgers_nonlinear";

pub fn burgers_fom(cfg: &ExperimentConfig, out: &mut OutputDir) -> CliResult<FomRun> {
    let run = run_fom(&cfg.burgers)?;
    info!("Burgers FOM: max squared error {:.4e}", run.max_squared_error());
    out.write_snapshots(BURGERS_STATES, &run.states, meta("burgers-states", cfg))?;
    out.write_snapshots(BURGERS_NONLINEAR, &run.nonlinear, meta("burgers-nonlinear", cfg))?;
    let rows: Vec<Vec<String>> = run
        .times
        .iter()
        .zip(run.squared_error.columns())
        .enumerate()
        .map(|(k, (&t, e))| {
            let max = e.iter().fold(0.0f64, |m, &v| m.max(v));
            let mean = e.iter().sum::<f64>() / e.len() as f64;
            vec![k.to_string(), num(t), num(max), num(mean)]
        })
        .collect();
    out.write_csv(
        "burgers_analytic_error.csv",
        "analytic-error/v1",
        &["step", "time", "max_squared_error", "mean_squared_error"],
        &rows,
    )?;
    Ok(run)
}

/// Rebuilds a full-order run from files written by [`burgers_fom`].
pub fn load_fom(dir: &Path, cfg: &ExperimentConfig) -> CliResult<FomRun> {
    let grid = cfg.burgers.validate()?;
    let states = load_snapshots(&dir.join(format!("{BURGERS_STATES}.dlab")), "burgers-states")?;
    let nonlinear = load_snapshots(&dir.join(format!("{BURGERS_NONLINEAR}.dlab")), "burgers-nonlinear")?;
    if states.n_rows() != grid.n || nonlinear.dims() != states.dims() || nonlinear.n_cols() != states.n_cols() {
        return Err(CliError::Input(format!(
            "snapshot files do not match a {}-point grid",
            grid.n
        )));
    }
    let dt = cfg.burgers.dt();
    Ok(FomRun {
        grid,
        times: (0..states.n_cols()).map(|k| k as f64 * dt).collect(),
        squared_error: SnapshotMatrix::new(&[grid.n]),
        states,
        nonlinear,
    })
}

pub fn pod(cfg: &ExperimentConfig, out: &mut OutputDir, input: &Path, truncation: Truncation) -> CliResult<()> {
    let (snaps, _) = io::load_snapshots(input).map_err(|e| CliError::Input(format!("{}: {e}", input.display())))?;
    let basis = build_pod(&snaps.to_matrix(), truncation)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("snapshots")
        .to_string();
    let mut modes = SnapshotMatrix::new(snaps.dims());
    for j in 0..basis.n_modes() {
        modes.push(&basis.modes.column(j))?;
    }
    out.write_snapshots(&format!("{stem}_pod"), &modes, meta("pod-basis", cfg))?;
    let rows: Vec<Vec<String>> = basis
        .sigma
        .iter()
        .zip(&basis.energy_fractions)
        .enumerate()
        .map(|(k, (&s, &e))| vec![(k + 1).to_string(), num(s), num(e), (k < basis.n_modes()).to_string()])
        .collect();
    out.write_csv(
        &format!("{stem}_energy.csv"),
        "energy-spectrum/v1",
        &["mode", "singular_value", "cumulative_energy", "retained"],
        &rows,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RomMode {
    Static,
    Full,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub mode: String,
    pub steps: usize,
    pub points: usize,
    /// Sampling-point evaluations counted once per time step.
    pub per_step_batch: u64,
    /// Evaluations counted once per Runge-Kutta stage.
    pub per_stage: u64,
    pub mean_mse: f64,
    pub final_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallbacks: Option<usize>,
}

fn write_rom_outputs(out: &mut OutputDir, label: &str, run: &RomRun, dt: f64, report: &EvaluationReport) -> CliResult<()> {
    let rows: Vec<Vec<String>> = run
        .mse
        .iter()
        .enumerate()
        .map(|(k, &e)| vec![k.to_string(), num(k as f64 * dt), num(e)])
        .collect();
    out.write_csv(&format!("rom_{label}_mse.csv"), "rom-mse/v1", &["step", "time", "mse"], &rows)?;
    if run.indices.iter().any(|v| !v.is_empty()) {
        let rows: Vec<Vec<String>> = run
            .indices
            .iter()
            .enumerate()
            .flat_map(|(k, idx)| {
                idx.iter()
                    .enumerate()
                    .map(move |(s, &i)| vec![(k + 1).to_string(), s.to_string(), i.to_string()])
            })
            .collect();
        out.write_csv(&format!("rom_{label}_indices.csv"), "index-trajectory/v1", &["step", "slot", "grid_index"], &rows)?;
    }
    out.write_json(&format!("rom_{label}_evaluations.json"), report)
}

pub fn deim_setup(cfg: &ExperimentConfig, fom: &FomRun) -> CliResult<DeimSetup> {
    Ok(build_deim_setup(fom, cfg.burgers.re, cfg.rom.modes, cfg.rom.points)?)
}

pub fn deim_rom(cfg: &ExperimentConfig, out: &mut OutputDir, fom: &FomRun, mode: RomMode) -> CliResult<(RomRun, EvaluationReport)> {
    let setup = deim_setup(cfg, fom)?;
    let dt = cfg.burgers.dt();
    let n = cfg.burgers.n_steps;
    let (run, label, points) = match mode {
        RomMode::Static => (run_rom(&setup.rom, &fom.states, dt, n, Sampler::Static(&setup.static_op))?, "static", cfg.rom.points),
        RomMode::Full => (run_rom(&setup.rom, &fom.states, dt, n, Sampler::Full)?, "full", 0),
    };
    let report = EvaluationReport {
        mode: label.to_string(),
        steps: n,
        points,
        per_step_batch: run.counter.per_step_batch,
        per_stage: run.counter.per_stage,
        mean_mse: run.mean_mse(),
        final_mse: *run.mse.last().expect("initial MSE is always recorded"),
        fallbacks: None,
    };
    info!("{label} ROM: mean MSE {:.4e}, {} per-step evaluations", report.mean_mse, report.per_step_batch);
    write_rom_outputs(out, label, &run, dt, &report)?;
    Ok((run, report))
}

pub const SAMPLER_CHECKPOINT: &str = "adaptive_sampler.dlck";

pub fn train_adaptive(cfg: &ExperimentConfig, out: &mut OutputDir, fom: &FomRun) -> CliResult<(SamplerNet, TrainReport)> {
    let setup = deim_setup(cfg, fom)?;
    let sc = SamplerConfig {
        hidden: cfg.adaptive.hidden.clone(),
        ..SamplerConfig::new(cfg.burgers.n, cfg.rom.modes, cfg.rom.points)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(seeds::SAMPLER_INIT));
    let mut net = SamplerNet::new(sc.clone(), &mut rng)?;
    let problem = TrainingProblem {
        rom: &setup.rom,
        phi: setup.phi(),
        reference: &fom.states,
        dt: cfg.burgers.dt(),
        n_steps: cfg.burgers.n_steps,
        static_op: &setup.static_op,
    };
    let report = train(&mut net, &problem, &cfg.adaptive.train, cfg.seed.wrapping_add(seeds::SAMPLER_TRAIN))?;
    let mut m = meta("adaptive-sampler", cfg);
    m.extra = serde_json::json!({
        "layers": sc.layer_dims(),
        "initial_rollout_mse": report.initial_rollout_mse,
        "best_epoch": report.best_epoch,
    });
    out.write_checkpoint(SAMPLER_CHECKPOINT, &net.params, m)?;
    let rows: Vec<Vec<String>> = report
        .history
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                num(r.tau),
                num(r.train_loss),
                num(r.rollout_mse),
                num(r.best_rollout_mse),
                r.skipped_segments.to_string(),
                r.ridge_events.to_string(),
            ]
        })
        .collect();
    out.write_csv(
        "adaptive_loss.csv",
        "adaptive-loss/v1",
        &["epoch", "tau", "train_loss", "rollout_mse", "best_rollout_mse", "skipped_segments", "ridge_events"],
        &rows,
    )?;
    Ok((net, report))
}

pub fn load_sampler(path: &Path, cfg: &ExperimentConfig) -> CliResult<SamplerNet> {
    let (params, m) = io::load_checkpoint(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    expect_kind(&m, "adaptive-sampler", path)?;
    let sc = SamplerConfig {
        hidden: cfg.adaptive.hidden.clone(),
        ..SamplerConfig::new(cfg.burgers.n, cfg.rom.modes, cfg.rom.points)
    };
    SamplerNet::from_params(sc, params).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn rom_adaptive(cfg: &ExperimentConfig, out: &mut OutputDir, fom: &FomRun, net: &SamplerNet) -> CliResult<(RomRun, EvaluationReport)> {
    let setup = deim_setup(cfg, fom)?;
    let problem = TrainingProblem {
        rom: &setup.rom,
        phi: setup.phi(),
        reference: &fom.states,
        dt: cfg.burgers.dt(),
        n_steps: cfg.burgers.n_steps,
        static_op: &setup.static_op,
    };
    let (run, fallbacks) = problem.evaluate(net, cfg.adaptive.train.input)?;
    let report = EvaluationReport {
        mode: "adaptive".into(),
        steps: cfg.burgers.n_steps,
        points: cfg.rom.points,
        per_step_batch: run.counter.per_step_batch,
        per_stage: run.counter.per_stage,
        mean_mse: run.mean_mse(),
        final_mse: *run.mse.last().expect("initial MSE is always recorded"),
        fallbacks: Some(fallbacks),
    };
    info!("adaptive ROM: mean MSE {:.4e}, {fallbacks} fallbacks", report.mean_mse);
    write_rom_outputs(out, "adaptive", &run, cfg.burgers.dt(), &report)?;
    Ok((run, report))
}

// ---------------------------------------------------------------- vortex

pub fn vortex_stem(tag: InitTag) -> String {
    format!("vortex_{}", tag.name().replace('-', "_"))
}

pub fn vortex_sim(cfg: &ExperimentConfig, out: &mut OutputDir, tag: InitTag) -> CliResult<VortexRun> {
    let run = run_vortex(&cfg.vortex, &cfg.vortex.init(tag))?;
    let stem = vortex_stem(tag);
    let mut m = meta("vortex-omega", cfg);
    m.extra = serde_json::json!({ "init": tag.name() });
    out.write_snapshots(&format!("{stem}_omega"), &run.omega, m.clone())?;
    m.kind = "vortex-rhs".into();
    out.write_snapshots(&format!("{stem}_rhs"), &run.rhs, m)?;
    write_field_diagnostics(out, &format!("{stem}_diagnostics.csv"), &run.grid, &run.times, &run.omega)?;
    let last = run.omega.column(run.omega.n_cols() - 1);
    out.write_bytes(&format!("{stem}_final.pgm"), &to_pgm(last, &run.grid))?;
    Ok(run)
}

fn write_field_diagnostics(out: &mut OutputDir, name: &str, grid: &Grid2D, times: &[f64], omega: &SnapshotMatrix) -> CliResult<()> {
    let mut rows = Vec::with_capacity(times.len());
    for (k, (w, &t)) in omega.columns().zip(times).enumerate() {
        let max = w.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        rows.push(vec![
            k.to_string(),
            num(t),
            num(enstrophy(w)),
            num(max),
            census(w, grid, CENSUS_FRACTION).to_string(),
        ]);
    }
    out.write_csv(name, "vortex-diagnostics/v1", &["snapshot", "time", "enstrophy", "max_vorticity", "census"], &rows)
}

/// Truth trajectory for `tag` read back from [`vortex_sim`] outputs.
pub fn load_vortex(dir: &Path, cfg: &ExperimentConfig, tag: InitTag) -> CliResult<(SnapshotMatrix, SnapshotMatrix)> {
    let stem = vortex_stem(tag);
    let omega = load_snapshots(&dir.join(format!("{stem}_omega.dlab")), "vortex-omega")?;
    let rhs = load_snapshots(&dir.join(format!("{stem}_rhs.dlab")), "vortex-rhs")?;
    let grid = cfg.vortex.grid()?;
    if omega.dims() != grid.dims() || rhs.dims() != grid.dims() || omega.n_cols() != rhs.n_cols() {
        return Err(CliError::Input(format!("{stem} files do not match a {}×{} grid", grid.ny, grid.nx)));
    }
    Ok((omega, rhs))
}

pub const NODE_CHECKPOINT: &str = "cnn_node.dlck";

/// Time between stored vortex snapshots.
pub fn snapshot_dt(cfg: &ExperimentConfig) -> f64 {
    cfg.vortex.dt * cfg.vortex.save_every as f64
}

pub fn train_node_stage(cfg: &ExperimentConfig, out: &mut OutputDir, omega: &SnapshotMatrix, rhs: &SnapshotMatrix) -> CliResult<(CnnRhs, NodeTrainReport)> {
    let grid = cfg.vortex.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(seeds::NODE_INIT));
    let mut net = CnnRhs::new(cfg.node.cnn.clone(), &grid, &mut rng)?;
    let report = train_node(
        &mut net,
        omega,
        rhs,
        snapshot_dt(cfg),
        &cfg.node.train,
        cfg.seed.wrapping_add(seeds::NODE_TRAIN),
    )?;
    info!("NODE training: final loss {:.4} of target variance", report.relative_loss());
    let mut m = meta("cnn-node", cfg);
    m.extra = serde_json::json!({
        "normalization": net.norm,
        "residual": "first convolution plain, later 3x3 convolutions residual",
        "final_loss": report.final_loss,
        "target_variance": report.target_variance,
    });
    out.write_checkpoint(NODE_CHECKPOINT, &net.params, m)?;
    let rows: Vec<Vec<String>> = report
        .history
        .iter()
        .map(|h| vec![h.epoch.to_string(), num(h.loss), num(h.loss / report.target_variance)])
        .collect();
    out.write_csv("node_loss.csv", "node-loss/v1", &["epoch", "loss", "relative_loss"], &rows)?;
    Ok((net, report))
}

pub fn load_node(path: &Path, cfg: &ExperimentConfig) -> CliResult<CnnRhs> {
    let (params, m) = io::load_checkpoint(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    expect_kind(&m, "cnn-node", path)?;
    let norm: Normalization = serde_json::from_value(m.extra["normalization"].clone())
        .map_err(|e| CliError::Input(format!("{}: normalization: {e}", path.display())))?;
    let grid = cfg.vortex.grid()?;
    CnnRhs::from_params(cfg.node.cnn.clone(), grid.ny, grid.nx, norm, params).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct NodePrediction {
    pub omega: SnapshotMatrix,
    pub rhs: SnapshotMatrix,
    pub l2: Vec<f64>,
    pub stopped_at: Option<usize>,
}

/// Predicted trajectory from the truth's first snapshot, padded with the last
/// finite state when the rollout diverged so the series stay aligned.
pub fn node_rollout(cfg: &ExperimentConfig, out: &mut OutputDir, net: &CnnRhs, tag: InitTag, truth: &SnapshotMatrix) -> CliResult<NodePrediction> {
    let grid = cfg.vortex.grid()?;
    let traj = rollout_node(net, &grid, truth.column(0), cfg.vortex.dt, cfg.vortex.n_steps(), cfg.vortex.save_every)?;
    let mut omega = traj.omega;
    let mut rhs = traj.rhs;
    while omega.n_cols() < truth.n_cols() {
        let last = omega.column(omega.n_cols() - 1).to_vec();
        let last_rhs = rhs.column(rhs.n_cols() - 1).to_vec();
        omega.push(&last)?;
        rhs.push(&last_rhs)?;
    }
    let l2 = l2_error_series(&omega, truth)?;
    let stem = format!("node_{}", tag.name().replace('-', "_"));
    let mut m = meta("node-omega", cfg);
    m.extra = serde_json::json!({ "init": tag.name(), "stopped_at": traj.stopped_at });
    out.write_snapshots(&format!("{stem}_omega"), &omega, m.clone())?;
    m.kind = "node-rhs".into();
    out.write_snapshots(&format!("{stem}_rhs"), &rhs, m)?;
    let sdt = snapshot_dt(cfg);
    let rows: Vec<Vec<String>> = l2
        .iter()
        .zip(truth.columns())
        .enumerate()
        .map(|(k, (&e, t))| {
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            vec![k.to_string(), num(k as f64 * sdt), num(e), num(norm)]
        })
        .collect();
    out.write_csv(&format!("{stem}_l2.csv"), "l2-error/v1", &["snapshot", "time", "l2_error", "truth_l2_norm"], &rows)?;
    Ok(NodePrediction {
        omega,
        rhs,
        l2,
        stopped_at: traj.stopped_at,
    })
}

// ---------------------------------------------------------------- windows

#[derive(Debug, Clone, Serialize)]
pub struct WindowSummary {
    pub label: String,
    pub windows: usize,
    pub truth_degraded: usize,
    pub truth_revisits: usize,
    pub truth_winding: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_degraded: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_revisits: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_winding: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_point_set_distance: Option<f64>,
}

fn write_points(out: &mut OutputDir, name: &str, traj: &PointTrajectory) -> CliResult<()> {
    let mut rows = Vec::new();
    for w in &traj.windows {
        for (s, (&i, &(x, y))) in w.indices.iter().zip(&w.coords).enumerate() {
            rows.push(vec![
                w.window.to_string(),
                w.start.to_string(),
                s.to_string(),
                i.to_string(),
                num(x),
                num(y),
                w.rank.to_string(),
                w.degraded.to_string(),
            ]);
        }
    }
    out.write_csv(
        name,
        "window-points/v1",
        &["window", "start", "slot", "grid_index", "x", "y", "rank", "degraded"],
        &rows,
    )
}

fn write_divergence(out: &mut OutputDir, name: &str, report: &DivergenceReport, stride: usize) -> CliResult<()> {
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let rows: Vec<Vec<String>> = report
        .point_set
        .iter()
        .zip(&report.slot_displacement)
        .enumerate()
        .map(|(k, (&d, slots))| {
            vec![
                k.to_string(),
                (k * stride).to_string(),
                num(d),
                opt(slots.first().copied().flatten()),
                opt(slots.get(1).copied().flatten()),
            ]
        })
        .collect();
    out.write_csv(
        name,
        "window-divergence/v1",
        &["window", "start", "point_set_distance", "slot0_displacement", "slot1_displacement"],
        &rows,
    )
}

/// Window trajectories of a truth stream and optionally a model stream.
pub fn windowed_deim(
    cfg: &ExperimentConfig,
    out: &mut OutputDir,
    label: &str,
    truth_rhs: &SnapshotMatrix,
    model_rhs: Option<&SnapshotMatrix>,
) -> CliResult<(WindowSummary, Option<DivergenceReport>)> {
    let grid = cfg.vortex.grid()?;
    let spec = &cfg.window;
    let truth = trajectories(truth_rhs, &grid, spec)?;
    write_points(out, &format!("windowed_{label}_truth_points.csv"), &truth)?;
    let mut summary = WindowSummary {
        label: label.to_string(),
        windows: truth.windows.len(),
        truth_degraded: truth.degraded_windows(),
        truth_revisits: revisit_count(&truth, 0),
        truth_winding: winding(&truth, 0, &grid).last().copied().unwrap_or(0.0),
        model_degraded: None,
        model_revisits: None,
        model_winding: None,
        mean_point_set_distance: None,
    };
    let mut divergence = None;
    if let Some(model_rhs) = model_rhs {
        if model_rhs.n_cols() != truth_rhs.n_cols() {
            return Err(CliError::Input(format!(
                "model stream has {} snapshots, truth has {}",
                model_rhs.n_cols(),
                truth_rhs.n_cols()
            )));
        }
        let model = trajectories(model_rhs, &grid, spec)?;
        write_points(out, &format!("windowed_{label}_model_points.csv"), &model)?;
        let report = compare_trajectories(&truth, &model, &grid)?;
        write_divergence(out, &format!("windowed_{label}_divergence.csv"), &report, spec.stride)?;
        summary.model_degraded = Some(model.degraded_windows());
        summary.model_revisits = Some(revisit_count(&model, 0));
        summary.model_winding = winding(&model, 0, &grid).last().copied();
        summary.mean_point_set_distance = Some(report.point_set.iter().sum::<f64>() / report.point_set.len() as f64);
        divergence = Some(report);
    }
    out.write_json(&format!("windowed_{label}_summary.json"), &summary)?;
    Ok((summary, divergence))
}

// ---------------------------------------------------------------- all

/// Runs every stage in dependency order into one directory.
pub fn reproduce_all(cfg: &ExperimentConfig, out: &mut OutputDir) -> CliResult<()> {
    let fom = burgers_fom(cfg, out)?;
    deim_rom(cfg, out, &fom, RomMode::Full)?;
    deim_rom(cfg, out, &fom, RomMode::Static)?;
    let (net, _) = train_adaptive(cfg, out, &fom)?;
    rom_adaptive(cfg, out, &fom, &net)?;
    let mut truths = Vec::new();
    for tag in InitTag::ALL {
        let run = vortex_sim(cfg, out, tag)?;
        truths.push((tag, run));
    }
    let train_run = &truths
        .iter()
        .find(|(t, _)| *t == cfg.node.train_init)
        .expect("every tag is simulated")
        .1;
    let (cnn, _) = train_node_stage(cfg, out, &train_run.omega, &train_run.rhs)?;
    for (tag, run) in &truths {
        let pred = node_rollout(cfg, out, &cnn, *tag, &run.omega)?;
        windowed_deim(cfg, out, &tag.name().replace('-', "_"), &run.rhs, Some(&pred.rhs))?;
    }
    Ok(())
}


/// Right-hand-side stream from either the solver or a NODE rollout.
pub fn load_any_rhs(path: &Path) -> CliResult<SnapshotMatrix> {
    let (s, m) = io::load_snapshots(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if m.kind != "vortex-rhs" && m.kind != "node-rhs" {
        return Err(CliError::Input(format!("{} holds '{}', not a right-hand-side stream", path.display(), m.kind)));
    }
    Ok(s)
}
