use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use deimlab::rom::Truncation;
use deimlab::vortex::InitTag;
use deimlab_cli::pipeline::{self, Format, OutputDir, RomMode};
use deimlab_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "deimlab", version, about = "Reduced-order modelling experiments")]
struct Cli {
    /// TOML experiment configuration; must set `seed` unless `--seed` is given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "binary")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Burgers full-order run: state and nonlinear snapshots, analytic error.
    BurgersFom,
    /// POD basis and energy spectrum of a snapshot file.
    Pod {
        #[arg(long)]
        input: PathBuf,
        /// Number of modes to keep.
        #[arg(long, conflicts_with = "energy")]
        modes: Option<usize>,
        /// Cumulative energy fraction to reach instead of a fixed count.
        #[arg(long)]
        energy: Option<f64>,
    },
    /// Galerkin ROM with classical DEIM or the full nonlinear term.
    DeimRom {
        /// Directory holding the burgers-fom outputs (defaults to --out).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "static")]
        mode: RomMode,
    },
    /// Trains the adaptive point sampler.
    TrainAdaptive {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// ROM rollout with a trained adaptive sampler.
    RomAdaptive {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Vortex solver run for one initial configuration.
    VortexSim {
        #[arg(long, default_value = "horizontal")]
        init: InitTag,
    },
    /// Trains the convolutional NODE on a vortex-sim trajectory.
    TrainNode {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// NODE rollout and L2 error against the vortex-sim truth.
    NodeRollout {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "horizontal")]
        init: InitTag,
    },
    /// Windowed DEIM point trajectories of a truth stream, optionally compared
    /// with a model stream.
    WindowedDeim {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        label: String,
    },
    /// Every stage in order.
    ReproduceAll,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BurgersFom => "burgers-fom",
            Command::Pod { .. } => "pod",
            Command::DeimRom { .. } => "deim-rom",
            Command::TrainAdaptive { .. } => "train-adaptive",
            Command::RomAdaptive { .. } => "rom-adaptive",
            Command::VortexSim { .. } => "vortex-sim",
            Command::TrainNode { .. } => "train-node",
            Command::NodeRollout { .. } => "node-rollout",
            Command::WindowedDeim { .. } => "windowed-deim",
            Command::ReproduceAll => "reproduce-all",
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.seed) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            // A command-line seed satisfies the mandatory key.
            match (ExperimentConfig::parse(&text), cli.seed) {
                (Ok(c), _) => c,
                (Err(_), Some(seed)) => ExperimentConfig::parse(&format!("seed = {seed}\n{text}"))?,
                (Err(e), None) => return Err(e),
            }
        }
        (None, Some(seed)) => ExperimentConfig::with_seed(seed),
        (None, None) => return Err(CliError::Config("a seed is required (--seed or `seed` in --config)".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let mut out = OutputDir::new(&cli.out, cli.format)?;
    let input_dir = |p: &Option<PathBuf>| p.clone().unwrap_or_else(|| cli.out.clone());
    match &cli.command {
        Command::BurgersFom => {
            pipeline::burgers_fom(&cfg, &mut out)?;
        }
        Command::Pod { input, modes, energy } => {
            let truncation = match (modes, energy) {
                (Some(m), _) => Truncation::Modes(*m),
                (None, Some(e)) => Truncation::Energy(*e),
                (None, None) => Truncation::Modes(cfg.rom.modes),
            };
            pipeline::pod(&cfg, &mut out, input, truncation)?;
        }
        Command::DeimRom { input, mode } => {
            let fom = pipeline::load_fom(&input_dir(input), &cfg)?;
            let (_, report) = pipeline::deim_rom(&cfg, &mut out, &fom, *mode)?;
            println!(
                "{} ROM: {} nonlinear evaluations per step batch ({} per stage), mean MSE {:.6e}",
                report.mode, report.per_step_batch, report.per_stage, report.mean_mse
            );
        }
        Command::TrainAdaptive { input } => {
            let fom = pipeline::load_fom(&input_dir(input), &cfg)?;
            pipeline::train_adaptive(&cfg, &mut out, &fom)?;
        }
        Command::RomAdaptive { input, checkpoint } => {
            let fom = pipeline::load_fom(&input_dir(input), &cfg)?;
            let net = pipeline::load_sampler(checkpoint, &cfg)?;
            let (_, report) = pipeline::rom_adaptive(&cfg, &mut out, &fom, &net)?;
            println!(
                "adaptive ROM: {} nonlinear evaluations per step batch ({} per stage), mean MSE {:.6e}",
                report.per_step_batch, report.per_stage, report.mean_mse
            );
        }
        Command::VortexSim { init } => {
            pipeline::vortex_sim(&cfg, &mut out, *init)?;
        }
        Command::TrainNode { input } => {
            let (omega, rhs) = pipeline::load_vortex(&input_dir(input), &cfg, cfg.node.train_init)?;
            pipeline::train_node_stage(&cfg, &mut out, &omega, &rhs)?;
        }
        Command::NodeRollout { input, checkpoint, init } => {
            let (truth, _) = pipeline::load_vortex(&input_dir(input), &cfg, *init)?;
            let net = pipeline::load_node(checkpoint, &cfg)?;
            pipeline::node_rollout(&cfg, &mut out, &net, *init, &truth)?;
        }
        Command::WindowedDeim { truth, model, label } => {
            let t = pipeline::load_any_rhs(truth)?;
            let m = model.as_deref().map(pipeline::load_any_rhs).transpose()?;
            pipeline::windowed_deim(&cfg, &mut out, label, &t, m.as_ref())?;
        }
        Command::ReproduceAll => pipeline::reproduce_all(&cfg, &mut out)?,
    }
    out.finish(cli.command.name(), &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{} failed: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
