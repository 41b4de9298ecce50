use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fbsde::commands::{self, Job, RunError};
use fbsde::config::{Config, ControlMode};
use fbsde::output::{unix_now, RunManifest};
use fbsde_core::estimators::EstimatorId;

#[derive(Parser)]
#[command(name = "fbsde", version, about = "Minimum-variance estimators for nonlinear filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed for every random stream of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to `[output] dir`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a truth path and its observations.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        estimator: Option<String>,
    },
    /// Run one estimator on one or more observation records.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimator: Option<String>,
        #[arg(long)]
        particles: Option<usize>,
        /// Observation CSV to use instead of a simulated record.
        #[arg(long)]
        obs: Option<PathBuf>,
    },
    /// Variance of the backward process and its Dirichlet-form rate.
    Variance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimator: Option<String>,
        #[arg(long)]
        particles: Option<usize>,
    },
    /// Optimal control: HJB policy, certainty-equivalence runs or the LQG iteration.
    Control {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ControlMode>,
        #[arg(long)]
        particles: Option<usize>,
    },
    /// One estimator over several particle counts on the same record.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimator: Option<String>,
        /// Comma-separated particle counts.
        #[arg(long, value_delimiter = ',')]
        particles: Vec<usize>,
        #[arg(long)]
        obs: Option<PathBuf>,
    },
}

fn parse_estimator(s: Option<String>) -> Result<Option<EstimatorId>, RunError> {
    s.map(|s| EstimatorId::parse(&s)).transpose().map_err(|e| RunError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), RunError> {
    let started_at = unix_now();
    let (name, common, estimator, particles, mode, obs) = match cli.command {
        Command::Simulate { common, particles, estimator } => {
            ("simulate", common, estimator, particles.into_iter().collect(), None, None)
        }
        Command::Estimate { common, estimator, particles, obs } => {
            ("estimate", common, estimator, particles.into_iter().collect(), None, obs)
        }
        Command::Variance { common, estimator, particles } => {
            ("variance", common, estimator, particles.into_iter().collect(), None, None)
        }
        Command::Control { common, mode, particles } => {
            ("control", common, None, particles.into_iter().collect(), mode, None)
        }
        Command::Sweep { common, estimator, particles, obs } => ("sweep", common, estimator, particles, None, obs),
    };
    if particles.contains(&0) {
        return Err(RunError::Usage("particle counts must be positive".into()));
    }
    let cfg = Config::load(&common.config)?;
    let hash = cfg.hash();
    let out = common.out.or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut job = Job::new(cfg, common.seed, out.clone())?;
    job.estimator = parse_estimator(estimator)?;
    job.particles = particles;
    job.mode = mode;
    job.obs_file = obs;
    commands::prepare_out(&out)?;
    log::info!("{name}: config {hash}, seed {}", common.seed);
    let outputs = match name {
        "simulate" => commands::cmd_simulate(&job)?,
        "estimate" => commands::cmd_estimate(&job)?,
        "variance" => commands::cmd_variance(&job)?,
        "control" => commands::cmd_control(&job)?,
        _ => commands::cmd_sweep(&job)?,
    };
    for f in &outputs {
        log::info!("wrote {}", f.display());
    }
    let manifest = RunManifest {
        config_hash: hash,
        seed: common.seed,
        subcommand: name.to_string(),
        started_at,
        finished_at: unix_now(),
        outputs: outputs.iter().map(|f| f.strip_prefix(&out).unwrap_or(f).to_path_buf()).collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FBSDE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
