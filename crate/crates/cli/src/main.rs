//! `asgm`: forward visualization, training, sampling, SDEdit and prior
//! calibration for anisotropic SPDE score models.

use asgm_cli::{run, CliError, Command, RunConfig};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "asgm", version, about = "Anisotropic SPDE score generative modeling on pixel grids")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `seed`
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Caps the worker count; outputs do not depend on it
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overrides `out`
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Montage of drift and noise configurations at five times
    Forward,
    /// Denoising score matching; writes a checkpoint and loss curve
    Train,
    /// Predictor-corrector sampling from the prior
    Sample,
    /// Guided generation from noised stroke images
    Sdedit,
    /// Fits the prior law of X_T
    CalibratePrior,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Forward => Command::Forward,
            Cmd::Train => Command::Train,
            Cmd::Sample => Command::Sample,
            Cmd::Sdedit => Command::Sdedit,
            Cmd::CalibratePrior => Command::CalibratePrior,
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let cmd = Command::from(cli.command);
    log::info!("running {} into {}", cmd.name(), cfg.out.display());
    pool.install(|| run(cmd, &cfg))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ASGM_LOG", "error")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("asgm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
