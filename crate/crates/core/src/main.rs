use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vaet::cli::{self, Command, EpsilonGrid, Overrides, DEFAULT_OUT_DIR, OUT_DIR_ENV};
use vaet::Error;

#[derive(Parser)]
#[command(name = "vaet", version, about = "Stochastic simulator for vibrationally assisted electron transfer")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; keys override the recipe.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named figure recipe.
    #[arg(long)]
    recipe: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Trajectories per ensemble (and per sweep point).
    #[arg(long)]
    traj: Option<usize>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one ensemble and write the population trace.
    Simulate(Common),
    /// Scan one or two parameters and write the rate map.
    Sweep(Common),
    /// Marcus–Jortner rate over a bias grid.
    Mj {
        #[command(flatten)]
        common: Common,
        /// Bias grid `min:max:n` in eV.
        #[arg(long)]
        epsilon_grid: Option<String>,
    },
    /// Bath correlation function and memory kernels.
    Kernels(Common),
    /// Empirical noise covariance against the quadrature.
    NoiseSelftest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Parse and check a configuration.
    ValidateConfig(Common),
}

fn run(cli: Cli) -> Result<bool, Error> {
    let mut ov = Overrides::default();
    let (cmd, common) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::Mj { common, epsilon_grid } => {
            ov.epsilon_grid = epsilon_grid.as_deref().map(EpsilonGrid::parse).transpose()?;
            (Command::Mj, common)
        }
        Cmd::Kernels(c) => (Command::Kernels, c),
        Cmd::NoiseSelftest { common, paths } => {
            ov.paths = paths;
            (Command::NoiseSelftest, common)
        }
        Cmd::ValidateConfig(c) => (Command::ValidateConfig, c),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    let text = match &common.config {
        Some(path) => Some(std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?),
        None => None,
    };
    if common.recipe.is_none() && text.is_none() {
        return Err(Error::Config("give --config FILE, --recipe NAME or both".into()));
    }
    let mut cfg = cli::load_config(common.recipe.as_deref(), text.as_deref())?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(n) = common.traj {
        cfg.set_traj(n);
    }
    let out = common
        .out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let report = cli::execute(cmd, &cfg, &out, &ov)?;
    // A closed pipe (`| head`) is not an error worth reporting.
    let mut stdout = std::io::stdout().lock();
    for line in &report.lines {
        let _ = writeln!(stdout, "{line}");
    }
    for f in &report.files {
        let _ = writeln!(stdout, "wrote {}", f.display());
    }
    Ok(!report.check_failed)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("{}", cli::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
