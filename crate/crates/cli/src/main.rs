use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use krflab_cli::commands::{self, CliError, Ctx};
use krflab_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "krflab", version, about = "Kähler-Ricci flow experiments on the Riemann sphere")]
struct Cli {
    /// Configuration file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `ensemble.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `grid.modes`.
    #[arg(long, global = true)]
    modes: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the flow, writing diagnostics and snapshots.
    Simulate,
    /// Bergman kernel table of a snapshot (or of the initial state).
    Bergman { snapshot: Option<PathBuf> },
    /// Run every estimate check and write the JSON report and plots.
    Verify,
    /// Scan the random ensemble for Bergman lower bounds.
    Ensemble,
    /// Green function from the pole of a snapshot (or of the initial state).
    Green { snapshot: Option<PathBuf> },
    /// Coupled W-entropy series and the μ estimate.
    Entropy,
    /// Plots from an existing diagnostics.csv.
    Plot,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(modes) = cli.modes {
        cfg.modes = modes;
    }
    cfg.revalidate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match load_config(&cli) {
        // an unreadable config file is a configuration error, not an IO failure
        Err(CliError::Io(e)) => {
            return Err(CliError::Config(krflab_cli::config::ConfigError { line: 0, message: e.to_string() }))
        }
        other => other?,
    };
    let ctx = Ctx { cfg, quiet: cli.quiet };
    match &cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Bergman { snapshot } => commands::bergman(&ctx, snapshot.as_deref()),
        Command::Verify => commands::verify(&ctx),
        Command::Ensemble => commands::ensemble(&ctx),
        Command::Green { snapshot } => commands::green(&ctx, snapshot.as_deref()),
        Command::Entropy => commands::entropy(&ctx),
        Command::Plot => commands::plot(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("KRFLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("krflab: KRFLAB_THREADS ignored: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("krflab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
