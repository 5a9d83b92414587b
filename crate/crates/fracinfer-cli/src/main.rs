use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fracinfer_cli::commands::{self, Outcome};
use fracinfer_cli::config::{HurstSection, RunConfig};
use fracinfer_cli::CliError;

#[derive(Parser)]
#[command(name = "fracinfer", version, about = "Score-based estimation for SDEs driven by fractional Brownian motion")]
struct Cli {
    /// worker threads (default: all cores); results do not depend on it
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// log level: error, warn, info, debug
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// built-in experiment: ou, ou-fast or linear2d
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate observations of a model
    Simulate {
        #[command(flatten)]
        common: Common,
        /// also write the driving fBm
        #[arg(long)]
        fbm: bool,
    },
    /// Robbins-Monro estimation on a CSV of observations or on simulated replications
    Estimate {
        #[command(flatten)]
        common: Common,
        /// observations CSV with columns t, y1..ym
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// R/S Hurst estimate of a CSV column, optionally per group
    Hurst {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        column: Option<String>,
        #[arg(long)]
        groups: Option<usize>,
    },
    /// Euler grid-refinement study against a fine reference
    RateStudy {
        #[command(flatten)]
        common: Common,
    },
}

fn base_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if c.preset.is_some() {
        cfg.preset = c.preset.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if c.out.is_some() {
        cfg.output = c.out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Simulate { common, fbm } => {
            let mut cfg = base_config(&common)?;
            cfg.simulate.include_fbm |= fbm;
            commands::simulate(&cfg)
        }
        Command::Estimate { common, input, replications, iterations } => {
            let mut cfg = base_config(&common)?;
            if input.is_some() {
                cfg.estimate.input = input;
            }
            if replications.is_some() {
                cfg.experiment.replications = replications;
            }
            if iterations.is_some() {
                cfg.experiment.iterations = iterations;
            }
            commands::estimate(&cfg)
        }
        Command::Hurst { common, input, column, groups } => {
            let mut cfg = base_config(&common)?;
            if let Some(input) = input {
                let h = cfg.hurst.get_or_insert_with(|| {
                    toml::from_str::<HurstSection>("input = \"\"\ncolumn = \"\"").expect("defaults")
                });
                h.input = input;
            }
            if let Some(h) = cfg.hurst.as_mut() {
                if let Some(c) = column {
                    h.column = c;
                }
                if let Some(g) = groups {
                    h.groups = g;
                }
            }
            commands::hurst(&cfg)
        }
        Command::RateStudy { common } => commands::rate(&base_config(&common)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cannot set up {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(out) => {
            println!("{}", out.summary);
            for p in &out.outputs {
                println!("wrote {}", p.display());
            }
            ExitCode::from(out.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
