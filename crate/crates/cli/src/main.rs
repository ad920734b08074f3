use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod verify;

/// Worker threads for dataset generation and the parameter search.
pub const WORKERS_ENV: &str = "SOFTCORR_WORKERS";

/// Bad input from the user: exit code 1.
#[derive(Debug)]
pub struct UserError(pub String);

impl UserError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Parser, Debug)]
#[command(name = "softcorr", version, about = "FEM replay, registration, stiffness search and learned surface correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `section.name=value`, applied after the file. Repeatable.
    #[arg(long = "key", alias = "set", value_name = "SECTION.NAME=VALUE")]
    pub keys: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    Gen(Common),
    /// Replay one sequence at a given modulus and score it.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sequence: String,
        /// Young's modulus in Pa; defaults to `material.young_modulus`.
        #[arg(long)]
        modulus: Option<String>,
    },
    /// Fit the camera registration from fiducials and refine it with ICP.
    Register {
        #[command(flatten)]
        common: Common,
        /// Sequence whose first cloud drives the ICP refinement.
        #[arg(long)]
        sequence: Option<String>,
    },
    /// Two-stage Young's modulus search.
    Search(Common),
    /// Train a correction network for one simulated modulus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["2d", "3d"])]
        net: String,
        #[arg(long)]
        modulus: String,
    },
    /// Score trained networks on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "none", value_parser = ["none", "top-layer"])]
        feedback: String,
    },
    /// Run the built-in property oracles.
    Verify {
        /// Random draws per oracle.
        #[arg(long, default_value_t = 200)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_workers() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| UserError::new(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_workers()?;
    match cli.command {
        Command::Gen(c) => commands::gen(&c),
        Command::Simulate { common, sequence, modulus } => commands::simulate(&common, &sequence, modulus.as_deref()),
        Command::Register { common, sequence } => commands::register(&common, sequence.as_deref()),
        Command::Search(c) => commands::search(&c),
        Command::Train { common, net, modulus } => commands::train(&common, &net, &modulus),
        Command::Eval { common, feedback } => commands::eval(&common, &feedback),
        Command::Verify { draws, seed } => verify::run(draws, seed),
    }
}

fn is_user_error(e: &anyhow::Error) -> bool {
    use softcorr_core::Error as E;
    e.chain().any(|c| {
        c.is::<UserError>()
            || matches!(
                c.downcast_ref::<E>(),
                Some(E::Config(_) | E::Argument(_) | E::Script(_) | E::Parse { .. } | E::Io { .. })
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_user_error(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
