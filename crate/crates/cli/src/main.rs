//! `mpflow`: phantom data generation, prior and encoder training, guided
//! reconstruction, evaluation and the oracle self-check.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 verification failure,
//! 3 numerical failure.

mod commands;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Arm;

#[derive(Parser)]
#[command(name = "mpflow", version, about = "Multi-modal posterior-guided rectified flow on synthetic phantoms")]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Run configuration as `key = value` lines; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overwrite existing artifacts instead of refusing.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render paired phantoms into <out_dir>/data with a manifest.
    GenData(Common),
    /// Train the rectified-flow prior on the training targets.
    TrainPrior(Common),
    /// Train the cross-modal encoders and decoders.
    PretrainPamri(Common),
    /// Reconstruct every test image, once per arm.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Extra arms next to `full`, comma separated. Components:
        /// no-pamri, no-noiseopt, no-dc; join with `+` to combine.
        #[arg(long, value_delimiter = ',', value_parser = commands::parse_arm)]
        ablate: Vec<Arm>,
        /// Only the first N test images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score every reconstruction arm against the ground truth.
    Evaluate(Common),
    /// Check the closed-form oracles, operators and integrator.
    VerifyOracle {
        /// Seed for the randomized checks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::TrainPrior(c) => commands::train_prior(&c),
        Command::PretrainPamri(c) => commands::pretrain_pamri(&c),
        Command::Reconstruct { common, ablate, limit } => commands::reconstruct(&common, &ablate, limit),
        Command::Evaluate(c) => commands::evaluate(&c),
        Command::VerifyOracle { seed } => match verify::run(seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if commands::is_numerical(&e) { 3 } else { 1 })
        }
    }
}
