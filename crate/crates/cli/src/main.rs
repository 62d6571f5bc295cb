use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunArgs;

#[derive(Parser, Debug)]
#[command(
    name = "multer",
    version,
    about = "Train and evaluate multi-level texture encoding networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model; writes model.bin, metrics.csv and summary.txt to --out.
    Train(RunArgs),
    /// Print the accuracy of a saved model on a test split.
    Eval(EvalArgs),
    /// Train one model per level-selection scheme and write ablation.csv.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks; exits 1 if any suite fails.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// `synth` or a dataset root; defaults to the data the model was trained on.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of consecutive seeds starting at the run seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seeds per case.
    #[arg(long, default_value_t = multer_core::gradcheck::DEFAULT_SEEDS)]
    pub seeds: u64,
    /// Run a single suite instead of all of them.
    #[arg(long)]
    pub suite: Option<String>,
    /// Append a suite with a deliberately wrong backward rule.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            commands::exit_code(&e)
        }
    }
}
