//! Command-line entry point; subcommand dispatch and exit-code mapping live
//! here, everything else in the library modules.

use clap::{Parser, Subcommand};

use metareid_cli::commands::{cmd_eval, cmd_gen_data, cmd_train, EvalArgs, GenDataArgs, TrainArgs};
use metareid_cli::experiment::{cmd_experiment, ExperimentArgs};
use metareid_cli::gradcheck::{cmd_gradcheck, GradcheckArgs};

#[derive(Parser)]
#[command(
    name = "metareid",
    version,
    about = "Bilevel retrieval training with feature-statistics mixing on synthetic \
             multi-domain data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain retrieval dataset CSV.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoint, metrics, and the resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's held-out domain.
    Eval(EvalArgs),
    /// Verify gradients against finite differences and a closed form.
    Gradcheck(GradcheckArgs),
    /// Train three ablation arms across seeds and summarize the results.
    Experiment(ExperimentArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
