mod config;
mod data;
mod evaluate;
mod plot;
mod run;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "polyembed", version, about = "Multilingual image-sentence retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multilingual corpus with pretrained vectors.
    GenData(data::GenDataArgs),
    /// Learn the shared latent vocabulary and freeze word assignments.
    PretrainLatent(train::PretrainArgs),
    /// Train the retrieval model and report test metrics.
    Train(train::TrainArgs),
    /// Evaluate a trained model in one of the retrieval modes.
    Eval(evaluate::EvalArgs),
    /// Cross-lingual consistency fusion.
    #[command(subcommand)]
    Clc(evaluate::ClcCommand),
    /// Vocabulary-reduction and translation baselines.
    Baseline(train::BaselineArgs),
    /// Hyperparameter sweeps.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// SVG charts from reduction reports and sweeps.
    Plot(plot::PlotArgs),
}

#[derive(Subcommand, Debug)]
enum SweepCommand {
    /// Vary the masked cross-language weight.
    Lambda2(train::SweepArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => data::gen_data(&a),
        Command::PretrainLatent(a) => train::pretrain(&a),
        Command::Train(a) => train::train_cmd(&a),
        Command::Eval(a) => evaluate::eval(&a),
        Command::Clc(evaluate::ClcCommand::Train(a)) => evaluate::clc_train(&a),
        Command::Clc(evaluate::ClcCommand::Eval(a)) => evaluate::clc_eval(&a),
        Command::Baseline(a) => train::baseline(&a),
        Command::Sweep(SweepCommand::Lambda2(a)) => train::sweep_lambda2(&a),
        Command::Plot(a) => plot::plot(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    // Subcommand words as typed, e.g. "clc train".
    let command = std::env::args()
        .skip(1)
        .take_while(|a| !a.starts_with('-'))
        .take(2)
        .collect::<Vec<_>>()
        .join(" ");
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // One JSON object on stderr: the failing command, the error and
            // its chain of causes.
            let diagnostic = serde_json::json!({
                "status": "error",
                "command": command,
                "error": err.to_string(),
                "causes": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{diagnostic}");
            ExitCode::FAILURE
        }
    }
}
