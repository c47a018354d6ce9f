use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vidpred_cli::commands::{self, BenchArgs, EvalArgs, FlowArgs, GenDataArgs, SampleArgs, TrainArgs};
use vidpred_cli::CliResult;

#[derive(Parser, Debug)]
#[command(name = "vidpred", version, about = "Recurrent video prediction GAN at desk scale")]
struct Cli {
    /// Force deterministic execution (fixed reduction order and seeds).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic moving-shapes dataset.
    GenData(GenDataArgs),
    /// Train or resume a model.
    Train(TrainArgs),
    /// Compute FVD, IS, copy-baseline FVD and best-of-ℓ SSIM curves.
    Eval(EvalArgs),
    /// Render a grid of conditioned samples.
    Sample(SampleArgs),
    /// Render motion fields read from the predicted warp kernels.
    Flow(FlowArgs),
    /// Time training steps for one or more decompositions.
    Bench(BenchArgs),
}

fn run(cli: &Cli) -> CliResult<serde_json::Value> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a, cli.deterministic),
        Command::Eval(a) => commands::eval(a),
        Command::Sample(a) => commands::sample(a),
        Command::Flow(a) => commands::flow(a),
        Command::Bench(a) => commands::bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
