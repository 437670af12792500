use std::process::ExitCode;

use clap::{Parser, Subcommand};
use segsr::commands::{self, ConfigArgs, EvalArgs, InferArgs, SynthArgs, TrainArgs};

/// Stereo endoscopic super-resolution followed by instrument segmentation.
///
/// Failures print one line `segsr:error:<kind>: <message>` and exit nonzero.
#[derive(Parser, Debug)]
#[command(name = "segsr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic stereo pairs with masks in the dataset layout.
    Synth(SynthArgs),
    /// Train the stereo super-resolution network.
    TrainSr(TrainArgs),
    /// Train the segmentation network on SR (or HR) left views.
    TrainSeg(TrainArgs),
    /// Cross-validated PSNR/SSIM and IoU/Dice reports.
    Eval(EvalArgs),
    /// Super-resolve and/or segment a directory of stereo pairs.
    Infer(InferArgs),
    /// Print the fully materialized run configuration.
    Config(ConfigArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("segsr:error:usage: {first}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::TrainSr(a) => commands::train_sr_cmd(a),
        Command::TrainSeg(a) => commands::train_seg_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::Config(a) => commands::show_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("segsr:error:{}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
