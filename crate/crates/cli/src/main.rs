//! `persona-lab`: corpus generation, training, strategy probes, evaluation,
//! sampling and fader sweeps from one binary.

mod commands;
mod config;
mod data;
mod failure;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use persona_lab::objective::Strategy;
use persona_lab::pipeline::Split;

#[derive(Debug, Parser)]
#[command(name = "persona-lab", version, about = "Dual-latent persona dialogue generator laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic persona corpus directory.
    Synth(SynthArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Train one model per strategy from shared initial weights.
    Probe(ProbeArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Sample responses for a context.
    Generate(GenerateArgs),
    /// Decode at the eleven fader values 0.0 to 1.0.
    Sweep(SweepArgs),
    /// Line-based conversation with a checkpoint.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory; defaults to `<run root>/corpus-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sparse_ratio: Option<f64>,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    descriptions: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    dev_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

/// Flags shared by `train` and `probe`; each overrides its config key.
#[derive(Debug, Args)]
struct RunFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    val_limit: Option<usize>,
    #[arg(long)]
    podi_lambda: Option<f64>,
    #[arg(long)]
    eval_contexts: Option<usize>,
    /// Run directory name under the run root.
    #[arg(long)]
    name: Option<String>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Continue from the final weights and step count of an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Comma-separated strategies, e.g. `none,kla,bow,podi`.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
}

/// Flags shared by the checkpoint-reading commands.
#[derive(Debug, Args)]
struct CheckpointFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the `config.json` beside the checkpoint, if any.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Fixed fader value in [0, 1].
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    ckpt: CheckpointFlags,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Contexts used for the generation metrics.
    #[arg(long)]
    contexts: Option<usize>,
    /// Report JSON path; defaults to `eval-<split>.json` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    ckpt: CheckpointFlags,
    /// Utterances separated by `|`, oldest first; the last one is the user's.
    #[arg(long, conflicts_with = "index")]
    context: Option<String>,
    /// Take the context of this example of `--split`.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 3)]
    n: usize,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    ckpt: CheckpointFlags,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Sweep this single example and write one row per fader value.
    #[arg(long, conflicts_with = "contexts")]
    index: Option<usize>,
    /// Sweep the first N examples and write per-value means.
    #[arg(long)]
    contexts: Option<usize>,
    /// CSV path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ChatArgs {
    #[command(flatten)]
    ckpt: CheckpointFlags,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Probe(a) => commands::probe(a),
        Command::Eval(a) => commands::eval(a),
        Command::Generate(a) => commands::generate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Chat(a) => commands::chat(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("persona-lab: {f}");
            f.exit_code()
        }
    }
}
