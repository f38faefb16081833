use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use textgan_cli::{CliError, Common};

#[derive(Parser)]
#[command(name = "textgan", version, about = "Multi-branch text-to-image GAN on a procedural shapes corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key = value config file with [section] headers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sets every `seed` key of the command's configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config key, e.g. --set train.steps=200. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural corpus.
    GenData(CommonArgs),
    /// Pretrain the text and image encoders and the category head.
    Pretrain(CommonArgs),
    /// Train a GAN variant.
    Train(CommonArgs),
    /// Score checkpoints on the held-out split.
    Eval(CommonArgs),
    /// Export a grid of K samples per caption.
    Sample(CommonArgs),
    /// Export word attention overlays for a caption.
    Attention(CommonArgs),
    /// Render a caption and a one-word edit from the same noise.
    EditDemo(CommonArgs),
}

fn run(command: Command) -> anyhow::Result<()> {
    let (name, args, f): (&str, CommonArgs, fn(&Common) -> Result<(), CliError>) = match command {
        Command::GenData(a) => ("gen-data", a, textgan_cli::cmd_gen_data),
        Command::Pretrain(a) => ("pretrain", a, textgan_cli::cmd_pretrain),
        Command::Train(a) => ("train", a, textgan_cli::cmd_train),
        Command::Eval(a) => ("eval", a, textgan_cli::cmd_eval),
        Command::Sample(a) => ("sample", a, textgan_cli::cmd_sample),
        Command::Attention(a) => ("attention", a, textgan_cli::cmd_attention),
        Command::EditDemo(a) => ("edit-demo", a, textgan_cli::cmd_edit_demo),
    };
    let common = Common { config: args.config, out: args.out, seed: args.seed, overrides: args.overrides };
    f(&common).with_context(|| format!("textgan {name} failed"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
