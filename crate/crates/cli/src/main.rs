use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperprompt_cli::{commands, exit_code, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "hyperprompt",
    version,
    about = "Multi-task hyper-prompt experiments on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set model.variant=share`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for initialization and training order.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/eval JSONL files for every task.
    GenData(Common),
    /// Train a model and write checkpoint, metrics and metadata.
    Train(Common),
    /// Evaluate a checkpoint on every task.
    Eval(Common),
    /// Train once per value of one configuration axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// prompt_len_enc, prompt_len_dec, placement or variant.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values, e.g. `0,2,6`.
        #[arg(long)]
        values: Option<String>,
    },
    /// Report parameter counts.
    CountParams(Common),
    /// Attention mass and entropy analysis of a checkpoint.
    Analyze(Common),
}

fn resolve(c: &Common, extra: Vec<String>) -> hyperprompt_core::Result<RunConfig> {
    let mut overrides = c.overrides.clone();
    overrides.extend(extra);
    RunConfig::resolve(c.config.as_deref(), &overrides, c.out.as_deref(), c.seed)
}

fn print(value: &impl Serialize) -> hyperprompt_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> hyperprompt_core::Result<()> {
    match cli.command {
        Command::GenData(c) => print(&commands::gen_data(&resolve(&c, vec![])?)?),
        Command::Train(c) => print(&commands::train(&resolve(&c, vec![])?)?),
        Command::Eval(c) => print(&commands::eval(&resolve(&c, vec![])?)?),
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let mut extra = Vec::new();
            if let Some(a) = axis {
                extra.push(format!("sweep.axis={a}"));
            }
            if let Some(v) = values {
                let items: Vec<serde_json::Value> = v
                    .split(',')
                    .map(|s| serde_json::from_str(s.trim()).unwrap_or_else(|_| s.trim().into()))
                    .collect();
                extra.push(format!("sweep.values={}", serde_json::Value::from(items)));
            }
            print(&commands::sweep(&resolve(&common, extra)?)?)
        }
        Command::CountParams(c) => print(&commands::count_params(&resolve(&c, vec![])?)?),
        Command::Analyze(c) => print(&commands::analyze(&resolve(&c, vec![])?)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
