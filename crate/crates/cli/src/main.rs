use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stablab_cli::error::EXIT_OK;
use stablab_cli::output::to_json_pretty;
use stablab_cli::{load_inputs, CliError, Command, ExperimentConfig, Invocation};

#[derive(Parser)]
#[command(name = "stablab", version, about = "SGD stability experiments and bound calculator")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Coupled-run stability experiment with every bound variant.
    Stability(Common),
    /// Bounds along the warm starts of a pretraining run.
    WarmStartSweep(Common),
    /// Pick the source parameters with the smallest bound.
    TransferSelect(Common),
    /// Evaluate all bounds on a StabilityInputs JSON file.
    ComputeBounds {
        #[command(flatten)]
        common: OptionalConfig,
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
    /// Write a synthetic dataset as CSV.
    GenData(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    rest: Shared,
}

#[derive(Args)]
struct OptionalConfig {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    rest: Shared,
}

#[derive(Args)]
struct Shared {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Validate and print the plan without writing anything.
    #[arg(long)]
    dry_run: bool,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (command, config, inputs, shared) = match cli.command {
        Sub::Stability(c) => (Command::Stability, Some(c.config), None, c.rest),
        Sub::WarmStartSweep(c) => (Command::WarmStartSweep, Some(c.config), None, c.rest),
        Sub::TransferSelect(c) => (Command::TransferSelect, Some(c.config), None, c.rest),
        Sub::GenData(c) => (Command::GenData, Some(c.config), None, c.rest),
        Sub::ComputeBounds { common, inputs } => (Command::ComputeBounds, common.config, inputs, common.rest),
    };
    let config = config.map(|p| ExperimentConfig::load(&p)).transpose()?;
    let inputs = inputs.map(|p| load_inputs(&p)).transpose()?;
    let inv = Invocation::new(command, config)
        .with_seed(shared.seed)
        .with_inputs(inputs);
    if shared.dry_run {
        let mut plan = inv.plan()?;
        plan["out"] = serde_json::Value::String(shared.out.display().to_string());
        print!("{}", to_json_pretty(&plan));
        return Ok(());
    }
    let outputs = inv.run()?;
    outputs.write_to(&shared.out)?;
    for name in outputs.names() {
        println!("{}", shared.out.join(name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("stablab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
