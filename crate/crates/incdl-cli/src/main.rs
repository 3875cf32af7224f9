use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use incdl::builtins::BuiltinRegistry;
use incdl::lang::{parse_program, reject_unsupported, stratify, Program};
use incdl::ra::{compile, constant_fold, CardinalityEstimates, RaPlan};

/// Incremental Datalog analysis engine.
#[derive(Parser)]
#[command(name = "incdl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile an analysis and print its relational-algebra plan.
    DumpPlan {
        /// Path to the analysis rules (.idl).
        analysis: PathBuf,
        /// Print the raw plan, skipping constant folding.
        #[arg(long)]
        no_fold: bool,
    },
}

/// Parse, stratify, and compile an analysis file into a plan.
fn load_plan(path: &PathBuf, fold: bool) -> anyhow::Result<(Program, RaPlan)> {
    let source = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let program = parse_program(&source)
        .map_err(|e| anyhow::anyhow!("{e}"))
        .with_context(|| format!("parsing {}", path.display()))?;

    let unsupported = reject_unsupported(&program);
    if !unsupported.is_empty() {
        let lines: Vec<&str> = unsupported.iter().map(|u| u.message.as_str()).collect();
        bail!("unsupported constructs:\n{}", lines.join("\n"));
    }

    let report = stratify(&program);
    let plan = compile(
        &program,
        &report,
        &CardinalityEstimates::default(),
        &BuiltinRegistry::default(),
    )?;
    let plan = if fold { constant_fold(&plan) } else { plan };
    Ok((program, plan))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::DumpPlan { analysis, no_fold } => {
            let (_, plan) = load_plan(&analysis, !no_fold)?;
            print!("{}", plan.dump());
        }
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        return std::process::ExitCode::FAILURE;
    }
    std::process::ExitCode::SUCCESS
}
