use std::path::PathBuf;

use clap::{Parser, Subcommand};
use metakit_cli::{execute, Command};

#[derive(Parser)]
#[command(
    name = "metakit",
    version,
    about = "Meta-analysis from declarative configs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Io {
    /// YAML or JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compute effect sizes and write the augmented CSV.
    Es(Io),
    /// Fit the configured model and write the result bundle.
    Fit(Io),
    /// Write the configured plots only.
    Plot(Io),
    /// Publication-bias tables.
    Pubbias(Io),
    /// Print an equivalent metafor script.
    EmitRCode(Io),
}

fn main() {
    let cli = Cli::parse();
    let (cmd, io) = match cli.cmd {
        Cmd::Es(io) => (Command::Es, io),
        Cmd::Fit(io) => (Command::Fit, io),
        Cmd::Plot(io) => (Command::Plot, io),
        Cmd::Pubbias(io) => (Command::Pubbias, io),
        Cmd::EmitRCode(io) => (Command::EmitRCode, io),
    };
    std::process::exit(execute(cmd, &io.config, &io.out));
}
