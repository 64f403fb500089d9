use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use corrlab::{run, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(name = "corrlab", version, about = "Correspondence pruning lab")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the train, val and test splits.
    Generate(Common),
    /// Train and keep the best-validation checkpoint.
    Train(Common),
    /// Score the checkpoint and RANSAC on the test split.
    Eval(Common),
    /// Train and test the six module combinations.
    Ablate(Common),
    /// Compare analytic and numeric gradients of every block.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// N=2000, d=128, m=500.
    #[arg(long)]
    paper_scale: bool,
    /// Dotted `key=value` overrides, applied last.
    overrides: Vec<String>,
}

fn configure(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if c.paper_scale {
        cfg.apply_paper_scale();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    for o in &c.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, common) = match &cli.command {
        Cmd::Generate(c) => (Command::Generate, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Ablate(c) => (Command::Ablate, c),
        Cmd::Gradcheck(c) => (Command::Gradcheck, c),
    };
    let mut stdout = std::io::stdout().lock();
    match configure(common).and_then(|cfg| run(command, &cfg, &mut stdout)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
