use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gossip_bmuf::experiment::{self, CommandOptions, ExperimentSpec};

#[derive(Parser)]
#[command(name = "gossip-bmuf", version, about = "Simulate gossip and BMUF model averaging on a ring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every config in the spec and write per-run CSV and JSON summaries.
    Run(Common),
    /// Run, then write one comparison table per group.
    Compare(Common),
    /// Check Simple-MA trials against the convergence bound.
    BoundCheck(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory, overriding the spec.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every run, overriding the spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Trials per run, overriding the spec.
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn options(&self) -> CommandOptions {
        CommandOptions {
            out: self.out.clone(),
            seed: self.seed,
            trials: self.trials,
            threads: self.threads,
        }
    }
}

fn execute(command: &Command) -> gossip_bmuf::Result<u8> {
    match command {
        Command::Run(c) => {
            let spec = ExperimentSpec::load(&c.spec)?;
            for out in experiment::cmd_run(&spec, &c.options())? {
                let s = &out.summary;
                println!(
                    "{}: final loss {:.6e}, averaged-model loss {:.6e}, {} bytes -> {}",
                    s.label,
                    s.final_loss,
                    s.final_avg_model_loss,
                    s.total_bytes,
                    out.csv_path.display()
                );
            }
            Ok(0)
        }
        Command::Compare(c) => {
            let spec = ExperimentSpec::load(&c.spec)?;
            let (_, comparisons) = experiment::cmd_compare(&spec, &c.options())?;
            for cmp in &comparisons {
                print!("{}", cmp.to_table());
            }
            Ok(0)
        }
        Command::BoundCheck(c) => {
            let spec = ExperimentSpec::load(&c.spec)?;
            let outputs = experiment::cmd_bound_check(&spec, &c.options())?;
            let mut all = true;
            for out in &outputs {
                println!("[{}]", out.label);
                print!("{}", out.report.to_table(10));
                all &= out.passed();
            }
            Ok(if all { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(experiment::exit_code(&err) as u8)
        }
    }
}
