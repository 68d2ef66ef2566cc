use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ipa_harvest::harness::{self, Action, RunRequest};
use ipa_harvest::optimizer::Mode;

#[derive(Parser)]
#[command(name = "ipa-harvest", version, about = "Event-driven trajectory optimization for data-harvesting agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the initial trajectories and write the trace.
    Simulate(Common),
    /// Optimize the trajectories by gradient descent.
    Optimize(Common),
    /// Compare the IPA gradient with central differences.
    Gradcheck(Common),
    /// Run a bundled experiment (fig3 or fig4).
    Reproduce(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file, or the name of a bundled scenario.
    scenario: String,
    /// Objective: P1 (backlog only) or P2 (backlog plus excitation).
    #[arg(long)]
    mode: Option<Mode>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the random target layout.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Initial step size.
    #[arg(long)]
    step: Option<f64>,
    /// Weight of the excitation term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Print every iteration to stderr.
    #[arg(short, long)]
    verbose: bool,
}

impl Common {
    fn request(self) -> RunRequest {
        RunRequest {
            scenario: self.scenario,
            mode: self.mode,
            out: self.out,
            seed: self.seed,
            max_iters: self.max_iters,
            step: self.step,
            lambda: self.lambda,
            verbose: self.verbose,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (action, common) = match cli.command {
        Command::Simulate(c) => (Action::Simulate, c),
        Command::Optimize(c) => (Action::Optimize, c),
        Command::Gradcheck(c) => (Action::Gradcheck, c),
        Command::Reproduce(c) => (Action::Reproduce, c),
    };
    match harness::run(action, &common.request()) {
        Ok(reports) => {
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().all(|r| r.succeeded()) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
