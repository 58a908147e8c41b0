use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use htsim_cli::{describe_text, error_json, list_text, run_config, RunOptions, Status};

#[derive(Parser)]
#[command(name = "htsim", version, about = "Semiclassical dynamics on H-type groups: scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the scenario described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (default: config output.dir, then results/<scenario>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the scenarios.
    List,
    /// Show what a scenario checks and its defaults.
    Describe { scenario: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Run { config, out, threads, seed } => {
            let rep = run_config(&config, &RunOptions { out, threads, seed });
            match (&rep.outcome, &rep.reason) {
                (Some(o), _) => {
                    for c in &o.clauses {
                        println!("[{}] {:>2} {}: {:.4e} ({})", if c.pass { "PASS" } else { "FAIL" }, c.criterion, c.name, c.measured, c.target);
                    }
                    if let Some(d) = &rep.out_dir {
                        println!("results in {}", d.display());
                    }
                }
                (None, Some(reason)) => eprintln!("{}", error_json(reason)),
                (None, None) => {}
            }
            debug_assert!(rep.status != Status::Error || rep.reason.is_some());
            ExitCode::from(rep.status.code() as u8)
        }
        Cmd::List => {
            print!("{}", list_text());
            ExitCode::SUCCESS
        }
        Cmd::Describe { scenario } => match describe_text(&scenario) {
            Ok(t) => {
                println!("{t}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{}", error_json(&e));
                ExitCode::from(1)
            }
        },
    }
}
