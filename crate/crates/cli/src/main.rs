use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use varfric_cli::{parse_config, run, REGISTRY};

#[derive(Parser)]
#[command(name = "varfric", version, about = "Run the variable-friction limit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the recipe named by the config file's section header
    Run {
        config: PathBuf,
        /// master seed, overriding the config
        #[arg(long)]
        seed: Option<u64>,
        /// output root, overriding the config
        #[arg(long)]
        out: Option<PathBuf>,
        /// worker thread cap, overriding the config
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the recipe registry
    List,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::List => {
            for r in REGISTRY {
                let alias = if r.aliases.is_empty() { String::new() } else { format!(" (alias {})", r.aliases.join(", ")) };
                println!("{:<24}{}{alias}", r.name, r.summary);
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, seed, out, workers } => {
            let text = match fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("{}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            let mut cfg = match parse_config(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(w) = workers {
                if w == 0 {
                    eprintln!("--workers must be at least 1");
                    return ExitCode::from(2);
                }
                cfg.workers = Some(w);
            }
            match run(&cfg) {
                Ok((m, dir)) => {
                    for c in &m.checks {
                        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
                    }
                    println!("wrote {}", dir.display());
                    if m.passed {
                        ExitCode::SUCCESS
                    } else {
                        eprintln!("failed checks: {}", m.failed_checks().join(", "));
                        ExitCode::FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
