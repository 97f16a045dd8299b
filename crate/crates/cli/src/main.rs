use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use cola_core::config::RunConfig;
use cola_core::cost::CostTable;
use cola_core::experiments::{run_cost, run_ftaas, run_train, run_verify, RunSummary};
use cola_core::metrics::{read_metrics, to_csv};
use cola_core::router::CollaborationMode;
use cola_core::Error;

#[derive(Parser)]
#[command(name = "cola", version, about = "Adapter fine-tuning with gradient offloading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gradient-equivalence and convergence checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train a single user's adapters.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train several users' adapters on one shared base model.
    Ftaas {
        #[arg(long)]
        users: usize,
        #[arg(long, value_parser = parse_mode)]
        mode: CollaborationMode,
        #[arg(long)]
        config: PathBuf,
    },
    /// Print per-device memory counts for every method.
    Cost {
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert a metrics file to CSV learning curves.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<CollaborationMode, String> {
    match s {
        "joint" => Ok(CollaborationMode::Joint),
        "alone" => Ok(CollaborationMode::Alone),
        "collab" | "collaboration" => Ok(CollaborationMode::Collaboration),
        _ => Err(format!("unknown mode {s:?} (expected joint, alone or collab)")),
    }
}

enum Failure {
    Config(String),
    Run(String),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::NotMergeable { .. } | Error::InvalidSpec(_) | Error::Toml(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Run(other.to_string()),
        }
    }
}

fn load(path: &Path) -> Result<RunConfig, Failure> {
    if !path.exists() {
        return Err(Failure::Config(format!("config file {} not found", path.display())));
    }
    Ok(RunConfig::load(path)?)
}

fn summarize(s: &RunSummary) {
    println!("{}: {} iterations, {} base backward passes", s.command, s.iterations, s.counters.backward);
    for (k, e) in s.final_eval.iter().enumerate() {
        let who = if s.final_eval.len() > 1 { format!("user {k} ") } else { String::new() };
        println!("{who}test accuracy {:.4}  loss {:.4}", e.accuracy, e.loss);
    }
    if let Some(post) = &s.post_hoc_merged {
        for (k, e) in post.iter().enumerate() {
            println!("user {k} after merging all users (alpha = 1): accuracy {:.4}", e.accuracy);
        }
    }
    println!("metrics: {}", s.metrics_path.display());
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Verify { seed, json } => {
            let report = run_verify(seed)?;
            println!("{report}");
            if let Some(path) = json {
                let text = report.to_json()?;
                fs::write(&path, text + "\n").map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
            }
            if !report.passed() {
                return Err(Failure::Checks);
            }
        }
        Command::Train { config } => summarize(&run_train(&load(&config)?)?),
        Command::Ftaas { users, mode, config } => summarize(&run_ftaas(&load(&config)?, users, mode)?),
        Command::Cost { config } => {
            let cfg = load(&config)?;
            let reports = run_cost(&cfg)?;
            println!(
                "float counts, users = {}, batch = {}; braces mark offloaded counts",
                cfg.users.count, cfg.train.batch_size
            );
            print!("{}", CostTable(&reports));
        }
        Command::Plot { metrics, out } => {
            let csv = to_csv(&read_metrics(&metrics)?);
            match out {
                Some(path) => fs::write(&path, csv).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(1),
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
    }
}
