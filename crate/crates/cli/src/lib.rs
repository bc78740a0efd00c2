//! Command-line experiment runner: dataset generation, single runs, budget
//! sweeps, λ/T ablations and checkpoint evaluation.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use incgan::memory::Budget;
use incgan::model::Variant;
use incgan::Error;

pub use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "incgan", version, about = "Incremental detection and attribution of generated images")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Per-key override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic dataset container.
    GenData,
    /// Train through the architecture stream and report every step.
    Run,
    /// Final detection accuracy across variants and memory budgets.
    BudgetSweep {
        #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL.map(|v| v.to_string()))]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = ["inf", "128", "32", "0"].map(String::from))]
        budgets: Vec<String>,
    },
    /// λ × temperature grid for the multi-task variants.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = ["mt_sc", "mt_mc"].map(String::from))]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 1.0])]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0])]
        temperatures: Vec<f64>,
        /// Memory budget of every cell.
        #[arg(long, default_value = "128")]
        budget: String,
        /// Architectures in the stream (the grid is read after the last).
        #[arg(long, default_value_t = 3)]
        architectures: usize,
    },
    /// Metrics of a saved checkpoint on the test splits.
    Eval {
        /// Checkpoint directory; defaults to `<output_dir>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Loads the config file and applies `--set`, `--seed` and `--out`.
pub fn resolve_config(common: &Common) -> incgan::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr<Err = String>>(items: &[String]) -> incgan::Result<Vec<T>> {
    items
        .iter()
        .map(|s| s.trim().parse::<T>().map_err(Error::Config))
        .collect()
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn execute(cli: Cli) -> incgan::Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::GenData => print!("{}", commands::cmd_gen_data(&cfg)?),
        Command::Run => {
            commands::cmd_run(&cfg, true)?;
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::BudgetSweep { variants, budgets } => {
            let variants: Vec<Variant> = parse_list(&variants)?;
            let budgets: Vec<Budget> = parse_list(&budgets)?;
            commands::cmd_budget_sweep(&cfg, &variants, &budgets, true)?;
            println!("wrote {}", cfg.output_dir.join("sweep.csv").display());
        }
        Command::Ablate {
            variants,
            lambdas,
            temperatures,
            budget,
            architectures,
        } => {
            let mut cfg = cfg;
            cfg.memory_budget = budget.parse().map_err(Error::Config)?;
            cfg.architectures = architectures;
            let variants: Vec<Variant> = parse_list(&variants)?;
            let cells = commands::cmd_ablate(&cfg, &variants, &lambdas, &temperatures, true)?;
            for c in cells.iter().filter(|c| c.best) {
                println!(
                    "best {}: lambda={} T={} detection {}",
                    c.variant,
                    c.lambda,
                    c.temperature,
                    report::fmt4(c.detection_acc)
                );
            }
        }
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoint"));
            let m = commands::cmd_eval(&cfg, &ckpt)?;
            println!("{}", commands::describe(&m));
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
