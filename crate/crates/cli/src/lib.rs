//! Command-line front end: `gen`, `fit`, `check`, `bench` and `report`.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Outcome;
use crate::config::KeyValues;
pub use crate::error::{CliError, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "coco", version, about = "Constrained causal optimization tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a scenario and write one CSV per environment plus metadata.json.
    Gen(Common),
    /// Fit a model with the chosen objective; writes fit.json and trace.csv.
    Fit(Common),
    /// Run the identifiability rank check; writes check.json.
    Check(Common),
    /// Run a benchmark suite (linear-cases, gmm or appendix-b1).
    Bench {
        suite: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the tables of one or more bench JSON files.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Options shared by the data commands. Values are applied over the config
/// file, and trailing `key=value` overrides are applied last.
#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    /// Scenario: case1..case5, appendix-b1, nonidentifiable, gmm or gmm:K.
    #[arg(long)]
    pub case: Option<String>,
    /// Comma-separated environment strengths.
    #[arg(long)]
    pub envs: Option<String>,
    /// Samples per environment.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Directory written by `gen`, or comma-separated CSV files.
    #[arg(long)]
    pub data: Option<String>,
    /// Non-descendant covariates, 1-based and comma-separated.
    #[arg(long)]
    pub nondescendants: Option<String>,
    /// Trailing `key=value` overrides such as `optim.max_iters=500`.
    pub overrides: Vec<String>,
}

impl Common {
    pub fn key_values(&self) -> Result<KeyValues, CliError> {
        let mut kv = match &self.config {
            Some(path) => KeyValues::from_file(path)?,
            None => KeyValues::default(),
        };
        let flags: [(&str, Option<String>); 9] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("method", self.method.clone()),
            ("case", self.case.clone()),
            ("envs", self.envs.clone()),
            ("n", self.n.map(|v| v.to_string())),
            ("reps", self.reps.map(|v| v.to_string())),
            ("data", self.data.clone()),
            ("nondescendants", self.nondescendants.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                kv.set(key, &v)?;
            }
        }
        for o in &self.overrides {
            kv.apply_override(o)?;
        }
        Ok(kv)
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Gen(c) => commands::gen(&c.key_values()?),
        Command::Fit(c) => commands::fit(&c.key_values()?),
        Command::Check(c) => commands::check(&c.key_values()?),
        Command::Bench { suite, common } => commands::bench_cmd(&common.key_values()?, suite.as_deref()),
        Command::Report { inputs, out } => {
            let mut kv = KeyValues::default();
            if let Some(dir) = out {
                kv.set("out", &dir.display().to_string())?;
            }
            commands::report(&kv, inputs)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit status.
/// Messages go to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            outcome.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
