use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use covid_da::datasets::{self, SyntheticConfig};
use covid_da::experiment::{self, DatasetSpec, ExperimentConfig};
use covid_da::{Error, Result};

#[derive(Parser)]
#[command(name = "covid-da", version, about = "Semi-supervised adversarial domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every row of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds, replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory, replacing the config's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the embedded reference table's Sum and Cost columns.
    VerifyTables,
    /// Write SVG plots for a finished results directory.
    Plot {
        #[arg(long)]
        results: PathBuf,
    },
    /// Generate a synthetic dataset and save it as a manifest.
    GenData {
        /// Synthetic config, or an experiment config with a synthetic dataset section.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn synthetic_config(path: &Path) -> Result<SyntheticConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    if table.contains_key("dataset") {
        match ExperimentConfig::from_toml_str(&text)?.dataset {
            DatasetSpec::Synthetic(s) => Ok(s),
            DatasetSpec::Manifest { .. } => Err(Error::Config("dataset is a manifest, not a synthetic config".into())),
        }
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seeds, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let table = experiment::run_experiment(&cfg)?;
            print!("{}", table.render());
            println!("results written to {}", cfg.output_dir.display());
        }
        Command::VerifyTables => {
            print!("{}", experiment::verify_reference_tables().render());
        }
        Command::Plot { results } => {
            for p in experiment::emit_plots(&results)? {
                println!("{}", p.display());
            }
        }
        Command::GenData { config, out } => {
            let cfg = synthetic_config(&config)?;
            let ds = datasets::generate_synthetic(&cfg)?;
            datasets::save_manifest(&ds, &out)?;
            println!(
                "{}: {} source, {} labeled target, {} unlabeled target, {} test",
                out.display(),
                ds.n_source(),
                ds.n_target_labeled(),
                ds.n_target_unlabeled(),
                ds.target_test.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
