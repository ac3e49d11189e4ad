use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stereoprobe::apx::ApxDirection;
use stereoprobe_cli::config::{Config, Overrides};
use stereoprobe_cli::report::ReportFormat;
use stereoprobe_cli::stages::{run_stage, Stage};

#[derive(Parser)]
#[command(name = "stereoprobe", version, about = "Name-by-descriptor stereotype probing pipeline")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "stereoprobe.toml")]
    config: PathBuf,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict the run to one declared backend.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// One-tailed surfacing level.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(["as_printed", "inverse"]))]
    apx_direction: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand names x descriptors x templates into the probe corpus.
    Expand,
    /// Cluster name embeddings and select names per group.
    Cluster,
    /// Score corpus sentences with the configured backends.
    Score,
    /// Build perplexity tables and bias scores.
    Apx,
    /// Category-level argmin accuracy and MRR, PPL against APX.
    Validate,
    /// Surface significantly associated (descriptor, group) pairs.
    Surface,
    /// Collect character profiles from chat backends.
    Generate,
    /// Classifier accuracy and feature elimination over profiles.
    Analyze,
    /// Top differentiating words per feature.
    Jsd,
    /// Emit the consolidated report tables.
    Report {
        #[arg(long, default_value = "all")]
        format: ReportFormat,
    },
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::Expand => Stage::Expand,
            Command::Cluster => Stage::Cluster,
            Command::Score => Stage::Score,
            Command::Apx => Stage::Apx,
            Command::Validate => Stage::Validate,
            Command::Surface => Stage::Surface,
            Command::Generate => Stage::Generate,
            Command::Analyze => Stage::Analyze,
            Command::Jsd => Stage::Jsd,
            Command::Report { .. } => Stage::Report,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        backend: cli.backend,
        alpha: cli.alpha,
        apx_direction: cli
            .apx_direction
            .map(|s| s.parse::<ApxDirection>())
            .transpose()
            .map_err(anyhow::Error::msg)?,
    };
    let cfg = Config::load(&cli.config, &overrides)?;
    let format = match &cli.command {
        Command::Report { format } => *format,
        _ => ReportFormat::default(),
    };
    let stage = cli.command.stage();
    let rec = run_stage(stage, &cfg, format)?;
    for (k, v) in &rec.counts {
        eprintln!("{stage}: {k} = {v}");
    }
    for n in &rec.notes {
        eprintln!("{stage}: warning: {n}");
    }
    for path in rec.artifacts.keys() {
        println!("{}", cfg.out_dir.join(path).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
