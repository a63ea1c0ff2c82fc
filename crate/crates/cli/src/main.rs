//! `localmh`: run sampler experiments from TOML or JSON configurations.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 forward-model failure, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use localmh::experiment::{recompute_report, run_experiment, Battery, ExperimentConfig, ExperimentReport};
use localmh::{Error, ErrorCategory};

#[derive(Parser)]
#[command(name = "localmh", version, about = "Metropolis-Hastings with local surrogate models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run a base configuration under each of its `[[variant]]` overrides.
    Battery(RunArgs),
    /// Run exact-model chains and store their pooled covariance under
    /// `<out>/<name>_reference`.
    Reference(RunArgs),
    /// Recompute error traces and the summary of a stored experiment.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Master seed; chain k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Covariance file written by a reference run.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment configuration; locates `<out>/<name>`.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Covariance to compare against; defaults to the experiment's own
    /// `reference.json`.
    #[arg(long)]
    reference: Option<PathBuf>,
}

impl RunArgs {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(chains) = self.chains {
            config.chains = chains;
        }
        if let Some(steps) = self.steps {
            config.chain.steps = steps;
        }
        if let Some(reference) = &self.reference {
            config.reference = Some(reference.clone());
        }
    }
}

fn print_report(report: &ExperimentReport, dir: &Path) {
    println!("{}: {} chain(s) -> {}", report.name, report.chains.len(), dir.display());
    for c in &report.chains {
        match &c.error {
            None => println!(
                "  chain {} seed {}: evals {} acceptance {:.3} final error {}",
                c.index,
                c.seed,
                c.model_evals,
                c.acceptance_rate,
                c.final_error.map_or("-".to_string(), |e| format!("{e:.4}"))
            ),
            Some(e) => println!("  chain {} seed {}: FAILED: {e}", c.index, c.seed),
        }
    }
}

fn failure_category(reports: &[ExperimentReport]) -> Option<ErrorCategory> {
    reports
        .iter()
        .flat_map(|r| r.failures())
        .map(|c| c.error_category.unwrap_or(ErrorCategory::Other))
        .next()
}

fn run(cli: Cli) -> Result<Option<ErrorCategory>, Error> {
    match cli.command {
        Command::Run(args) => {
            let mut config = ExperimentConfig::from_path(&args.config)?;
            args.apply(&mut config);
            let report = run_experiment(&config, &args.out)?;
            print_report(&report, &args.out.join(&config.name));
            Ok(failure_category(&[report]))
        }
        Command::Reference(args) => {
            let mut config = ExperimentConfig::from_path(&args.config)?;
            args.apply(&mut config);
            if !config.reference_mode {
                config.name = format!("{}_reference", config.name);
                config.reference_mode = true;
            }
            config.reference = None;
            let report = run_experiment(&config, &args.out)?;
            print_report(&report, &args.out.join(&config.name));
            Ok(failure_category(&[report]))
        }
        Command::Battery(args) => {
            let text = std::fs::read_to_string(&args.config)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", args.config.display())))?;
            let battery = Battery::parse(&text)?;
            let mut reports = Vec::new();
            let mut failed = None;
            for mut config in battery.configs()? {
                args.apply(&mut config);
                match run_experiment(&config, &args.out) {
                    Ok(report) => {
                        print_report(&report, &args.out.join(&config.name));
                        reports.push(report);
                    }
                    Err(e) if e.category() == ErrorCategory::Config => return Err(e),
                    Err(e) => {
                        eprintln!("experiment {} failed: {e}", config.name);
                        failed.get_or_insert(e.category());
                    }
                }
            }
            Ok(failed.or(failure_category(&reports)))
        }
        Command::Report(args) => {
            let config = ExperimentConfig::from_path(&args.config)?;
            let dir = args.out.join(&config.name);
            let report = recompute_report(&dir, args.reference.as_deref())?;
            print_report(&report, &dir);
            if let Some(m) = report.median_final_error {
                println!("  median final error {m:.4}");
            }
            Ok(None)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(category)) => ExitCode::from(category.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
