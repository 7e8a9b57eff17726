use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crowdlabel::io::{load_config, run_evaluate, run_score, run_simulate, run_validate, RunConfig};
use crowdlabel::methods::Method;
use crowdlabel::simulate::{regime_preset, SimConfig};
use crowdlabel::{Error, Result};

/// Consensus labels and label/annotator quality for multi-annotator datasets.
#[derive(Debug, Parser)]
#[command(name = "crowdlabel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute consensus labels, their quality, and annotator quality.
    Score(RunArgs),
    /// Compare a method's outputs against ground-truth labels.
    Evaluate(RunArgs),
    /// Generate a synthetic dataset with ground truth.
    Simulate(SimArgs),
    /// Report dataset counts and problems without running any method.
    Validate(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Long-format CSV: example_id,annotator_id,label
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// CSV: example_id,p_0,...,p_{K-1}
    #[arg(long)]
    pred_probs: Option<PathBuf>,
    /// CSV: example_id,label
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML or JSON file with any of these settings plus method hyperparameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated Lift cutoffs for `evaluate`.
    #[arg(long, value_delimiter = ',')]
    lift_cutoffs: Option<Vec<usize>>,
    /// Directory of a finished `score` run to evaluate instead of running a method.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// CSV: class_index,label
    #[arg(long)]
    label_map: Option<PathBuf>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Add wall-clock timings to run.json.
    #[arg(long)]
    record_timings: bool,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// TOML or JSON simulation config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in regime: hardest, uniform or complete.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of examples of the config or preset.
    #[arg(long)]
    num_examples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut config: RunConfig = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.method {
            config.method = Some(m.parse::<Method>()?);
        }
        macro_rules! overlay {
            ($($field:ident),*) => {
                $(if self.$field.is_some() {
                    config.$field = self.$field;
                })*
            };
        }
        overlay!(
            annotations,
            pred_probs,
            truth,
            out,
            lift_cutoffs,
            scores,
            label_map,
            num_classes
        );
        config.record_timings |= self.record_timings;
        Ok(config)
    }
}

fn sim_config(args: &SimArgs) -> Result<SimConfig> {
    let mut config = match (&args.config, &args.preset) {
        (Some(path), _) => load_config(path)?,
        (None, Some(name)) => regime_preset(name)?,
        (None, None) => {
            return Err(Error::Config(
                "simulate needs --config or --preset".to_string(),
            ))
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.num_examples {
        config.num_examples = n;
    }
    Ok(config)
}

fn configure_threads() {
    let Ok(value) = std::env::var("CROWDLABEL_THREADS") else {
        return;
    };
    match value.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
            {
                log::warn!("could not size the thread pool: {}", e);
            }
        }
        _ => log::warn!("ignoring CROWDLABEL_THREADS={:?}", value),
    }
}

/// Prints a report, treating a closed stdout (e.g. `| head`) as success.
fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{}", text) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Score(args) => {
            let result = run_score(&args.into_config()?)?;
            log::info!(
                "scored {} examples with {}",
                result.consensus.len(),
                result.method
            );
        }
        Command::Evaluate(args) => {
            let report = run_evaluate(&args.into_config()?)?;
            print_json(&report)?;
        }
        Command::Simulate(args) => {
            let config = sim_config(&args)?;
            let sim = run_simulate(&config, &args.out)?;
            log::info!(
                "simulated {} examples, {} annotations",
                sim.table.num_examples(),
                sim.table.num_annotations()
            );
        }
        Command::Validate(args) => {
            let summary = run_validate(&args.into_config()?)?;
            print_json(&summary)?;
            if let Some(v) = summary.first_error() {
                return Err(Error::Input(v.to_string()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
