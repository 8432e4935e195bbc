use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use metasel_cli::config::MethodSpec;
use metasel_cli::{cmd_ablate, cmd_gen_data, cmd_report, cmd_run, CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "msel",
    about = "Test selection experiments for fine-tuned classifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker pool size; falls back to MSEL_WORKERS, then all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated method list (overrides the config).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated budget fractions (overrides the config).
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and cache the source and corrupted target datasets.
    GenData(CommonArgs),
    /// Run the full experiment: train, fine-tune, rank, evaluate.
    Run(CommonArgs),
    /// Train the estimator and its seven ablated variants per subject.
    Ablate(CommonArgs),
    /// Aggregate completed runs into a consolidated report.
    Report {
        /// Directory holding run results (curves.csv or run subdirectories).
        #[arg(long)]
        results: PathBuf,
    },
}

fn overrides_of(args: &CommonArgs) -> Result<Overrides, CliError> {
    let methods = match &args.methods {
        None => None,
        Some(names) => Some(
            names
                .iter()
                .map(|n| MethodSpec::from_str(n))
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    if let Some(budgets) = &args.budgets {
        if let Some(bad) = budgets.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(CliError::Validation(format!(
                "budget fraction {bad} outside (0,1]"
            )));
        }
    }
    Ok(Overrides {
        out_dir: args.out.clone(),
        seed: args.seed,
        methods,
        budgets: args.budgets.clone(),
    })
}

fn run() -> Result<(), CliError> {
    match Cli::parse().command {
        Command::GenData(args) => {
            let cfg = ExperimentConfig::load(&args.config, &overrides_of(&args)?)?;
            let files = cmd_gen_data(&cfg)?;
            println!("wrote {} dataset files under {}", files.len(), cfg.out_dir.display());
            Ok(())
        }
        Command::Run(args) => {
            let workers = args.workers;
            let cfg = ExperimentConfig::load(&args.config, &overrides_of(&args)?)?;
            let out = cmd_run(&cfg, workers)?;
            let evaluated = out.manifest.subjects.iter().filter(|s| s.evaluated).count();
            let rejected = out.manifest.subjects.len() - evaluated;
            println!(
                "run complete: {evaluated} subjects evaluated, {rejected} rejected; results in {}",
                out.out_dir.display()
            );
            Ok(())
        }
        Command::Ablate(args) => {
            let workers = args.workers;
            let cfg = ExperimentConfig::load(&args.config, &overrides_of(&args)?)?;
            let rows = cmd_ablate(&cfg, workers)?;
            println!(
                "ablation complete: {} rows in {}",
                rows.len(),
                cfg.out_dir.join("ablation.csv").display()
            );
            Ok(())
        }
        Command::Report { results } => {
            let (rows, path) = cmd_report(&results)?;
            println!("baseline,pairs,wins,ties,losses,median_improvement_pct,p_value");
            for r in &rows {
                println!(
                    "{},{},{},{},{},{:.4},{:.6}",
                    r.baseline, r.pairs, r.wins, r.ties, r.losses,
                    r.median_improvement_pct, r.p_value
                );
            }
            println!("report written to {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
