use std::path::PathBuf;
use std::process::ExitCode;

use apolab::apo::ExperimentConfig;
use apolab_cli::commands;
use apolab_cli::persist::to_json;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apolab", version, about = "Adversarial preference optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world, data split, preference pairs and golden set.
    GenWorld {
        /// Experiment config (JSON). Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the alignment loop for each seed and write metrics.csv.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed list, e.g. `1-10` or `1,3,7`.
        #[arg(long, default_value = "1")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report reward-model accuracy and calibration per round.
    EvalRm {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "1")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two runs round by round, with a sign test across seeds.
    Compare {
        /// Metrics CSV files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        baseline: String,
        #[arg(long)]
        variant: String,
        /// Also write the comparison as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate metrics into a long-format table for plotting.
    ExportPlot {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Comma-separated `[label=]run_id:column` entries.
        #[arg(long)]
        series: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default experiment config.
    DefaultConfig,
}

fn settle<T>(report: apolab_cli::Result<T>, status: apolab_cli::Result<()>) -> apolab_cli::Result<T> {
    let value = report?;
    status?;
    Ok(value)
}

fn dispatch(cli: Cli) -> apolab_cli::Result<()> {
    match cli.command {
        Command::GenWorld { config, out } => {
            let s = commands::gen_world(config.as_deref(), &out)?;
            println!(
                "wrote {}: {} queries x {} candidates; splits {}/{}/{}; {} preference pairs, {} golden examples",
                out.display(),
                s.n_queries,
                s.n_candidates,
                s.rm_train_queries,
                s.llm_train_queries,
                s.test_queries,
                s.pref_pairs,
                s.golden_examples
            );
        }
        Command::Run { config, seeds, out } => {
            let seeds = commands::parse_seeds(&seeds)?;
            let (report, status) = commands::run(config.as_deref(), &seeds, &out);
            if let Ok(r) = &report {
                for f in &r.manifest.failures {
                    eprintln!("seed {} failed: {}", f.seed, f.error);
                }
                println!("wrote {} metric rows to {}", r.rows.len(), out.join(commands::METRICS_FILE).display());
            }
            settle(report, status)?;
        }
        Command::EvalRm { config, seeds, out } => {
            let seeds = commands::parse_seeds(&seeds)?;
            let (report, status) = commands::eval_rm(config.as_deref(), &seeds, &out);
            if let Ok(rows) = &report {
                println!("wrote {} rows to {}", rows.len(), out.join(commands::RM_EVAL_FILE).display());
            }
            settle(report, status)?;
        }
        Command::Compare {
            files,
            baseline,
            variant,
            out,
        } => {
            let c = commands::compare(&files, &baseline, &variant)?;
            print!("{}", commands::render_comparison(&c));
            if let Some(out) = out {
                apolab_cli::persist::save_json(&out, &c)?;
            }
        }
        Command::ExportPlot { files, series, out } => {
            let rows = commands::export_plot(&files, &series, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::DefaultConfig => print!("{}", to_json(&ExperimentConfig::default())),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
