use std::path::PathBuf;
use std::process::ExitCode;

use awpo::nn::Part;
use awpo_cli::{plot, CliError, CliResult};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "awpo", version, about = "Train and evaluate advantage-weighted policies from pixels and observation-only video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a source video from a scripted near-optimal agent.
    GenerateDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train from a config; writes metrics.csv, config.resolved and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (falls back to AWPO_OUT_DIR, then the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy-policy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate metrics files into curves, a final-window bar chart and CSVs.
    Plot {
        /// NAME=a.csv,b.csv (repeatable).
        #[arg(long = "label", required = true)]
        labels: Vec<String>,
        /// SVG output path; the CSVs are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every model part.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenerateDataset { config, out, seed } => {
            let cfg = awpo_cli::load_config(&config, seed)?;
            println!("{}", awpo_cli::generate_dataset(&cfg, &out)?);
        }
        Command::Train { config, out, seed } => {
            let cfg = awpo_cli::load_config(&config, seed)?;
            let out = awpo_cli::resolve_out_dir(out, &cfg);
            println!("{}", awpo_cli::train(cfg, &out)?);
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
            seed,
        } => {
            let cfg = awpo_cli::load_config(&config, seed)?;
            let (mean, std) = awpo_cli::eval(&cfg, &checkpoint, episodes)?;
            println!("eval over {episodes} episodes: {mean:.4} ± {std:.4}");
        }
        Command::Plot { labels, out } => {
            let groups = labels
                .iter()
                .map(|l| plot::parse_label(l))
                .collect::<CliResult<Vec<_>>>()?;
            for s in plot::plot(&groups, &out)? {
                println!(
                    "{}: {} seeds, final {} evals {:.4} ± {:.4}",
                    s.label,
                    s.seeds,
                    plot::FINAL_WINDOW,
                    s.final_mean,
                    s.final_stderr
                );
            }
        }
        Command::Gradcheck { seed, inject_fault } => {
            let fault = inject_fault
                .map(|name| {
                    Part::from_name(&name).ok_or_else(|| CliError::Usage(format!("unknown model part {name:?}")))
                })
                .transpose()?;
            let report = awpo_cli::gradcheck(seed, fault)?;
            if !awpo_cli::print_gradcheck(&report, std::io::stdout())? {
                return Err(CliError::Check(format!(
                    "gradient check failed (tolerance {:e})",
                    awpo_cli::GRADCHECK_TOLERANCE
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
