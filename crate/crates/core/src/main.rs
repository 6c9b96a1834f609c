use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mimalloc::MiMalloc;

use jepa_rl::config::ExperimentConfig;
use jepa_rl::harness::{self, Trainer};
use jepa_rl::telemetry;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(
    name = "jepa-rl",
    version,
    about = "Latent-prediction encoders for pixel CartPole with PPO"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one seed of one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Run all four study configurations.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Seeds per configuration (overrides the file).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Greedy-policy episodes from a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write every rendered frame as PGM into this directory.
        #[arg(long)]
        dump_frames: Option<PathBuf>,
    },
    /// Aggregate telemetry under a runs directory into an SVG.
    Plot {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> jepa_rl::Result<()> {
    match cli.command {
        Command::Train { config, seed } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let out = harness::run_seed(&cfg, seed)?;
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        }
        Command::Sweep { config, seeds } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(k) = seeds {
                cfg.seeds = k;
            }
            for s in harness::sweep(&cfg)? {
                println!(
                    "{:<16} final running avg {:>8} collapsed seeds {}/{}",
                    s.label,
                    s.mean_final_running_avg.map_or("-".into(), |v| format!("{v:.1}")),
                    s.collapsed_seeds,
                    s.seeds.len()
                );
            }
            println!("plot: {}", cfg.output_dir.join("returns.svg").display());
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            dump_frames,
        } => {
            let trainer = Trainer::load(&checkpoint)?;
            let returns = trainer.evaluate(episodes, seed, dump_frames.as_deref())?;
            for (k, r) in returns.iter().enumerate() {
                println!("episode {k}: return {r}");
            }
            if !returns.is_empty() {
                println!("mean return {:.2}", returns.iter().sum::<f64>() / returns.len() as f64);
            }
        }
        Command::Plot { runs, out } => {
            for a in telemetry::plot_runs(&runs, &out)? {
                println!(
                    "{:<16} runs {} final mean {:.1}",
                    a.label,
                    a.runs,
                    a.mean.last().copied().unwrap_or(f64::NAN)
                );
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
