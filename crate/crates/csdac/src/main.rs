//! Thin command-line front end over [`csdac::commands`].

use clap::{Parser, Subcommand};
use csdac::commands::{
    cmd_compare, cmd_eval, cmd_plotdata, cmd_selftest, cmd_sweep, cmd_train,
};
use csdac::env::DeliveryMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "csdac", version, about = "Joint event-triggered control and OFDMA scheduling testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write checkpoint, training log, and config snapshot.
    Train {
        /// TOML config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "out/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint deterministically; write traces and a summary.
    Eval {
        /// Checkpoint directory written by `train`.
        checkpoint: PathBuf,
        /// TOML config; defaults to the snapshot next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of evaluation episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Update delivery mode: coupled or ideal.
        #[arg(long)]
        mode: Option<DeliveryMode>,
        /// Seed for evaluation episodes.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "out/eval")]
        out: PathBuf,
    },
    /// Compare a checkpoint against the model-based baselines on shared seeds.
    Compare {
        /// Checkpoint directory written by `train`.
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out/compare")]
        out: PathBuf,
    },
    /// Short training runs over the reward-weight grid, ranked by return.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out/sweep")]
        out: PathBuf,
    },
    /// Export plot-ready CSV series from a training log and episode traces.
    Plotdata {
        /// Training log CSV written by `train`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Episode trace CSV written by `eval`; repeatable.
        #[arg(long = "trace")]
        traces: Vec<PathBuf>,
        #[arg(long, default_value = "out/plots")]
        out: PathBuf,
    },
    /// Run the built-in oracle and round-trip battery.
    Selftest,
}

fn run(cli: Cli) -> csdac::Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let outcome = cmd_train(config.as_deref(), seed, &out)?;
            println!(
                "trained {} env steps over {} iterations in {:.1}s",
                outcome.env_steps, outcome.iterations, outcome.elapsed_s
            );
            println!("checkpoint: {}", outcome.checkpoint_dir.display());
            println!("training log: {}", outcome.log_path.display());
            println!("config snapshot: {}", outcome.snapshot_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            config,
            episodes,
            mode,
            seed,
            out,
        } => {
            let s = cmd_eval(&checkpoint, config.as_deref(), episodes, mode, seed, &out)?;
            println!(
                "episodes: {}  mean length: {:.1}  updates/episode: {:.1} requested, {:.1} effective",
                s.episodes, s.mean_episode_len, s.mean_updates_requested, s.mean_updates_effective
            );
            println!(
                "mean power: {:.6e} W  radiated energy: {:.6e} J/episode  total energy: {:.6e} J/episode",
                s.mean_power_w, s.mean_radiated_energy_j, s.mean_total_energy_j
            );
            println!(
                "constraint violations: {} of {} steps ({:.4}%)  qos satisfaction: {:.3}",
                s.violation_steps,
                s.eval_steps,
                100.0 * s.violation_fraction,
                s.mean_qos_satisfied
            );
            if s.uub_checked {
                println!(
                    "boundedness check: {} ({:.0}% of episodes within bound)",
                    if s.uub_pass { "pass" } else { "fail" },
                    100.0 * s.uub_fraction_ok
                );
            }
            println!("summary and traces written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare {
            checkpoint,
            config,
            episodes,
            seed,
            out,
        } => {
            let cmp = cmd_compare(&checkpoint, config.as_deref(), episodes, seed, &out)?;
            println!(
                "{:<12} {:>10} {:>10} {:>9} {:>14} {:>12} {:>10}",
                "arm", "updates/ep", "mean len", "survival", "radiated J/ep", "total J/ep", "vs base"
            );
            for r in &cmp.rows {
                println!(
                    "{:<12} {:>10.1} {:>10.1} {:>9.2} {:>14.6e} {:>12.6e} {:>9.1}%",
                    r.arm,
                    r.mean_updates_per_episode,
                    r.mean_episode_len,
                    r.survival_rate,
                    r.mean_radiated_energy_j,
                    r.mean_total_energy_j,
                    r.updates_reduction_vs_trigger_pct
                );
            }
            println!("table written to {}", out.join("compare.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, seed, out } => {
            let rows = cmd_sweep(config.as_deref(), seed, &out)?;
            println!("{:<5} {:>8} {:>8} {:>8} {:>14}", "rank", "mu1", "mu2", "mu3", "mean return");
            for r in &rows {
                println!(
                    "{:<5} {:>8} {:>8} {:>8} {:>14.4}",
                    r.rank, r.mu1, r.mu2, r.mu3, r.mean_return
                );
            }
            println!("ranking written to {}", out.join("sweep_ranking.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Plotdata { log, traces, out } => {
            let written = cmd_plotdata(log.as_deref(), &traces, &out)?;
            for path in &written {
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let report = cmd_selftest();
            println!(
                "{} of {} checks passed",
                report.total - report.failures.len(),
                report.total
            );
            Ok(if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
