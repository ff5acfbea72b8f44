//! Command-line harness for DTR bandit experiments.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 when some
//! simulation paths or replay replications failed but the run produced
//! output.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use dtr_bandit::harness::{
    load_experiment_config, load_instance, load_replay_config, load_sweep_config, run_replay,
    run_simulation, stage1_oracle_rule, sweep, HarnessError, RunOptions,
};
use dtr_bandit::replay::{generate_uniform_log, write_dataset};

#[derive(Parser)]
#[command(
    name = "dtrbandit",
    about = "Two-stage linear DTR bandit experiments: simulation, parameter sweeps, and off-policy replay evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: available cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the regret experiment described by a config file.
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
        /// Override the number of independent paths.
        #[arg(long)]
        paths: Option<usize>,
        /// Also write per-path cumulative regret dumps.
        #[arg(long)]
        dump_paths: bool,
    },
    /// Evaluate a policy on logged data via bootstrap replay.
    Replay {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the regret experiment over a (q, h) parameter grid.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Check a config file (and its instance) without running anything.
    Validate {
        /// Configuration file to check; tried as experiment, sweep, and
        /// replay config in that order.
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a uniformly randomized logged dataset from an instance.
    GenerateLog {
        /// Instance JSON describing the generative model.
        #[arg(long)]
        instance: PathBuf,
        /// Number of logged units.
        #[arg(long)]
        rounds: usize,
        /// RNG seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Simulate {
            common,
            paths,
            dump_paths,
        } => {
            let mut cfg = load_experiment_config(&common.config)?;
            if let Some(p) = paths {
                cfg.paths = p;
            }
            cfg.validate()?;
            let opts = RunOptions {
                threads: common.threads,
                dump_paths,
            };
            let report = run_simulation(&cfg, &opts)?;
            for s in &report.summaries {
                println!(
                    "{}: final regret at t={} is {:.4} ± {:.4} ({} failed paths)",
                    s.name, s.final_t, s.final_mean_regret, s.final_stderr, s.failed_paths
                );
            }
            println!("outputs written to {}", cfg.output_dir.display());
            Ok(exit_for_failures(report.failed_paths_total))
        }
        Command::Replay { common } => {
            let cfg = load_replay_config(&common.config)?;
            let opts = RunOptions {
                threads: common.threads,
                dump_paths: false,
            };
            let report = run_replay(&cfg, &opts)?;
            for w in &report.fit_warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: average reward {:.4} ± {:.4} over {} replications (mean matched {:.1}, mean consumed {:.1}, {} failed)",
                report.policy,
                report.mean_reward,
                report.stderr_reward,
                report.reps.len(),
                report.mean_matched,
                report.mean_consumed,
                report.failed_reps
            );
            if report
                .reps
                .iter()
                .any(|r| r.outcome.is_some_and(|o| o.partial))
            {
                println!(
                    "note: some replications exhausted the stream early; their averages cover only the matched prefix"
                );
            }
            println!("report written to {}", cfg.output_dir.display());
            Ok(exit_for_failures(report.failed_reps))
        }
        Command::Sweep { common } => {
            let cfg = load_sweep_config(&common.config)?;
            let opts = RunOptions {
                threads: common.threads,
                dump_paths: false,
            };
            let report = sweep(&cfg, &opts)?;
            for cell in &report.cells {
                for p in &cell.policies {
                    println!(
                        "q={} h={} {}: final regret {:.4} ± {:.4}",
                        cell.q, cell.h, p.name, p.final_mean_regret, p.final_stderr
                    );
                }
            }
            println!("index written to {}", cfg.output_dir.join("index.json").display());
            Ok(exit_for_failures(report.failed_paths_total))
        }
        Command::Validate { config } => {
            // A config file may describe any of the three run modes.
            let experiment = load_experiment_config(&config);
            if let Ok(cfg) = &experiment {
                let inst = load_instance(&cfg.instance)?;
                println!(
                    "experiment config ok: {} policies, horizon {}, {} paths, instance d={} k1={} k2={}",
                    cfg.policies.len(),
                    cfg.horizon,
                    cfg.paths,
                    inst.d,
                    inst.k1,
                    inst.k2
                );
                if inst.d == 1 {
                    let rule = stage1_oracle_rule(&inst, cfg.regret_precision)?;
                    for seg in rule {
                        println!(
                            "stage-1 oracle: arm {} on [{:.6}, {:.6}]",
                            seg.arm, seg.from, seg.to
                        );
                    }
                }
                return Ok(ExitCode::SUCCESS);
            }
            if let Ok(cfg) = load_sweep_config(&config) {
                load_instance(&cfg.instance)?;
                println!(
                    "sweep config ok: {}x{} grid, horizon {}, {} paths",
                    cfg.q_values.len(),
                    cfg.h_values.len(),
                    cfg.horizon,
                    cfg.paths
                );
                return Ok(ExitCode::SUCCESS);
            }
            if let Ok(cfg) = load_replay_config(&config) {
                println!(
                    "replay config ok: policy {}, horizon {}, {} replications",
                    cfg.policy.label(),
                    cfg.horizon,
                    cfg.bootstrap_reps
                );
                return Ok(ExitCode::SUCCESS);
            }
            // None matched: report the experiment-config error, which is
            // the most common case.
            Err(experiment.err().unwrap())
        }
        Command::GenerateLog {
            instance,
            rounds,
            seed,
            out,
        } => {
            if rounds == 0 {
                return Err(HarnessError::Config("rounds must be at least 1".into()));
            }
            let inst = load_instance(&instance)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dataset = generate_uniform_log(&inst, rounds, &mut rng);
            write_dataset(&out, &dataset)?;
            println!(
                "wrote {} uniformly logged records to {}",
                dataset.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn exit_for_failures(failures: usize) -> ExitCode {
    if failures > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}
