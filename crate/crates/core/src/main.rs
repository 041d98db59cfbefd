use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gace_core::cli::{self, CliError, MetricSource};
use gace_core::envs::TaskId;

#[derive(Parser)]
#[command(name = "gace", version, about = "Goal-aware multi-target RL: training, evaluation and analysis")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Warm up, train, and write curve, checkpoints and manifest per seed.
    Train {
        /// Flat TOML config; a run manifest also works.
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of full, full-arm, desk, desk-arm.
        #[arg(long)]
        preset: Option<String>,
        /// key=value, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<String>,
    },
    /// Greedy success ratio of a checkpoint on a seen or unseen task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV file to append the result row to.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// SRR/SEI table against a reference algorithm.
    Metrics {
        /// name=path/to/curve.csv
        #[arg(long = "curve", value_name = "NAME=PATH")]
        curves: Vec<String>,
        /// name=updates, for counts taken from elsewhere.
        #[arg(long = "count", value_name = "NAME=N")]
        counts: Vec<String>,
        #[arg(long)]
        reference: String,
        /// Reference success ratio; defaults to the reference curve's final value.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Policy and value saliency maps along one greedy episode.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frames and per-step log of one episode.
    ReplayDump {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn split_pair(s: &str) -> Result<(String, String), CliError> {
    s.split_once('=')
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .ok_or_else(|| CliError::Usage(format!("expected NAME=VALUE, got {s:?}")))
}

fn run(args: Args) -> Result<(), CliError> {
    match args.cmd {
        Cmd::Train {
            config,
            preset,
            mut overrides,
            task,
            variant,
            seed,
            output,
        } => {
            let text = config.map(std::fs::read_to_string).transpose()?;
            if let Some(t) = task {
                overrides.push(format!("task={t}"));
            }
            if let Some(v) = variant {
                overrides.push(format!("variant={v}"));
            }
            if let Some(s) = seed {
                overrides.push(format!("seeds=[{s}]"));
            }
            if let Some(o) = output {
                overrides.push(format!("output={o:?}"));
            }
            let cfg = cli::resolve(preset.as_deref(), text.as_deref(), &overrides)?;
            for run in cli::cmd_train(&cfg)? {
                let last = run.curve.last().map_or(0.0, |r| r.success_ratio);
                println!(
                    "{} seed {}: training success {:.3}, greedy eval {:.3} -> {}",
                    cfg.task,
                    run.seed,
                    last,
                    run.eval_success,
                    run.dir.display()
                );
            }
        }
        Cmd::Eval {
            checkpoint,
            task,
            episodes,
            seed,
            report,
        } => {
            let r = cli::cmd_eval(&checkpoint, &task, episodes, seed, report.as_deref())?;
            println!("{} success ratio {:.4} over {} episodes", r.task, r.success_ratio, r.episodes);
        }
        Cmd::Metrics {
            curves,
            counts,
            reference,
            ratio,
        } => {
            let mut sources = Vec::new();
            for c in &curves {
                let (name, path) = split_pair(c)?;
                sources.push((name, MetricSource::Curve(cli::read_curve(path.as_ref())?)));
            }
            for c in &counts {
                let (name, n) = split_pair(c)?;
                let n = n.parse().map_err(|_| CliError::Usage(format!("bad count {n:?}")))?;
                sources.push((name, MetricSource::Count(n)));
            }
            let (table, _) = cli::cmd_metrics(&sources, &reference, ratio)?;
            print!("{table}");
        }
        Cmd::Saliency {
            checkpoint,
            task,
            seed,
            frames,
            out,
        } => {
            let e = cli::cmd_saliency(&checkpoint, &task, seed, frames, &out)?;
            for (i, (goal, other)) in e.masses.iter().enumerate() {
                println!("frame {i}: policy saliency on goal {goal:.4}, on other objects {other:.4}");
            }
            println!("wrote {} files to {}", e.files.len(), out.display());
        }
        Cmd::ReplayDump {
            checkpoint,
            task,
            seed,
            out,
        } => {
            let outcomes = cli::cmd_replay_dump(checkpoint.as_deref(), &task, seed, &out)?;
            let last = outcomes.last().map_or("none", |o| o.as_str());
            println!("{} steps, outcome {last}, frames in {}", outcomes.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
