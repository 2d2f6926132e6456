use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use dropens_core::evaluation::ScoreMethod;
use dropens_core::experiment::{emit_report, run_experiment, ExperimentConfig, Overrides, RunOptions, TrainMethod};
use dropens_core::Error;

/// Number of worker threads (and of parallel seed processes for `--repeat`).
const WORKERS_ENV: &str = "DROPENS_WORKERS";

#[derive(Parser)]
#[command(name = "dropens", version, about = "Dropout ensembles, uncertainty adversarial training and low-FPR OOD evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an ensemble (or reuse a matching checkpoint) and run the configured evaluations.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Training method: ord, lat or uat.
        #[arg(long)]
        method: Option<String>,
        /// Run this many independent seeds as parallel worker processes.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Shift every seed by this amount (used by `--repeat`).
        #[arg(long, default_value_t = 0, hide = true)]
        seed_offset: u64,
    },
    /// Evaluate an already trained ensemble.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Evaluate on UFGSM-attacked OOD data only.
        #[arg(long)]
        attack: bool,
        /// Scoring method: mi, de or sm.
        #[arg(long)]
        method: Option<String>,
    },
    /// Summarise every metrics.json under a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run the built-in randomised property checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML); relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the uncertainty term in the UAT loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Largest l-infinity attack budget; budgets are drawn from U(0, epsilon_max).
    #[arg(long)]
    epsilon_max: Option<f64>,
    /// Upper FPR limit of the standardized partial AUC.
    #[arg(long)]
    fpr_max: Option<f64>,
    /// Ensemble size M.
    #[arg(long)]
    members: Option<usize>,
    /// Dropout samples S per member.
    #[arg(long)]
    samples: Option<usize>,
    /// scnn or mlp2.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self, train_method: Option<&str>) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta: self.beta,
            epsilon_max: self.epsilon_max,
            fpr_max: self.fpr_max,
            members: self.members,
            samples: self.samples,
            method: train_method.map(str::parse::<TrainMethod>).transpose()?,
            arch: self.arch.clone(),
            output_dir: self.output_dir.clone(),
        });
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::Numerics(_) => 4,
    }
}

fn workers() -> usize {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn print_metrics(outcome: &dropens_core::experiment::ExperimentOutcome) {
    if let Some(m) = &outcome.metrics {
        println!("accuracy {:.4}", m.accuracy);
        for r in &m.evaluations {
            println!(
                "{} vs {} [{}{}]: auc {:.4} pauc@{} {:.4}",
                r.id,
                r.ood,
                r.method,
                if r.attacked { ", attacked" } else { "" },
                r.auc,
                r.fpr_max,
                r.pauc
            );
        }
    }
    println!("checkpoint {}", outcome.checkpoint.display());
}

fn repeat(run: &RunArgs, method: Option<&str>, n: usize, out: &Path) -> Result<(), Error> {
    let exe = std::env::current_exe()?;
    let mut pending: Vec<u64> = (0..n as u64).rev().collect();
    let mut running = Vec::new();
    let mut failed = None;
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < workers() {
            let Some(i) = pending.pop() else { break };
            let mut cmd = Command::new(&exe);
            cmd.arg("train").arg("--config").arg(&run.config);
            cmd.arg("--seed-offset").arg(i.to_string());
            cmd.arg("--output-dir").arg(out.join(format!("seed-{i}")));
            for (flag, v) in [
                ("--epochs", run.epochs.map(|v| v.to_string())),
                ("--batch-size", run.batch_size.map(|v| v.to_string())),
                ("--lr", run.lr.map(|v| v.to_string())),
                ("--beta", run.beta.map(|v| v.to_string())),
                ("--epsilon-max", run.epsilon_max.map(|v| v.to_string())),
                ("--fpr-max", run.fpr_max.map(|v| v.to_string())),
                ("--members", run.members.map(|v| v.to_string())),
                ("--samples", run.samples.map(|v| v.to_string())),
                ("--method", method.map(str::to_string)),
                ("--arch", run.arch.clone()),
            ] {
                if let Some(v) = v {
                    cmd.arg(flag).arg(v);
                }
            }
            running.push((i, cmd.env(WORKERS_ENV, "1").spawn()?));
        }
        let (i, mut child) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            eprintln!("seed {i} failed with {status}");
            failed = failed.or(status.code());
        }
    }
    match failed {
        Some(code) => Err(Error::Data(format!("a seed run exited with status {code}"))),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Cmd::Train { run, method, repeat: n, seed_offset } => {
            let mut cfg = run.load(method.as_deref())?;
            if n > 1 {
                cfg.validate()?;
                return repeat(&run, method.as_deref(), n, &cfg.output_dir);
            }
            cfg.offset_seeds(seed_offset);
            let outcome = run_experiment(&cfg, &RunOptions::default())?;
            print_metrics(&outcome);
        }
        Cmd::Eval { run, attack, method } => {
            let cfg = run.load(None)?;
            let opts = RunOptions {
                train_only: false,
                methods: method.as_deref().map(|m| m.parse::<ScoreMethod>().map(|m| vec![m])).transpose()?,
                attacked: Some(attack),
                require_checkpoint: true,
            };
            let outcome = run_experiment(&cfg, &opts)?;
            print_metrics(&outcome);
        }
        Cmd::Report { dir } => print!("{}", emit_report(&dir)?),
        Cmd::Selftest => {
            let checks = dropens_core::selftest::run_all();
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(Error::Numerics("self-test failures".to_string()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers()).build_global() {
        log::warn!("could not size the worker pool: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
