//! The `omiga` command line.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors (including
//! a `verify` run whose asserted checks fail), 2 for numeric failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::Dataset;
use crate::envs::{BehaviorPolicy, Env, EnvConfig, Quality};
use crate::error::{Error, Result};
use crate::oracle;
use crate::trainer::{self, Checkpoint, CheckpointKind, EvalMode, Stats, TrainConfig, Variant};
use crate::verify::{self, VerifyOptions};

/// Payoff used by `verify` when no environment file is given: additively
/// decomposable, so the linear mixer can represent it exactly.
pub const DEFAULT_VERIFY_PAYOFF: [f64; 4] = [1.0, 0.2, 0.5, -0.3];

#[derive(Debug, Parser)]
#[command(name = "omiga", version, about = "Offline cooperative multi-agent RL with decomposed regularized values")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out a behavior policy and write a dataset directory.
    GenData {
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value = "medium")]
        quality: Quality,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend datasets by whole episodes.
    MixData {
        /// Repeat once per input dataset.
        #[arg(long = "dataset", required = true)]
        datasets: Vec<PathBuf>,
        /// Comma-separated, one per dataset, summing to 1.
        #[arg(long, value_delimiter = ',', required = true)]
        proportions: Vec<f64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train OMIGA on a dataset.
    Train(TrainArgs),
    /// Train the behavior-cloning baseline.
    BcTrain(TrainArgs),
    /// Evaluate a checkpoint's decentralized policies.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the dataset environment recorded in the run.
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, default_value_t = trainer::DEFAULT_EVAL_EPISODES)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "stochastic")]
        mode: EvalMode,
    },
    /// Solve the regularized MDP of an environment exactly.
    OracleSolve {
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        gamma: Option<f64>,
        /// Behavior policy the regularizer refers to.
        #[arg(long, default_value = "uniform")]
        quality: Quality,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train against the oracle and check the results.
    Verify {
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "uniform")]
        quality: Quality,
        #[arg(long, default_value = "verify_out")]
        out: PathBuf,
    },
    /// Aggregate final evaluation returns over run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for `summary.csv` and `curves.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluation environment; defaults to the one recorded in the dataset.
    #[arg(long)]
    env: Option<PathBuf>,
    /// JSON file with any subset of the training configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    mode: Option<EvalMode>,
    /// Comma-separated hidden widths of the agent networks.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            env,
            quality,
            episodes,
            seed,
            out,
        } => {
            let config = EnvConfig::load(&env)?;
            let behavior = BehaviorPolicy::for_env(&Env::from_config(&config)?, quality)?;
            let data = Dataset::generate(&config, &behavior, episodes, seed)?;
            data.save(&out)?;
            println!(
                "wrote {} transitions ({} episodes, average return {:.4}) to {}",
                data.len(),
                data.manifest.n_episodes,
                data.manifest.avg_return,
                out.display()
            );
            Ok(())
        }
        Command::MixData {
            datasets,
            proportions,
            seed,
            out,
        } => {
            let loaded = datasets.iter().map(Dataset::load).collect::<Result<Vec<_>>>()?;
            let mixed = Dataset::mix(&loaded, &proportions, seed)?;
            mixed.save(&out)?;
            println!(
                "wrote {} episodes ({} transitions) to {}",
                mixed.manifest.n_episodes,
                mixed.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train(args) => run_training(&args, false),
        Command::BcTrain(args) => run_training(&args, true),
        Command::Eval {
            checkpoint,
            env,
            episodes,
            seed,
            mode,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let env_config = match env {
                Some(path) => EnvConfig::load(path)?,
                None => run_env_config(&checkpoint)?,
            };
            let env = Env::from_config(&env_config)?;
            let stats = trainer::evaluate(&ckpt.policy()?, &env, episodes, seed, mode)?;
            println!(
                "{{\"episodes\":{episodes},\"mode\":\"{mode}\",\"mean_return\":{},\"std_return\":{}}}",
                stats.mean, stats.std
            );
            Ok(())
        }
        Command::OracleSolve {
            env,
            alpha,
            gamma,
            quality,
            tol,
            out,
        } => {
            let config = EnvConfig::load(&env)?;
            let environment = Env::from_config(&config)?;
            let mut mdp = environment.tabular_export()?;
            if let Some(g) = gamma {
                mdp.gamma = g;
            }
            let mu = BehaviorPolicy::for_env(&environment, quality)?.joint_policy(&mdp)?;
            let solution = oracle::solve(&mdp, &mu, alpha, tol)?;
            let text = serde_json::to_string_pretty(&solution.report())
                .map_err(|e| Error::Input(format!("report serialization: {e}")))?;
            match out {
                Some(path) => fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e)),
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
        Command::Verify {
            env,
            alpha,
            seed,
            steps,
            quality,
            out,
        } => {
            let config = match env {
                Some(path) => EnvConfig::load(path)?,
                None => EnvConfig::matrix_game(DEFAULT_VERIFY_PAYOFF.to_vec()),
            };
            let mut options = VerifyOptions::new(alpha, seed);
            options.quality = quality;
            if let Some(steps) = steps {
                options.train.steps = steps;
            }
            let report = verify::verify(&config, &options, Some(&out))?;
            for c in &report.checks {
                let status = match (c.asserted, c.passed) {
                    (false, _) => "info",
                    (true, true) => "PASS",
                    (true, false) => "FAIL",
                };
                println!("{status:4} {:40} {:>14.6e} (threshold {:e})", c.name, c.value, c.threshold);
            }
            println!("report written to {}", out.join("report.json").display());
            if report.passed {
                Ok(())
            } else {
                Err(Error::Consistency("asserted verification checks failed".into()))
            }
        }
        Command::Report { runs, out } => {
            let text = report(&runs, out.as_deref())?;
            print!("{text}");
            Ok(())
        }
    }
}

fn load_train_config(args: &TrainArgs, env_gamma: f64) -> Result<TrainConfig> {
    let (mut config, file_sets_gamma) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
            let sets_gamma = value.get("gamma").is_some();
            let config: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Parse {
                path: path.clone(),
                line: 1,
                message: e.to_string(),
            })?;
            (config, sets_gamma)
        }
        None => (TrainConfig::default(), false),
    };
    if !file_sets_gamma {
        config.gamma = env_gamma;
    }
    config.seed = args.seed;
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.gamma {
        config.gamma = v;
    }
    if let Some(v) = args.tau {
        config.tau = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.batch {
        config.batch_size = v;
    }
    if let Some(v) = args.variant {
        config.variant = v;
    }
    if let Some(v) = args.mode {
        config.eval_mode = v;
    }
    if let Some(v) = &args.hidden {
        config.hidden = v.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run_training(args: &TrainArgs, behavior_cloning: bool) -> Result<()> {
    let data = Dataset::load(&args.dataset)?;
    let env_config = match &args.env {
        Some(path) => EnvConfig::load(path)?,
        None => data.manifest.env.clone(),
    };
    let env = Env::from_config(&env_config)?;
    let config = load_train_config(args, env_config.gamma)?;
    let output = if behavior_cloning {
        trainer::bc_train(&data, &env, &config)?
    } else {
        trainer::train(&data, &env, &config)?
    };
    trainer::save_run(&output, &args.out)?;
    let env_path = args.out.join("env.json");
    let text = serde_json::to_string_pretty(&env_config).map_err(|e| Error::Input(e.to_string()))? + "\n";
    fs::write(&env_path, text).map_err(|e| Error::io(&env_path, e))?;
    if let Some(last) = output.metrics.last() {
        println!("step {}: eval return {:.4}", last.step, last.eval_return);
    }
    println!("run written to {}", args.out.display());
    Ok(())
}

/// Environment saved next to a checkpoint by `train` / `bc-train`.
fn run_env_config(checkpoint: &Path) -> Result<EnvConfig> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let path = dir.join("env.json");
    if !path.exists() {
        return Err(Error::Usage(format!(
            "{} not found; pass --env explicitly",
            path.display()
        )));
    }
    EnvConfig::load(path)
}

fn run_label(ckpt: &Checkpoint) -> String {
    match ckpt.kind {
        CheckpointKind::Bc => "bc".into(),
        CheckpointKind::Omiga => format!("omiga-{} alpha={}", ckpt.config.variant, ckpt.config.alpha),
    }
}

/// Builds the comparison table for `runs`; writes `summary.csv` and
/// `curves.csv` into `out` when given.
pub fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Usage("report needs at least one run directory".into()));
    }
    let mut env_name: Option<String> = None;
    // label -> per-run curves
    let mut groups: BTreeMap<String, Vec<Vec<(usize, f64)>>> = BTreeMap::new();
    for dir in runs {
        let metrics_path = dir.join("metrics.csv");
        if !metrics_path.exists() {
            return Err(Error::Usage(format!("{} has no metrics.csv", dir.display())));
        }
        let curve = trainer::read_eval_returns(&metrics_path)?;
        if curve.is_empty() {
            return Err(Error::Usage(format!("{} has an empty metrics.csv", dir.display())));
        }
        let ckpt = Checkpoint::load(dir.join("checkpoint.json"))?;
        match &env_name {
            None => env_name = Some(ckpt.env_name.clone()),
            Some(name) if *name != ckpt.env_name => {
                return Err(Error::Param(format!(
                    "runs mix environments: {name} and {} ({})",
                    ckpt.env_name,
                    dir.display()
                )))
            }
            Some(_) => {}
        }
        groups.entry(run_label(&ckpt)).or_default().push(curve);
    }
    let env_name = env_name.unwrap_or_default();

    let mut table = format!("{:<28} {:>6} {:>12} {:>12}\n", "run", "seeds", "mean", "std");
    let mut summary = String::from("env,run,seeds,mean_return,std_return\n");
    let mut curves = String::from("env,run,step,mean_return,std_return\n");
    for (label, group) in &groups {
        let finals: Vec<f64> = group.iter().map(|c| c.last().map_or(f64::NAN, |x| x.1)).collect();
        let s = Stats::of(&finals);
        let _ = writeln!(table, "{label:<28} {:>6} {:>12.4} {:>12.4}", group.len(), s.mean, s.std);
        let _ = writeln!(summary, "{env_name},{label},{},{},{}", group.len(), s.mean, s.std);
        let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for curve in group {
            for &(step, ret) in curve {
                by_step.entry(step).or_default().push(ret);
            }
        }
        for (step, values) in by_step {
            let s = Stats::of(&values);
            let _ = writeln!(curves, "{env_name},{label},{step},{},{}", s.mean, s.std);
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("summary.csv", &summary), ("curves.csv", &curves)] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(table)
}
