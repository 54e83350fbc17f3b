//! Command-line front end: train models, evaluate checkpoints, print
//! recommendations, verify gradients, and sweep hyperparameter grids, all
//! driven by a TOML run configuration.
//!
//! Exit codes are a stable contract: 0 success, 1 usage or config error,
//! 2 data error, 3 numeric failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use dha::config::RunConfig;
use dha::error::{DhaError, Result};
use dha::gradcheck::{run_gradcheck, DEFAULT_TOLERANCE};
use dha::pipeline;

#[derive(Parser)]
#[command(
    name = "dha",
    version,
    about = "Deep heterogeneous recommender: train, evaluate, recommend"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model, writing per-alternation checkpoints, a loss log, and a
    /// snapshot of the resolved config into the output directory
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's run seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the configured holdout split
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the holdout split seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the top-M items for one user as `rank<TAB>item_id<TAB>score`
    Recommend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// User id as it appears in the dataset
        #[arg(long)]
        user: u32,
        #[arg(long = "top-m", default_value_t = 10)]
        top_m: usize,
    },
    /// Compare every analytic gradient against central finite differences
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Seed for the probe instances (defaults to the config seed)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate every cell of the configured hyperparameter grid
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, out, seed } => {
            let mut cfg = RunConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (outcome, _) = pipeline::train_run(&cfg, &out)?;
            for path in &outcome.checkpoints {
                println!("checkpoint\t{}", path.display());
            }
            println!("model\t{}", outcome.model_path.display());
            println!("loss_log\t{}", outcome.loss_log_path.display());
            println!("config\t{}", outcome.config_snapshot_path.display());
            Ok(())
        }
        Cmd::Eval {
            config,
            checkpoint,
            seed,
        } => {
            let cfg = RunConfig::from_path(&config)?;
            let report = pipeline::eval_run(&cfg, &checkpoint, seed)?;
            print!("{}", report.lines());
            Ok(())
        }
        Cmd::Recommend {
            config,
            checkpoint,
            user,
            top_m,
        } => {
            let cfg = RunConfig::from_path(&config)?;
            let recs = pipeline::recommend_run(&cfg, &checkpoint, user, top_m)?;
            for (rank, item, score) in recs {
                println!("{rank}\t{item}\t{score:.6}");
            }
            Ok(())
        }
        Cmd::Gradcheck { config, seed } => {
            let cfg = RunConfig::from_path(&config)?;
            let seed = seed.unwrap_or(cfg.seed);
            // Test hook: name a tensor here to sabotage its analytic gradient
            // and prove the check trips.
            let corrupt = std::env::var("DHA_GRADCHECK_CORRUPT").ok();
            let reports = run_gradcheck(&cfg, seed, corrupt.as_deref())?;
            let mut worst: Option<(&str, f64)> = None;
            for r in &reports {
                let ok = r.passes(DEFAULT_TOLERANCE);
                println!(
                    "{}\t{:.3e}\t{}",
                    r.name,
                    r.max_rel_err,
                    if ok { "PASS" } else { "FAIL" }
                );
                if !ok && worst.is_none() {
                    worst = Some((&r.name, r.max_rel_err));
                }
            }
            match worst {
                None => Ok(()),
                Some((name, err)) => Err(DhaError::GradientCheckFailed {
                    tensor: name.to_string(),
                    err,
                }),
            }
        }
        Cmd::Grid { config } => {
            let cfg = RunConfig::from_path(&config)?;
            for line in pipeline::grid_run(&cfg)? {
                println!("{line}");
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error under the exit-code contract.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
