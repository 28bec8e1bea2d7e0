use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use hmnas_cli::ablation::run_ablation;
use hmnas_cli::config::{parse_config, ExperimentConfig};
use hmnas_cli::gradcheck::{run_suite, TOLERANCE};
use hmnas_cli::pipeline::{Pipeline, Stage};
use hmnas_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "hmnas", about = "Hierarchical-masking architecture search pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and exports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Global seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` applied after the config file; repeatable.
    #[arg(long = "stage-override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train supernet weights and architecture logits (resumes from a partial checkpoint).
    TrainSupernet,
    /// Learn hierarchical masks on the frozen supernet.
    SearchMask,
    /// Fine-tune the unmasked weights.
    Finetune,
    /// Export the derived architecture graph, histograms and edge importances.
    Derive,
    /// Report test loss/accuracy and parameter counts before and after masking.
    Eval,
    /// Run every stage in order.
    Run,
    /// Compare the search against heuristic, single-level, random and random-init baselines.
    Ablate,
    /// Run the finite-difference gradient suite.
    CheckGrad {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let (mut cfg, lines) = match &cli.config {
        Some(path) => parse_config(path)?,
        None => (ExperimentConfig::default(), Default::default()),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate(&lines)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::CheckGrad { seeds } = cli.command {
        let start = Instant::now();
        let results = run_suite(seeds, |c| {
            let status = if c.passed() { "ok" } else { "FAIL" };
            println!("{status:4} {:<40} seed {:>2}  max rel err {:.3e}", c.name, c.seed, c.max_rel_error);
        })?;
        let failed = results.iter().filter(|c| !c.passed()).count();
        println!("{} checks, {failed} failed, tolerance {TOLERANCE:e}, {:.1}s", results.len(), start.elapsed().as_secs_f64());
        return if failed == 0 { Ok(()) } else { Err(CliError::GradCheck(format!("{failed} checks above tolerance"))) };
    }

    let cfg = load_config(cli)?;
    let p = Pipeline::new(cfg, &cli.out)?;
    let stages: &[Stage] = match cli.command {
        Command::TrainSupernet => &[Stage::TrainSupernet],
        Command::SearchMask => &[Stage::SearchMask],
        Command::Finetune => &[Stage::Finetune],
        Command::Derive => &[Stage::Derive],
        Command::Eval => &[Stage::Eval],
        Command::Run => &Stage::ALL,
        Command::Ablate => {
            let t = run_ablation(&p)?;
            for a in &t.arms {
                println!(
                    "arm {} ({}): test error {:.4} over {} run(s), epochs-to-target {:.1}",
                    a.arm,
                    a.description,
                    a.mean_error(),
                    a.test_errors.len(),
                    a.mean_epochs_to_target()
                );
            }
            return Ok(());
        }
        Command::CheckGrad { .. } => unreachable!("handled above"),
    };
    if let Some(r) = p.run(stages)? {
        println!("supernet     test loss {:.4} acc {:.4} params {}", r.supernet.loss, r.supernet.accuracy, r.supernet.params);
        println!("masked       test loss {:.4} acc {:.4} params {}", r.masked.loss, r.masked.accuracy, r.masked.params);
        println!("fine-tuned   test loss {:.4} acc {:.4} params {}", r.final_model.loss, r.final_model.accuracy, r.final_model.params);
        println!("parameter fraction kept {:.4}", r.param_fraction());
    }
    println!("artifacts in {}", p.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
