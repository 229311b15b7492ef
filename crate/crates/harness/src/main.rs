//! `tplab` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tplab_core::model::save_checkpoint;
use tplab_core::tasks::TaskKind;
use tplab_harness::verify::run_suite;
use tplab_harness::{init_threads, load_model, run_recipe, train_task, write_output, HarnessError, Recipe, Settings};

#[derive(Parser)]
#[command(
    name = "tplab",
    version,
    about = "Train toy video-language models and run intervention recipes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` settings file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on one synthetic task and save a checkpoint.
    Train {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a named recipe against a checkpoint.
    Run {
        #[arg(long)]
        recipe: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run an invariant suite: masks, eviction, gradient, invariants or all.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// List the recipe names.
    Recipes,
}

fn settings(common: &Common, extra: &[String]) -> Result<Settings, HarnessError> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    s.apply_pairs(&common.set)?;
    s.apply_pairs(extra)?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn flag<T: ToString>(key: &str, v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| format!("{key}={}", v.to_string()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train {
            task,
            out,
            steps,
            lr,
            common,
        } => {
            let extra: Vec<String> = [flag("steps", &steps), flag("lr", &lr)].into_iter().flatten().collect();
            let s = settings(&common, &extra)?;
            let (model, report) = train_task(task, &s)?;
            save_checkpoint(&model, &out).map_err(|e| HarnessError::Output {
                path: out.clone(),
                message: e.to_string(),
            })?;
            println!(
                "trained {task} for {} steps: eval accuracy {:.4} on {} samples; saved {}",
                report.steps_run,
                report.final_eval.accuracy,
                report.final_eval.n,
                out.display()
            );
        }
        Command::Run {
            recipe,
            ckpt,
            out,
            task,
            n_samples,
            common,
        } => {
            let recipe: Recipe = recipe.parse()?;
            let extra: Vec<String> = [flag("task", &task), flag("n_samples", &n_samples)]
                .into_iter()
                .flatten()
                .collect();
            let s = settings(&common, &extra)?;
            let expected = s.constrains_model().then(|| s.model_config());
            let model = load_model(&ckpt, expected.as_ref())?;
            let output = run_recipe(recipe, &model, &s)?;
            let (csv, json) = write_output(&output, &out)?;
            println!("{recipe}: wrote {} and {}", csv.display(), json.display());
        }
        Command::Verify { suite } => {
            let checks = run_suite(&suite)?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{c}");
            }
            anyhow::ensure!(failed == 0, "{failed} of {} checks failed", checks.len());
        }
        Command::Recipes => {
            for r in Recipe::ALL {
                println!("{:<22} {}", r.name(), r.description());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()).context("tplab") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<HarnessError>().map_or(1, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
