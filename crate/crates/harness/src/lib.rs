//! Experiment harness for `tplab`: trains task models, runs the named
//! recipes against checkpoints and writes plot-ready CSV plus JSON
//! metadata, and hosts the invariant suites behind `tplab verify`.

pub mod config;
pub mod recipes;
pub mod verify;

use std::path::{Path, PathBuf};

use thiserror::Error;
use tplab_core::interventions::InterventionError;
use tplab_core::model::{load_checkpoint, Model, ModelConfig, ModelError};
use tplab_core::strategies::StrategyError;
use tplab_core::tasks::{generate_dataset, train, Split, TaskError, TaskKind, TrainReport};

pub use config::Settings;
pub use recipes::{run_recipe, Recipe, RecipeOutput};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown recipe {0:?}")]
    UnknownRecipe(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint does not fit the request: {0}")]
    Mismatch(String),
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl HarnessError {
    /// Process exit code: 2 unknown recipe, 3 checkpoint missing or
    /// mismatched, 4 unwritable output, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::UnknownRecipe(_) => 2,
            HarnessError::Checkpoint { .. } | HarnessError::Mismatch(_) => 3,
            HarnessError::Output { .. } => 4,
            _ => 1,
        }
    }
}

/// Caps rayon's global pool at `TPLAB_THREADS` when set.
pub fn init_threads() -> Result<(), HarnessError> {
    let Ok(v) = std::env::var("TPLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| HarnessError::Config(format!("TPLAB_THREADS={v:?} is not a thread count")))?;
    // an existing global pool is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    Ok(())
}

/// Trains a fresh model on `task` with the given settings.
pub fn train_task(task: TaskKind, settings: &Settings) -> Result<(Model, TrainReport), HarnessError> {
    let config = settings.model_config();
    let mut model = Model::init(config, settings.seed)?;
    let train_cfg = settings.train_config();
    let data = generate_dataset(
        task,
        config.frame_grid,
        settings.train_size,
        settings.seed,
        Split::Train,
    )?;
    let eval = generate_dataset(
        task,
        config.frame_grid,
        settings.eval_size,
        settings.seed + 1,
        Split::Eval,
    )?;
    let report = train(&mut model, &train_cfg, &data, &eval)?;
    Ok((model, report))
}

/// Loads a checkpoint; when `expected` is given the stored config must match.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<Model, HarnessError> {
    if !path.is_file() {
        return Err(HarnessError::Checkpoint {
            path: path.to_path_buf(),
            message: "no such file".into(),
        });
    }
    load_checkpoint(path, expected).map_err(|e| match e {
        ModelError::ConfigMismatch { .. } => HarnessError::Mismatch(e.to_string()),
        other => HarnessError::Checkpoint {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes `<dir>/<recipe>.csv` and `<dir>/<recipe>.json`, creating `dir`.
/// Returns the two paths.
pub fn write_output(out: &RecipeOutput, dir: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| output_error(dir, e))?;
    let csv = dir.join(format!("{}.csv", out.recipe.name()));
    let json = dir.join(format!("{}.json", out.recipe.name()));
    std::fs::write(&csv, out.csv.replace("\r\n", "\n")).map_err(|e| output_error(&csv, e))?;
    let mut meta = serde_json::to_string_pretty(&out.metadata).map_err(|e| output_error(&json, e))?;
    meta.push('\n');
    std::fs::write(&json, meta).map_err(|e| output_error(&json, e))?;
    Ok((csv, json))
}
