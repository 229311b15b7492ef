//! Flat `key = value` settings shared by the config file and the CLI.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! skipped. Recognised keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `task` | `direction`, `order` or `yes_no` | recipe-specific |
//! | `seed` | model and training seed | `0` |
//! | `data_seed` | seed of the generated eval probes | `1000` |
//! | `steps` | training steps | `5000` |
//! | `lr` | learning rate | `0.001` |
//! | `batch_size` | training batch | `8` |
//! | `optimizer` | `adam` or `sgd` | `adam` |
//! | `weight_decay` | decoupled weight decay | `0` |
//! | `train_size` | generated training samples | `20000` |
//! | `eval_size` | held-out samples for periodic evaluation | `256` |
//! | `eval_every` | steps between evaluations | `250` |
//! | `target_accuracy` | early-stop accuracy, `none` to disable | `0.99` |
//! | `n_samples` | probes per recipe | `200` |
//! | `window` | layer window size of sweeps | `2` |
//! | `stride` | layer window stride | `1` |
//! | `radius` | spatial radius of spatiotemporal configs | `1` |
//! | `pe_mode` | `none`, `rotary_1d` or `rotary_3d` | `rotary_3d` |
//! | `n_layers`, `d_model`, `n_heads`, `d_head` | model shape | 6, 64, 4, 16 |

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use tplab_core::model::{ModelConfig, PeMode};
use tplab_core::tasks::{Optimizer, TaskKind, TrainConfig};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub task: Option<TaskKind>,
    pub seed: u64,
    pub data_seed: u64,
    pub steps: usize,
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub eval_every: usize,
    pub target_accuracy: Option<f64>,
    pub n_samples: usize,
    pub window: usize,
    pub stride: usize,
    pub radius: usize,
    pub pe_mode: Option<PeMode>,
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_head: Option<usize>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            task: None,
            seed: 0,
            data_seed: 1000,
            steps: 5000,
            lr: None,
            batch_size: 8,
            optimizer: Optimizer::Adam,
            weight_decay: 0.0,
            train_size: 20_000,
            eval_size: 256,
            eval_every: 250,
            target_accuracy: Some(0.99),
            n_samples: 200,
            window: 2,
            stride: 1,
            radius: 1,
            pe_mode: None,
            n_layers: None,
            d_model: None,
            n_heads: None,
            d_head: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad value {value:?} for {key}")))
}

impl Settings {
    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        match key.trim() {
            "task" => self.task = Some(v.parse().map_err(HarnessError::Config)?),
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr" => self.lr = Some(parse(key, v)?),
            "batch_size" => self.batch_size = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse().map_err(HarnessError::Config)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "train_size" => self.train_size = parse(key, v)?,
            "eval_size" => self.eval_size = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "target_accuracy" => self.target_accuracy = if v == "none" { None } else { Some(parse(key, v)?) },
            "n_samples" => self.n_samples = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "radius" => self.radius = parse(key, v)?,
            "pe_mode" => self.pe_mode = Some(v.parse().map_err(HarnessError::Config)?),
            "n_layers" => self.n_layers = Some(parse(key, v)?),
            "d_model" => self.d_model = Some(parse(key, v)?),
            "n_heads" => self.n_heads = Some(parse(key, v)?),
            "d_head" => self.d_head = Some(parse(key, v)?),
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_pairs<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<(), HarnessError> {
        for p in pairs {
            let (k, v) = p
                .as_ref()
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("expected key=value, got {:?}", p.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Model shape: defaults overridden by any shape keys.
    pub fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::default();
        if let Some(pe) = self.pe_mode {
            c.pe_mode = pe;
        }
        if let Some(n) = self.n_layers {
            c.n_layers = n;
        }
        if let Some(d) = self.d_model {
            c.d_model = d;
        }
        if let Some(h) = self.n_heads {
            c.n_heads = h;
        }
        if let Some(d) = self.d_head {
            c.d_head = d;
        }
        c
    }

    /// Whether any model-shape key was given.
    pub fn constrains_model(&self) -> bool {
        self.pe_mode.is_some()
            || self.n_layers.is_some()
            || self.d_model.is_some()
            || self.n_heads.is_some()
            || self.d_head.is_some()
    }

    /// Learning rate used when none is set.
    pub const DEFAULT_LR: f64 = 1e-3;

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr.unwrap_or(Self::DEFAULT_LR),
            seed: self.seed,
            optimizer: self.optimizer,
            eval_size: self.eval_size,
            eval_every: self.eval_every,
            target_accuracy: self.target_accuracy,
            weight_decay: self.weight_decay,
        }
    }

    /// All settings as ordered key/value strings, for metadata files.
    pub fn to_map(&self) -> BTreeMap<String, serde_json::Value> {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(m)) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        }
    }
}
