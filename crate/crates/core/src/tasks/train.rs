use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Result, SyntheticSample, TaskError};
use crate::interventions::{run_distribution, InterventionSpec, Probe};
use crate::metrics::{compute_pc, mean};
use crate::model::{assign_position_ids, loss_and_grad, Model, PositionScheme, TrainExample, Weights};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Samples drawn from the eval split by callers that generate data.
    pub eval_size: usize,
    /// Evaluate every this many steps; `0` evaluates only at the end.
    pub eval_every: usize,
    /// Stop at the first periodic evaluation reaching this accuracy.
    pub target_accuracy: Option<f64>,
    /// Decoupled decay applied to weight matrices (not gains or biases).
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            lr: 3e-4,
            seed: 0,
            optimizer: Optimizer::Adam,
            eval_size: 256,
            eval_every: 250,
            target_accuracy: None,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub mean_gt_prob: f64,
    /// Mean ground-truth probability change, when interventions were given.
    pub mean_pc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// `(steps completed, eval accuracy)` at each periodic evaluation.
    pub evals: Vec<(usize, f64)>,
    pub steps_run: usize,
    pub final_eval: EvalReport,
}

fn example(model: &Model, s: &SyntheticSample) -> Result<TrainExample> {
    let layout = s.layout(&model.config)?;
    Ok(TrainExample {
        tokens: s.tokens(),
        ids: assign_position_ids(&layout, PositionScheme::Default),
        answer: s.answer,
    })
}

struct Adam {
    m: Weights,
    v: Weights,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn step(&mut self, w: &mut Weights, g: &Weights, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let it = w
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(self.m.as_mut_slice().iter_mut().zip(self.v.as_mut_slice()));
        for ((w, &g), (m, v)) in it {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Minimizes the cross-entropy of the answer token at the final position.
pub fn train(
    model: &mut Model,
    config: &TrainConfig,
    data: &[SyntheticSample],
    eval: &[SyntheticSample],
) -> Result<TrainReport> {
    if data.is_empty() || config.batch_size == 0 {
        return Err(TaskError::EmptyDataset);
    }
    if model.config.vocab_size < super::vocab::SIZE {
        return Err(TaskError::VocabTooSmall {
            needed: super::vocab::SIZE,
            found: model.config.vocab_size,
        });
    }
    let examples = data.iter().map(|s| example(model, s)).collect::<Result<Vec<_>>>()?;
    let mut rng = Rng::new(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut grad = Weights::zeros_like(&model.weights);
    let mut adam = Adam {
        m: Weights::zeros_like(&model.weights),
        v: Weights::zeros_like(&model.weights),
        t: 0,
    };
    let decayed: Vec<std::ops::Range<usize>> = model
        .weights
        .index()
        .entries()
        .iter()
        .filter(|e| e.rows > 1 && e.cols > 1)
        .map(|e| e.offset..e.offset + e.len())
        .collect();
    let mut report = TrainReport::default();
    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        batch.clear();
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        grad.fill(0.0);
        let stats = loss_and_grad(model, &batch, &mut grad)?;
        if !stats.loss.is_finite() || !grad.is_finite() {
            return Err(TaskError::Diverged { step });
        }
        match config.optimizer {
            Optimizer::Sgd => model.weights.add_scaled(&grad, -config.lr),
            Optimizer::Adam => adam.step(&mut model.weights, &grad, config.lr),
        }
        if config.weight_decay > 0.0 {
            let shrink = 1.0 - config.lr * config.weight_decay;
            for r in &decayed {
                for v in &mut model.weights.as_mut_slice()[r.clone()] {
                    *v *= shrink;
                }
            }
        }
        if !model.weights.is_finite() {
            return Err(TaskError::Diverged { step });
        }
        report.losses.push(stats.loss);
        report.steps_run = step + 1;
        let done = step + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 && !eval.is_empty() && done < config.steps {
            let acc = evaluate(model, eval, None)?.accuracy;
            report.evals.push((done, acc));
            if config.target_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    if !eval.is_empty() {
        report.final_eval = evaluate(model, eval, None)?;
        if report.evals.last().map(|e| e.0) != Some(report.steps_run) {
            report.evals.push((report.steps_run, report.final_eval.accuracy));
        }
    }
    Ok(report)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and mean ground-truth probability, under `interventions` when
/// given, in which case the mean change against the plain run is reported
/// as well.
pub fn evaluate(
    model: &Model,
    data: &[SyntheticSample],
    interventions: Option<&[InterventionSpec]>,
) -> Result<EvalReport> {
    let probes = data
        .iter()
        .map(|s| s.to_probe(&model.config))
        .collect::<Result<Vec<Probe>>>()?;
    let rows: Vec<(bool, f64, Option<f64>)> = probes
        .par_iter()
        .map(|p| {
            let base = run_distribution(model, p, &[])?;
            let gt = p.answer as usize;
            let Some(bundle) = interventions else {
                return Ok((argmax(&base) == gt, base[gt], None));
            };
            let q = run_distribution(model, p, bundle)?;
            let pc = compute_pc(&q, &base, gt).map_err(crate::interventions::InterventionError::from)?;
            Ok((argmax(&q) == gt, q[gt], Some(pc)))
        })
        .collect::<std::result::Result<_, crate::interventions::InterventionError>>()?;
    let n = rows.len();
    let probs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let pcs: Vec<f64> = rows.iter().filter_map(|r| r.2).collect();
    Ok(EvalReport {
        n,
        accuracy: rows.iter().filter(|r| r.0).count() as f64 / n.max(1) as f64,
        mean_gt_prob: mean(&probs),
        mean_pc: interventions.map(|_| mean(&pcs)),
    })
}
