//! The ground-truth probability change metric and its aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("ground-truth token {gt} is outside a distribution of {len} entries")]
    TokenOutOfRange { gt: usize, len: usize },
    #[error("{which} distribution sums to {sum}, not 1")]
    NotADistribution { which: &'static str, sum: f64 },
    #[error("distributions have different lengths ({perturbed} vs {base})")]
    LengthMismatch { perturbed: usize, base: usize },
}

const SUM_TOLERANCE: f64 = 1e-6;

fn check(which: &'static str, p: &[f64]) -> Result<(), MetricsError> {
    let sum = neumaier_sum(p.iter().copied());
    if (sum - 1.0).abs() > SUM_TOLERANCE || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(MetricsError::NotADistribution { which, sum });
    }
    Ok(())
}

/// `perturbed[gt] - base[gt]`, the change in ground-truth probability.
pub fn compute_pc(perturbed: &[f64], base: &[f64], gt: usize) -> Result<f64, MetricsError> {
    if perturbed.len() != base.len() {
        return Err(MetricsError::LengthMismatch {
            perturbed: perturbed.len(),
            base: base.len(),
        });
    }
    if gt >= base.len() {
        return Err(MetricsError::TokenOutOfRange { gt, len: base.len() });
    }
    check("perturbed", perturbed)?;
    check("base", base)?;
    Ok(perturbed[gt] - base[gt])
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Unweighted mean with compensated summation; `0` for an empty input.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        neumaier_sum(values.iter().copied()) / values.len() as f64
    }
}

/// One point of a layer or window sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcPoint {
    /// Starting layer of the window, or a condition index for non-swept recipes.
    pub window: usize,
    /// Human-readable condition name (e.g. `reverse_pe`); empty for plain sweeps.
    #[serde(default)]
    pub condition: String,
    pub mean_pc: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub recipe: String,
    pub task: String,
    pub seed: u64,
    pub points: Vec<PcPoint>,
}

/// Flat JSON record, one per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcRecord {
    pub recipe: String,
    pub task: String,
    pub window: usize,
    pub mean_pc: f64,
    pub n: usize,
}

impl PerturbationResult {
    pub fn new(recipe: impl Into<String>, task: impl Into<String>, seed: u64) -> Self {
        Self {
            recipe: recipe.into(),
            task: task.into(),
            seed,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, window: usize, condition: impl Into<String>, values: &[f64]) {
        self.points.push(PcPoint {
            window,
            condition: condition.into(),
            mean_pc: mean(values),
            n: values.len(),
        });
    }

    pub fn records(&self) -> Vec<PcRecord> {
        self.points
            .iter()
            .map(|p| PcRecord {
                recipe: self.recipe.clone(),
                task: self.task.clone(),
                window: p.window,
                mean_pc: p.mean_pc,
                n: p.n,
            })
            .collect()
    }

    /// All points lie in `[-1, 1]` and share one sample count.
    pub fn is_consistent(&self) -> bool {
        let n0 = self.points.first().map(|p| p.n);
        self.points
            .iter()
            .all(|p| (-1.0..=1.0).contains(&p.mean_pc) && Some(p.n) == n0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records()).expect("records serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax, Rng};
    use proptest::prelude::*;

    #[test]
    fn subtraction_examples() {
        let a = [0.8, 0.2];
        let b = [0.5, 0.5];
        assert!((compute_pc(&a, &b, 0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(compute_pc(&a, &a, 1).unwrap(), 0.0);
        assert!(compute_pc(&a, &b, 2).is_err());
        assert!(compute_pc(&[0.7, 0.7], &b, 0).is_err());
    }

    #[test]
    fn batch_mean_is_mean_of_samples() {
        let mut rng = Rng::new(4);
        let mut pcs = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..200 {
            let l1: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
            let l2: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
            let g = rng.below(10);
            let (p, q) = (softmax(&l1), softmax(&l2));
            pcs.push(compute_pc(&p, &q, g).unwrap());
            raw.push((p[g], q[g]));
        }
        let direct: f64 = raw.iter().map(|(a, b)| a - b).sum::<f64>() / raw.len() as f64;
        assert!((mean(&pcs) - direct).abs() < 1e-12);
    }

    #[test]
    fn compensated_sum_is_order_independent() {
        let mut rng = Rng::new(5);
        let mut v: Vec<f64> = (0..10_000)
            .map(|_| rng.normal() * 10f64.powi(rng.below(12) as i32 - 6))
            .collect();
        let a = neumaier_sum(v.iter().copied());
        rng.shuffle(&mut v);
        let b = neumaier_sum(v.iter().copied());
        assert!((a - b).abs() < 1e-9);
        assert_eq!(neumaier_sum([1.0, 1e100, 1.0, -1e100]), 2.0);
    }

    #[test]
    fn result_records_and_consistency() {
        let mut r = PerturbationResult::new("fig2_pe_removal", "direction", 0);
        r.push(0, "", &[-0.5, -0.1]);
        r.push(1, "", &[0.0, 0.1]);
        assert!(r.is_consistent());
        let recs = r.records();
        assert_eq!(recs.len(), 2);
        assert!((recs[0].mean_pc + 0.3).abs() < 1e-15);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json[1]["window"], 1);
        assert_eq!(json[0]["n"], 2);
        r.push(2, "", &[0.0]);
        assert!(!r.is_consistent());
    }

    proptest! {
        #[test]
        fn antisymmetric(a in proptest::collection::vec(-5.0f64..5.0, 2..12),
                         b in proptest::collection::vec(-5.0f64..5.0, 2..12),
                         g in 0usize..12) {
            let n = a.len().min(b.len());
            let (p, q) = (softmax(&a[..n]), softmax(&b[..n]));
            let g = g % n;
            let x = compute_pc(&p, &q, g).unwrap();
            let y = compute_pc(&q, &p, g).unwrap();
            prop_assert_eq!(x, -y);
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }
}
