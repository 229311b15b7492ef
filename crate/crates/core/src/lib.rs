//! Building blocks for probing how a small causal transformer uses temporal
//! and spatial structure in tokenized video: the model and its position
//! encodings, attention interventions, synthetic temporal tasks, inference
//! strategies that prune video tokens, and the perturbation metric.

pub mod interventions;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod strategies;
pub mod tasks;
