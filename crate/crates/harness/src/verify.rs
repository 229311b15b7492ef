//! Invariant suites run by `tplab verify` and by the acceptance target.
//!
//! Every check compares the implementation against an independent
//! computation: brute-force pair enumeration, a dense masked run, central
//! finite differences, or a second identical run.

use std::time::Instant;

use tplab_core::interventions::{compile, InterventionSpec, KnockoutSpec, LayerSet, Probe};
use tplab_core::model::{
    assign_position_ids, build_layout, loss_and_grad, write_checkpoint, FrameGrid, KvCache, Model, ModelConfig, PeMode,
    PositionScheme, RecordSpec, RunPlan, TokenLayout, TrainExample, Weights,
};
use tplab_core::numerics::Rng;
use tplab_core::strategies::{apply_strategy, Strategy, StrategySchedule};

use crate::config::Settings;
use crate::recipes::{run_recipe, Recipe};
use crate::{train_task, HarnessError};

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

pub const SUITES: [&str; 5] = ["masks", "eviction", "gradient", "invariants", "all"];

/// Runs a named suite.
pub fn run_suite(name: &str) -> Result<Vec<Check>, HarnessError> {
    Ok(match name {
        "masks" => vec![mask_oracle(200, 1)?],
        "eviction" => vec![eviction_equivalence(None, 100, 2)?],
        "gradient" => vec![gradient_check(3)?],
        "invariants" => structural_invariants(4)?,
        "all" => {
            let mut v = Vec::new();
            for s in &SUITES[..4] {
                v.extend(run_suite(s)?);
            }
            v
        }
        other => {
            return Err(HarnessError::Config(format!(
                "unknown suite {other:?}; known: {SUITES:?}"
            )))
        }
    })
}

fn random_tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

fn subset(rng: &mut Rng, n: usize, p: f64) -> Vec<usize> {
    (0..n).filter(|_| rng.uniform() < p).collect()
}

fn small_config(rng: &mut Rng, max_layers: usize) -> ModelConfig {
    let pe = [PeMode::None, PeMode::Rotary1d, PeMode::Rotary3d][rng.below(3)];
    ModelConfig {
        n_layers: 1 + rng.below(max_layers),
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        ffn_mult: 2,
        pe_mode: pe,
        vocab_size: 16,
        frame_grid: FrameGrid {
            frames: 1 + rng.below(3),
            height: 1 + rng.below(2),
            width: 1 + rng.below(3),
        },
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Zero-weight attention pairs equal the brute-force enumeration of the
/// blocked `(target, source)` pairs on random small models and specs.
pub fn mask_oracle(n_specs: usize, seed: u64) -> Result<Check, HarnessError> {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut checked = 0;
    let mut mismatches = 0;
    while checked < n_specs {
        let cfg = small_config(&mut rng, 4);
        let layout = build_layout(&cfg, 1 + rng.below(3), 1 + rng.below(4))?;
        let n = layout.total_len;
        let n_blocks = 1 + rng.below(3);
        let rects: Vec<(Vec<usize>, Vec<usize>)> = (0..n_blocks)
            .map(|_| (subset(&mut rng, n, 0.4), subset(&mut rng, n, 0.4)))
            .collect();
        let layers: Vec<usize> = subset(&mut rng, cfg.n_layers, 0.6);
        let mut spec = KnockoutSpec::empty();
        for (t, s) in &rects {
            spec = spec.union(KnockoutSpec::new(t.clone(), s.clone()));
        }
        let spec = spec.on_layers(LayerSet::Only(layers.clone()));
        let model = Model::init(cfg, rng.next_u64())?;
        let tokens = random_tokens(&mut rng, n, cfg.vocab_size);
        let ids = assign_position_ids(&layout, PositionScheme::Default);
        let mut run = match compile(
            &[InterventionSpec::knockout(spec)],
            cfg.n_layers,
            &layout,
            &tokens,
            &ids,
        ) {
            Ok(r) => r,
            // specs that would leave a row with no source are rejected; draw another
            Err(_) => continue,
        };
        run.plan.record(RecordSpec {
            attention: true,
            hidden: false,
        });
        let out = model.forward(&run.tokens, &layout, &run.ids, &run.plan)?;
        for l in 0..cfg.n_layers {
            for head in &out.activations.attention[l] {
                for i in 0..n {
                    for j in 0..=i {
                        let expect = layers.contains(&l) && rects.iter().any(|(t, s)| t.contains(&i) && s.contains(&j));
                        if (head.get(i, j) == 0.0) != expect {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Check::new(
        "mask_oracle",
        mismatches == 0 && secs < 10.0,
        format!("{checked} specs, {mismatches} mismatched pairs, {secs:.2}s (limit 10s)"),
    ))
}

fn eviction_gap(model: &Model, probe: &Probe, band: (f64, f64)) -> Result<f64, HarnessError> {
    let sched = StrategySchedule::new(Strategy::S3KvFrameExit).with_band(band.0, band.1);
    let run = apply_strategy(&model.config, sched, &probe.layout)?;
    let (evicted, _) = run.forward(model, probe)?;
    let Some(ko) = run.equivalent_knockout(&probe.layout) else {
        return Ok(0.0);
    };
    let ids = assign_position_ids(&probe.layout, PositionScheme::Default);
    let dense = compile(
        &[InterventionSpec::knockout(ko)],
        model.config.n_layers,
        &probe.layout,
        &probe.tokens,
        &ids,
    )?;
    let masked = model.forward(&dense.tokens, &probe.layout, &dense.ids, &dense.plan)?;
    Ok(max_abs_diff(evicted.logits.data(), masked.logits.data()))
}

/// `s3` logits against the dense knockout that blocks every token from the
/// visual tokens over the same layers. With a model, `n` probes of it are
/// used; without one, `n` random models and inputs.
pub fn eviction_equivalence_on(model: &Model, probes: &[Probe]) -> Result<Check, HarnessError> {
    let mut worst: f64 = 0.0;
    for p in probes {
        worst = worst.max(eviction_gap(model, p, Strategy::S3KvFrameExit.default_band())?);
    }
    Ok(Check::new(
        "eviction_equivalence_trained",
        worst <= 1e-6,
        format!("{} probes, max |logit diff| {worst:.3e} (limit 1e-6)", probes.len()),
    ))
}

pub fn eviction_equivalence(model: Option<(&Model, &[Probe])>, n: usize, seed: u64) -> Result<Check, HarnessError> {
    if let Some((m, probes)) = model {
        return eviction_equivalence_on(m, &probes[..n.min(probes.len())]);
    }
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let cfg = small_config(&mut rng, 6);
        let model = Model::init(cfg, rng.next_u64())?;
        let layout = build_layout(&cfg, 1 + rng.below(3), 1 + rng.below(4))?;
        let probe = Probe {
            tokens: random_tokens(&mut rng, layout.total_len, cfg.vocab_size),
            layout,
            answer: 0,
        };
        let a = rng.uniform();
        let b = rng.uniform();
        let band = if rng.below(3) == 0 {
            Strategy::S3KvFrameExit.default_band()
        } else {
            (a.min(b), a.max(b))
        };
        worst = worst.max(eviction_gap(&model, &probe, band)?);
    }
    Ok(Check::new(
        "eviction_equivalence_random",
        worst <= 1e-6,
        format!("{n} random inputs, max |logit diff| {worst:.3e} (limit 1e-6)"),
    ))
}

fn tiny_example(seed: u64) -> Result<(Model, TrainExample), HarnessError> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 1,
        d_head: 8,
        ffn_mult: 2,
        pe_mode: PeMode::Rotary3d,
        vocab_size: 11,
        frame_grid: FrameGrid {
            frames: 2,
            height: 2,
            width: 1,
        },
    };
    let mut model = Model::init(cfg, seed)?;
    let mut rng = Rng::new(seed ^ 0x5eed);
    for v in model.weights.as_mut_slice() {
        *v += 0.1 * rng.normal();
    }
    let layout = build_layout(&cfg, 2, 2)?;
    let ex = TrainExample {
        tokens: random_tokens(&mut rng, layout.total_len, cfg.vocab_size),
        ids: assign_position_ids(&layout, PositionScheme::Default),
        answer: rng.below(cfg.vocab_size) as u32,
    };
    Ok((model, ex))
}

/// Analytic gradients of a 2-layer width-8 model against central
/// differences, for every parameter.
pub fn gradient_check(seed: u64) -> Result<Check, HarnessError> {
    let (mut model, ex) = tiny_example(seed)?;
    let batch = std::slice::from_ref(&ex);
    let mut grad = Weights::zeros_like(&model.weights);
    loss_and_grad(&model, batch, &mut grad)?;
    let mut scratch = Weights::zeros_like(&model.weights);
    let mut loss = |m: &Model| -> Result<f64, HarnessError> { Ok(loss_and_grad(m, batch, &mut scratch)?.loss) };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..model.weights.len() {
        let orig = model.weights.as_slice()[i];
        model.weights.as_mut_slice()[i] = orig + h;
        let up = loss(&model)?;
        model.weights.as_mut_slice()[i] = orig - h;
        let down = loss(&model)?;
        model.weights.as_mut_slice()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grad.as_slice()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
        if rel >= 1e-3 {
            failures += 1;
        }
    }
    Ok(Check::new(
        "gradient_check",
        failures == 0,
        format!(
            "{} parameters, {failures} above 1e-3, worst relative error {worst:.2e}",
            model.weights.len()
        ),
    ))
}

fn invariant_model(pe: PeMode, layers: usize, seed: u64) -> Result<(Model, TokenLayout), HarnessError> {
    let cfg = ModelConfig {
        pe_mode: pe,
        n_layers: layers,
        frame_grid: FrameGrid {
            frames: 3,
            height: 2,
            width: 2,
        },
        ..ModelConfig::default()
    };
    Ok((Model::init(cfg, seed)?, build_layout(&cfg, 2, 4)?))
}

/// Causality, cache equivalence, attention row sums, permutation invariance
/// without PE, and byte-identical reruns.
pub fn structural_invariants(seed: u64) -> Result<Vec<Check>, HarnessError> {
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();

    let (model, layout) = invariant_model(PeMode::Rotary3d, 3, seed)?;
    let ids = assign_position_ids(&layout, PositionScheme::Default);
    let n = layout.total_len;
    let plain = RunPlan::new();

    let mut leaks = 0;
    for trial in 0..10 {
        let tokens = random_tokens(&mut rng, n, 64);
        let base = model.forward(&tokens, &layout, &ids, &plain)?;
        let cut = trial * (n - 1) / 10;
        let mut edited = tokens.clone();
        for t in edited.iter_mut().skip(cut + 1) {
            *t = (*t + 1 + rng.below(63) as u32) % 64;
        }
        let out = model.forward(&edited, &layout, &ids, &plain)?;
        leaks += (0..=cut).filter(|&r| out.logits.row(r) != base.logits.row(r)).count();
    }
    checks.push(Check::new(
        "causality",
        leaks == 0,
        format!("10 edits past a cut, {leaks} earlier rows changed"),
    ));

    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let tokens = random_tokens(&mut rng, n, 64);
        let full = model.forward(&tokens, &layout, &ids, &plain)?;
        let mut cache = KvCache::new(&model.config);
        let mut at = 0;
        while at < n {
            let end = (at + 1 + rng.below(6)).min(n);
            let out = model.forward_cached(&tokens[at..end], &layout, &ids, &plain, &mut cache)?;
            for r in 0..end - at {
                worst = worst.max(max_abs_diff(out.logits.row(r), full.logits.row(at + r)));
            }
            at = end;
        }
    }
    checks.push(Check::new(
        "cache_equivalence",
        worst <= 1e-5,
        format!("chunked cached runs vs full forward, max diff {worst:.3e} (limit 1e-5)"),
    ));

    let mut worst: f64 = 0.0;
    let tokens = random_tokens(&mut rng, n, 64);
    let ko = KnockoutSpec::new(layout.query.iter(), layout.video().iter());
    let mut run = compile(
        &[InterventionSpec::knockout(ko)],
        model.config.n_layers,
        &layout,
        &tokens,
        &ids,
    )?;
    run.plan.record(RecordSpec {
        attention: true,
        hidden: false,
    });
    let out = model.forward(&run.tokens, &layout, &run.ids, &run.plan)?;
    for heads in &out.activations.attention {
        for m in heads {
            for r in 0..m.rows() {
                worst = worst.max((m.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    checks.push(Check::new(
        "softmax_row_sums",
        worst <= 1e-6,
        format!("every attention row under a knockout, max |sum - 1| {worst:.3e} (limit 1e-6)"),
    ));

    let (flat, flat_layout) = invariant_model(PeMode::None, 1, seed + 1)?;
    let flat_ids = assign_position_ids(&flat_layout, PositionScheme::Default);
    let mut worst: f64 = 0.0;
    let tokens = random_tokens(&mut rng, flat_layout.total_len, 64);
    let base = flat.forward(&tokens, &flat_layout, &flat_ids, &plain)?;
    for _ in 0..10 {
        let mut perm = tokens.clone();
        let last = perm.len() - 1;
        rng.shuffle(&mut perm[..last]);
        let out = flat.forward(&perm, &flat_layout, &flat_ids, &plain)?;
        worst = worst.max(max_abs_diff(out.last_logits(), base.last_logits()));
    }
    checks.push(Check::new(
        "no_pe_permutation_invariance",
        worst <= 1e-5,
        format!("1 layer without PE, 10 context permutations, max diff {worst:.3e} (limit 1e-5)"),
    ));

    let mut s = Settings::default();
    s.apply_text("n_layers = 2\nsteps = 20\ntrain_size = 200\neval_size = 16\neval_every = 0\nn_samples = 16")?;
    s.seed = seed;
    let rerun = || -> Result<(Vec<u8>, String), HarnessError> {
        let (m, _) = train_task(tplab_core::tasks::TaskKind::Direction, &s)?;
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes)?;
        let out = run_recipe(Recipe::Fig4Reverse, &m, &s)?;
        Ok((bytes, out.csv))
    };
    let a = rerun()?;
    let b = rerun()?;
    checks.push(Check::new(
        "byte_identical_reruns",
        a == b,
        format!("train + recipe twice with seed {seed}: {} checkpoint bytes", a.0.len()),
    ));
    Ok(checks)
}
