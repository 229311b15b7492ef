//! Layer-banded efficiency strategies built on the pathway findings, with
//! attention FLOP and KV-cache byte accounting.
//!
//! * `s1_query_last_frame`: in the band, query tokens read only the last
//!   frame among visual tokens.
//! * `s2_no_inter_frame`: in the band, visual tokens do not read visual
//!   tokens of other frames.
//! * `s3_kv_frame_exit`: from the band start on, visual tokens leave the KV
//!   cache.

use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interventions::{
    compile, inter_frame_knockout, intra_frame_knockout, single_frame_restriction, InterventionError, InterventionSpec,
    KnockoutSpec, LayerSet, Probe,
};
use crate::metrics::{compute_pc, mean, MetricsError};
use crate::model::{
    assign_position_ids, next_token_distribution, resolve_band, EvictionRule, ForwardOutput, KvCache, Model,
    ModelConfig, ModelError, PositionScheme, Segment, TokenLayout, KV_BYTES_PER_VALUE,
};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("layout has no frames")]
    NoFrames,
    #[error("band [{start}, {end}) is not a sub-interval of [0, 1]")]
    BadBand { start: f64, end: f64 },
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, StrategyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    S1QueryLastFrame,
    S2NoInterFrame,
    S3KvFrameExit,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::S1QueryLastFrame,
        Strategy::S2NoInterFrame,
        Strategy::S3KvFrameExit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::S1QueryLastFrame => "s1_query_last_frame",
            Strategy::S2NoInterFrame => "s2_no_inter_frame",
            Strategy::S3KvFrameExit => "s3_kv_frame_exit",
        }
    }

    /// Depth-fraction band used when none is given.
    pub fn default_band(self) -> (f64, f64) {
        match self {
            Strategy::S1QueryLastFrame => (10.0 / 28.0, 20.0 / 28.0),
            Strategy::S2NoInterFrame | Strategy::S3KvFrameExit => (20.0 / 28.0, 1.0),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategySchedule {
    pub strategy: Strategy,
    /// Depth-fraction interval `[start, end)`.
    pub band: (f64, f64),
    /// For `s2`: keep attention among visual tokens of the same frame.
    pub cross_frame_only: bool,
}

impl StrategySchedule {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            band: strategy.default_band(),
            cross_frame_only: true,
        }
    }

    pub fn with_band(mut self, start: f64, end: f64) -> Self {
        self.band = (start, end);
        self
    }

    /// Concrete layers the strategy touches. Eviction is permanent, so for
    /// `s3` the set runs from the band start to the last layer.
    pub fn resolved_layers(&self, n_layers: usize) -> Range<usize> {
        let r = resolve_band(n_layers, self.band.0, self.band.1);
        match self.strategy {
            Strategy::S3KvFrameExit if !r.is_empty() => r.start..n_layers,
            _ => r,
        }
    }
}

/// A configured strategy for one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRun {
    pub schedule: Option<StrategySchedule>,
    pub layers: Range<usize>,
    pub knockout: Option<KnockoutSpec>,
    pub eviction: Vec<EvictionRule>,
    /// Set when the band resolved to no layers and the run is the baseline.
    pub warning: Option<String>,
}

impl StrategyRun {
    /// The unmodified model.
    pub fn baseline() -> Self {
        Self {
            schedule: None,
            layers: 0..0,
            knockout: None,
            eviction: Vec::new(),
            warning: None,
        }
    }

    pub fn name(&self) -> &'static str {
        self.schedule.map_or("baseline", |s| s.strategy.name())
    }

    fn bundle(&self) -> Vec<InterventionSpec> {
        self.knockout
            .iter()
            .map(|k| InterventionSpec::knockout(k.clone()))
            .collect()
    }

    /// Runs `probe` under the strategy; returns the next-token distribution
    /// and the cache the run filled.
    pub fn run(&self, model: &Model, probe: &Probe) -> Result<(Vec<f64>, KvCache)> {
        let (out, cache) = self.forward(model, probe)?;
        Ok((next_token_distribution(out.last_logits()), cache))
    }

    /// Full forward pass through a fresh cache; logits for every position.
    pub fn forward(&self, model: &Model, probe: &Probe) -> Result<(ForwardOutput, KvCache)> {
        let ids = assign_position_ids(&probe.layout, PositionScheme::Default);
        let compiled = compile(
            &self.bundle(),
            model.config.n_layers,
            &probe.layout,
            &probe.tokens,
            &ids,
        )?;
        let mut cache = KvCache::with_rules(&model.config, self.eviction.clone());
        let out = model.forward_cached(
            &compiled.tokens,
            &probe.layout,
            &compiled.ids,
            &compiled.plan,
            &mut cache,
        )?;
        Ok((out, cache))
    }

    /// Knockout that reproduces the strategy's effect on the outputs.
    pub fn equivalent_knockout(&self, layout: &TokenLayout) -> Option<KnockoutSpec> {
        let mut spec = self.knockout.clone();
        for rule in &self.eviction {
            let k = KnockoutSpec::new(0..layout.total_len, layout.segment(rule.segment).iter()).on_layers(
                LayerSet::range(rule.from_layer..self.layers.end.max(rule.from_layer + 1)),
            );
            spec = Some(match spec {
                Some(s) if s.layers == k.layers => s.union(k),
                Some(_) => unreachable!("strategies combine one knockout or one eviction"),
                None => k,
            });
        }
        spec
    }
}

/// Configures `schedule` for `layout`.
pub fn apply_strategy(config: &ModelConfig, schedule: StrategySchedule, layout: &TokenLayout) -> Result<StrategyRun> {
    let (start, end) = schedule.band;
    if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end {
        return Err(StrategyError::BadBand { start, end });
    }
    if layout.n_frames() == 0 {
        return Err(StrategyError::NoFrames);
    }
    let layers = schedule.resolved_layers(config.n_layers);
    let mut run = StrategyRun {
        schedule: Some(schedule),
        layers: layers.clone(),
        ..StrategyRun::baseline()
    };
    if layers.is_empty() {
        run.warning = Some(format!(
            "{}: band [{start}, {end}) holds no layer of {}; running the baseline",
            schedule.strategy.name(),
            config.n_layers
        ));
        return Ok(run);
    }
    let on = LayerSet::range(layers.clone());
    match schedule.strategy {
        Strategy::S1QueryLastFrame => {
            run.knockout = Some(single_frame_restriction(layout, layout.n_frames() - 1)?.on_layers(on));
        }
        Strategy::S2NoInterFrame => {
            if layout.n_frames() >= 2 {
                let mut k = inter_frame_knockout(layout)?;
                if !schedule.cross_frame_only {
                    k = k.union(intra_frame_knockout(layout));
                }
                run.knockout = Some(k.on_layers(on));
            } else if !schedule.cross_frame_only {
                run.knockout = Some(intra_frame_knockout(layout).on_layers(on));
            }
        }
        Strategy::S3KvFrameExit => {
            run.eviction = vec![EvictionRule {
                segment: Segment::Video,
                from_layer: layers.start,
            }];
        }
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Attended `(i, j)` pairs.
    pub pairs: u64,
    /// Score FLOPs: `2 * d_model` per attended pair.
    pub attention_flops: u64,
    pub kv_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub attention_flops: u64,
    pub kv_bytes_peak: u64,
    pub per_layer: Vec<LayerCost>,
}

/// Costs of one full-sequence pass of `layout` under `run`.
pub fn account_costs(config: &ModelConfig, run: &StrategyRun, layout: &TokenLayout) -> Result<CostReport> {
    let n = layout.total_len;
    let d = config.d_model as u64;
    let blocked = run.knockout.as_ref().map(|k| k.blocked_pairs()).unwrap_or_default();
    let mut report = CostReport::default();
    for l in 0..config.n_layers {
        let live: Vec<bool> = (0..n)
            .map(|j| {
                !run.eviction
                    .iter()
                    .any(|r| l >= r.from_layer && layout.segment_of(j) == r.segment)
            })
            .collect();
        let ko_here = run.knockout.as_ref().is_some_and(|k| k.layers.contains(l));
        let mut pairs = 0u64;
        for i in 0..n {
            for (j, &alive) in live.iter().enumerate().take(i + 1) {
                if alive && !(ko_here && blocked.contains(&(i, j))) {
                    pairs += 1;
                }
            }
        }
        let kv_bytes = (live.iter().filter(|&&x| x).count() * 2 * config.d_model * KV_BYTES_PER_VALUE) as u64;
        report.per_layer.push(LayerCost {
            pairs,
            attention_flops: pairs * 2 * d,
            kv_bytes,
        });
    }
    report.attention_flops = report.per_layer.iter().map(|c| c.attention_flops).sum();
    report.kv_bytes_peak = report.per_layer.iter().map(|c| c.kv_bytes).sum();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub strategy: String,
    pub accuracy: f64,
    pub mean_pc: f64,
    pub flops: u64,
    pub kv_bytes_peak: u64,
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

/// Baseline plus one row per schedule over `probes`, which must share a
/// layout. Costs are per sequence.
pub fn benchmark_strategies(
    model: &Model,
    probes: &[Probe],
    schedules: &[StrategySchedule],
) -> Result<Vec<BenchmarkRow>> {
    let Some(first) = probes.first() else {
        return Ok(Vec::new());
    };
    let layout = &first.layout;
    let mut runs = vec![StrategyRun::baseline()];
    for s in schedules {
        runs.push(apply_strategy(&model.config, *s, layout)?);
    }
    let base: Vec<Vec<f64>> = probes
        .par_iter()
        .map(|p| Ok(StrategyRun::baseline().run(model, p)?.0))
        .collect::<Result<_>>()?;
    runs.iter()
        .map(|run| {
            let rows: Vec<(bool, f64, u64)> = probes
                .par_iter()
                .zip(&base)
                .map(|(p, b)| {
                    let (q, cache) = run.run(model, p)?;
                    let gt = p.answer as usize;
                    Ok((argmax(&q) == gt, compute_pc(&q, b, gt)?, cache.peak_bytes() as u64))
                })
                .collect::<Result<_>>()?;
            let pcs: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let cost = account_costs(&model.config, run, layout)?;
            Ok(BenchmarkRow {
                strategy: run.name().to_string(),
                accuracy: rows.iter().filter(|r| r.0).count() as f64 / rows.len() as f64,
                mean_pc: mean(&pcs),
                flops: cost.attention_flops,
                kv_bytes_peak: rows.iter().map(|r| r.2).max().unwrap_or(0),
            })
        })
        .collect()
}

/// CSV with header `strategy,accuracy,mean_pc,flops,kv_bytes_peak`.
pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut s = String::from("strategy,accuracy,mean_pc,flops,kv_bytes_peak\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{},{}",
            r.strategy, r.accuracy, r.mean_pc, r.flops, r.kv_bytes_peak
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::interventions::run_distribution;
    use crate::model::{build_layout, FrameGrid, PeMode};
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn probe(cfg: &ModelConfig, li: usize, lq: usize, seed: u64) -> Probe {
        let layout = build_layout(cfg, li, lq).unwrap();
        let mut rng = Rng::new(seed);
        Probe {
            tokens: (0..layout.total_len)
                .map(|_| rng.below(cfg.vocab_size) as u32)
                .collect(),
            layout,
            answer: rng.below(cfg.vocab_size) as u32,
        }
    }

    #[test]
    fn default_bands_resolve() {
        let s1 = StrategySchedule::new(Strategy::S1QueryLastFrame);
        assert_eq!(s1.resolved_layers(6), 2..4);
        assert_eq!(StrategySchedule::new(Strategy::S2NoInterFrame).resolved_layers(6), 4..6);
        assert_eq!(StrategySchedule::new(Strategy::S3KvFrameExit).resolved_layers(6), 4..6);
        assert_eq!(s1.resolved_layers(28), 10..20);
        let mid = StrategySchedule::new(Strategy::S3KvFrameExit).with_band(0.3, 0.6);
        assert_eq!(mid.resolved_layers(10), 3..10);
    }

    #[test]
    fn empty_band_is_baseline_with_warning() {
        let cfg = ModelConfig::default();
        let p = probe(&cfg, 3, 5, 1);
        let model = Model::init(cfg, 1).unwrap();
        let s = StrategySchedule::new(Strategy::S3KvFrameExit).with_band(0.0, 0.0);
        let run = apply_strategy(&cfg, s, &p.layout).unwrap();
        assert!(run.warning.is_some());
        assert!(run.eviction.is_empty() && run.knockout.is_none());
        let (a, _) = run.run(&model, &p).unwrap();
        assert_eq!(a, run_distribution(&model, &p, &[]).unwrap());
        assert!(apply_strategy(&cfg, s.with_band(0.5, 0.2), &p.layout).is_err());
    }

    #[test]
    fn eviction_matches_knockout() {
        let mut cfg = ModelConfig::default();
        cfg.frame_grid = FrameGrid {
            frames: 3,
            height: 2,
            width: 3,
        };
        for seed in 0..20 {
            let model = Model::init(cfg, seed).unwrap();
            let p = probe(&cfg, 2, 3, 100 + seed);
            for band in [(20.0 / 28.0, 1.0), (0.3, 0.6), (0.0, 1.0)] {
                let run = apply_strategy(
                    &cfg,
                    StrategySchedule::new(Strategy::S3KvFrameExit).with_band(band.0, band.1),
                    &p.layout,
                )
                .unwrap();
                let (a, cache) = run.run(&model, &p).unwrap();
                let ko = run.equivalent_knockout(&p.layout).unwrap();
                let b = run_distribution(&model, &p, &[InterventionSpec::knockout(ko)]).unwrap();
                let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-9, "{diff}");
                assert!(cache.live_count(cfg.n_layers - 1) < p.layout.total_len);
            }
        }
    }

    #[test]
    fn baseline_flops_match_pair_enumeration() {
        let mut cfg = ModelConfig::default();
        cfg.frame_grid = FrameGrid {
            frames: 4,
            height: 4,
            width: 4,
        };
        let layout = build_layout(&cfg, 16, 20).unwrap();
        assert_eq!(layout.total_len, 100);
        let cost = account_costs(&cfg, &StrategyRun::baseline(), &layout).unwrap();
        let per_layer: u64 = (0..100u64).map(|i| (i + 1) * 2 * 64).sum();
        assert_eq!(cost.attention_flops, 6 * per_layer);
        assert_eq!(cost.kv_bytes_peak, 6 * 100 * 2 * 64 * 4);
    }

    #[test]
    fn strategy_cost_deltas() {
        let cfg = ModelConfig::default();
        let layout = build_layout(&cfg, 16, 20).unwrap();
        let base = account_costs(&cfg, &StrategyRun::baseline(), &layout).unwrap();
        let s3 = apply_strategy(&cfg, StrategySchedule::new(Strategy::S3KvFrameExit), &layout).unwrap();
        let c3 = account_costs(&cfg, &s3, &layout).unwrap();
        assert_eq!(base.kv_bytes_peak - c3.kv_bytes_peak, 2 * 2 * 64 * 64 * 4);
        let s2 = apply_strategy(&cfg, StrategySchedule::new(Strategy::S2NoInterFrame), &layout).unwrap();
        let c2 = account_costs(&cfg, &s2, &layout).unwrap();
        let cross: u64 = 16 * 16 * (1 + 2 + 3);
        for l in 4..6 {
            assert_eq!(base.per_layer[l].pairs - c2.per_layer[l].pairs, cross);
        }
        assert_eq!(c2.kv_bytes_peak, base.kv_bytes_peak);
        let s1 = apply_strategy(&cfg, StrategySchedule::new(Strategy::S1QueryLastFrame), &layout).unwrap();
        let c1 = account_costs(&cfg, &s1, &layout).unwrap();
        for l in 2..4 {
            assert_eq!(base.per_layer[l].pairs - c1.per_layer[l].pairs, 20 * 48);
        }
        assert!(c1.attention_flops < base.attention_flops && c2.attention_flops < base.attention_flops);
    }

    #[test]
    fn cache_peak_matches_accounting() {
        let cfg = ModelConfig::default();
        let model = Model::init(cfg, 3).unwrap();
        let p = probe(&cfg, 3, 5, 4);
        for s in Strategy::ALL {
            let run = apply_strategy(&cfg, StrategySchedule::new(s), &p.layout).unwrap();
            let (_, cache) = run.run(&model, &p).unwrap();
            let cost = account_costs(&cfg, &run, &p.layout).unwrap();
            assert_eq!(cache.peak_bytes() as u64, cost.kv_bytes_peak);
        }
    }

    #[test]
    fn benchmark_has_baseline_and_csv() {
        let mut cfg = ModelConfig::default();
        cfg.pe_mode = PeMode::Rotary3d;
        let model = Model::init(cfg, 5).unwrap();
        let probes: Vec<_> = (0..4).map(|s| probe(&cfg, 2, 4, 50 + s)).collect();
        let scheds: Vec<_> = Strategy::ALL.iter().map(|&s| StrategySchedule::new(s)).collect();
        let rows = benchmark_strategies(&model, &probes, &scheds).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].strategy, "baseline");
        assert_eq!(rows[0].mean_pc, 0.0);
        let ident = benchmark_strategies(
            &model,
            &probes,
            &[StrategySchedule::new(Strategy::S3KvFrameExit).with_band(0.0, 0.0)],
        )
        .unwrap();
        assert_eq!(ident[0].accuracy, ident[1].accuracy);
        assert_eq!(ident[0].flops, ident[1].flops);
        let csv = benchmark_csv(&rows);
        assert!(csv.starts_with("strategy,accuracy,mean_pc,flops,kv_bytes_peak\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(!csv.contains('\r'));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn strategies_never_cost_more(a in 0.0f64..1.0, b in 0.0f64..1.0, which in 0usize..3) {
            let cfg = ModelConfig::default();
            let layout = build_layout(&cfg, 2, 4).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let run = apply_strategy(&cfg, StrategySchedule::new(Strategy::ALL[which]).with_band(lo, hi), &layout).unwrap();
            let base = account_costs(&cfg, &StrategyRun::baseline(), &layout).unwrap();
            let c = account_costs(&cfg, &run, &layout).unwrap();
            prop_assert!(c.attention_flops <= base.attention_flops);
            prop_assert!(c.kv_bytes_peak <= base.kv_bytes_peak);
            if Strategy::ALL[which] == Strategy::S3KvFrameExit && !run.layers.is_empty() {
                prop_assert!(c.kv_bytes_peak < base.kv_bytes_peak);
            }
        }
    }
}
