//! Declarative perturbations: positional-encoding edits, attention knockouts
//! over `(target, source)` token sets, frame-order edits and the sliding
//! window layer runner.
//!
//! An intervention is a plain value ([`InterventionSpec`]). A bundle of specs
//! is turned into concrete inputs and a [`RunPlan`] by [`compile`], which never
//! touches the model weights.

mod knockout;

pub use knockout::{
    build_knockout_mask, final_token_knockout, frame_to_query_knockout, inter_frame_knockout, intra_frame_knockout,
    single_frame_restriction, spatiotemporal_config, KnockoutBlock, KnockoutSpec, SpatiotemporalKind,
};

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{compute_pc, mean, MetricsError, PcPoint};
use crate::model::{
    assign_position_ids, next_token_distribution, Model, ModelError, PositionIds, PositionScheme, RunPlan, Segment,
    TokenLayout,
};

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("token index {index} is outside a sequence of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("knockout leaves row {row} with no attendable source")]
    FullyMaskedRow { row: usize },
    #[error("needs at least {needed} frames, layout has {found}")]
    TooFewFrames { needed: usize, found: usize },
    #[error("frame {frame} is outside 0..{frames}")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("layer {layer} is outside 0..{n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("no window of {window_k} layers fits in {n_layers} layers")]
    EmptySweep { window_k: usize, n_layers: usize },
    #[error("sequence has {found} tokens, layout expects {expected}")]
    Length { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, InterventionError>;

/// A set of layer indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSet {
    #[default]
    All,
    Only(Vec<usize>),
}

impl LayerSet {
    pub fn single(layer: usize) -> Self {
        LayerSet::Only(vec![layer])
    }

    pub fn range(r: Range<usize>) -> Self {
        LayerSet::Only(r.collect())
    }

    pub fn contains(&self, layer: usize) -> bool {
        match self {
            LayerSet::All => true,
            LayerSet::Only(v) => v.contains(&layer),
        }
    }

    /// Sorted, deduplicated member layers below `n_layers`.
    pub fn resolve(&self, n_layers: usize) -> Vec<usize> {
        (0..n_layers).filter(|&l| self.contains(l)).collect()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if let LayerSet::Only(v) = self {
            if let Some(&layer) = v.iter().find(|&&l| l >= n_layers) {
                return Err(InterventionError::LayerOutOfRange { layer, n_layers });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    RemovePe,
    ShufflePe { segment: Segment, seed: u64 },
    ReversePe,
    ReverseFrames,
    Knockout(KnockoutSpec),
}

impl InterventionKind {
    /// Stable textual name.
    pub fn name(&self) -> &'static str {
        match self {
            InterventionKind::RemovePe => "remove_pe",
            InterventionKind::ShufflePe { .. } => "shuffle_pe",
            InterventionKind::ReversePe => "reverse_pe",
            InterventionKind::ReverseFrames => "reverse_frames",
            InterventionKind::Knockout(_) => "knockout",
        }
    }
}

/// One perturbation. `layers` selects where positional and knockout edits
/// act; a knockout acts on the intersection of this set and its own.
/// Frame reversal edits the input, carries each frame's position ids along
/// with it, and ignores `layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    pub layers: LayerSet,
    pub label: String,
}

impl InterventionSpec {
    pub fn new(kind: InterventionKind, layers: LayerSet) -> Self {
        let label = kind.name().to_string();
        Self { kind, layers, label }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn on_layers(mut self, layers: LayerSet) -> Self {
        self.layers = layers;
        self
    }

    pub fn knockout(spec: KnockoutSpec) -> Self {
        Self::new(InterventionKind::Knockout(spec), LayerSet::All)
    }

    pub fn reverse_pe() -> Self {
        Self::new(InterventionKind::ReversePe, LayerSet::All)
    }

    pub fn reverse_frames() -> Self {
        Self::new(InterventionKind::ReverseFrames, LayerSet::All)
    }

    pub fn shuffle_pe(segment: Segment, seed: u64) -> Self {
        Self::new(InterventionKind::ShufflePe { segment, seed }, LayerSet::All)
    }

    fn acts_on(&self, layer: usize) -> bool {
        let own = self.layers.contains(layer);
        match &self.kind {
            InterventionKind::Knockout(k) => own && k.layers.contains(layer),
            InterventionKind::ReverseFrames => false,
            _ => own,
        }
    }
}

/// Positional encoding switched off at `layer` only.
pub fn remove_pe_at_layer(layer: usize) -> InterventionSpec {
    InterventionSpec::new(InterventionKind::RemovePe, LayerSet::single(layer))
}

/// Frame blocks in order `T-1, ..., 0`; instruction and query untouched.
pub fn reverse_frames(tokens: &[u32], layout: &TokenLayout) -> Vec<u32> {
    let mut out = tokens[..layout.video().start].to_vec();
    for f in layout.frames.iter().rev() {
        out.extend_from_slice(&tokens[f.start..f.end]);
    }
    out.extend_from_slice(&tokens[layout.video().end..]);
    out
}

/// Bundle for the four combinations of frame and position-id reversal.
///
/// Reversed frames keep their own position ids, so `(true, false)` plays
/// frames `T-1..0` carrying ids `T-1..0`. Adding the id reversal gives the
/// reversed frames ascending ids, as an ordinary video would have;
/// `(false, true)` keeps the frames and reverses the ids.
pub fn compose_reversal(frames_reversed: bool, pe_reversed: bool) -> Vec<InterventionSpec> {
    let mut v = Vec::new();
    if frames_reversed {
        v.push(InterventionSpec::reverse_frames());
    }
    if pe_reversed {
        v.push(InterventionSpec::reverse_pe());
    }
    v
}

/// Concrete inputs and plan for one sequence under a bundle.
pub struct CompiledRun {
    pub tokens: Vec<u32>,
    pub ids: PositionIds,
    pub plan: RunPlan<'static>,
}

/// Applies a bundle of interventions to one input.
///
/// Positional edits that hit the same layer compose in bundle order;
/// a removal wins over any id substitution.
pub fn compile(
    bundle: &[InterventionSpec],
    n_layers: usize,
    layout: &TokenLayout,
    tokens: &[u32],
    base_ids: &PositionIds,
) -> Result<CompiledRun> {
    if tokens.len() != layout.total_len || base_ids.len() != layout.total_len {
        return Err(InterventionError::Length {
            expected: layout.total_len,
            found: if tokens.len() != layout.total_len {
                tokens.len()
            } else {
                base_ids.len()
            },
        });
    }
    for spec in bundle {
        spec.layers.validate(n_layers)?;
        if let InterventionKind::Knockout(k) = &spec.kind {
            k.layers.validate(n_layers)?;
        }
    }
    let mut tokens = tokens.to_vec();
    let mut run_ids = base_ids.clone();
    for spec in bundle {
        if spec.kind == InterventionKind::ReverseFrames {
            tokens = reverse_frames(&tokens, layout);
            run_ids = run_ids.reversed_temporal(layout);
        }
    }
    let mut plan = RunPlan::new();
    let mut id_cache: HashMap<Vec<usize>, Arc<PositionIds>> = HashMap::new();
    for layer in 0..n_layers {
        let active: Vec<usize> = (0..bundle.len()).filter(|&s| bundle[s].acts_on(layer)).collect();
        let pe_edits: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&s| {
                matches!(
                    bundle[s].kind,
                    InterventionKind::ReversePe | InterventionKind::ShufflePe { .. }
                )
            })
            .collect();
        if active.iter().any(|&s| bundle[s].kind == InterventionKind::RemovePe) {
            plan.remove_pe(layer);
        } else if !pe_edits.is_empty() {
            let ids = id_cache.entry(pe_edits.clone()).or_insert_with(|| {
                let mut ids = run_ids.clone();
                for &s in &pe_edits {
                    ids = match &bundle[s].kind {
                        InterventionKind::ReversePe => ids.reversed_temporal(layout),
                        InterventionKind::ShufflePe { segment, seed } => ids.shuffled(layout, *segment, *seed),
                        _ => unreachable!(),
                    };
                }
                Arc::new(ids)
            });
            plan.set_ids(layer, Arc::clone(ids));
        }
        for &s in &active {
            if let InterventionKind::Knockout(k) = &bundle[s].kind {
                plan.add_mask(layer, &build_knockout_mask(k, layout.total_len)?);
            }
        }
    }
    Ok(CompiledRun {
        tokens,
        ids: run_ids,
        plan,
    })
}

/// One evaluation input: a sequence, its layout and the ground-truth answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub tokens: Vec<u32>,
    pub layout: TokenLayout,
    pub answer: u32,
}

/// Next-token distribution at the final position under `bundle`.
pub fn run_distribution(model: &Model, probe: &Probe, bundle: &[InterventionSpec]) -> Result<Vec<f64>> {
    let base_ids = assign_position_ids(&probe.layout, PositionScheme::Default);
    let run = compile(bundle, model.config.n_layers, &probe.layout, &probe.tokens, &base_ids)?;
    let out = model.forward(&run.tokens, &probe.layout, &run.ids, &run.plan)?;
    Ok(next_token_distribution(out.last_logits()))
}

/// Per-probe ground-truth probability change of `perturbed` relative to `base`.
pub fn measure_pc(
    model: &Model,
    probes: &[Probe],
    base: &[InterventionSpec],
    perturbed: &[InterventionSpec],
) -> Result<Vec<f64>> {
    probes
        .par_iter()
        .map(|p| {
            let b = run_distribution(model, p, base)?;
            let q = run_distribution(model, p, perturbed)?;
            Ok(compute_pc(&q, &b, p.answer as usize)?)
        })
        .collect()
}

/// Sliding window over layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSweep {
    pub window_k: usize,
    pub stride: usize,
}

impl Default for WindowSweep {
    fn default() -> Self {
        Self { window_k: 5, stride: 1 }
    }
}

impl WindowSweep {
    pub fn new(window_k: usize, stride: usize) -> Self {
        Self { window_k, stride }
    }

    /// Windows `[l, l + k)` for `l = 0, stride, ...` that fit in `n_layers`.
    pub fn windows(&self, n_layers: usize) -> Result<Vec<Range<usize>>> {
        if self.window_k == 0 || self.stride == 0 || self.window_k > n_layers {
            return Err(InterventionError::EmptySweep {
                window_k: self.window_k,
                n_layers,
            });
        }
        Ok((0..=n_layers - self.window_k)
            .step_by(self.stride)
            .map(|l| l..l + self.window_k)
            .collect())
    }
}

/// Re-targets `spec` onto exactly `layers`.
fn restrict(spec: &InterventionSpec, layers: LayerSet) -> InterventionSpec {
    let mut s = spec.clone().on_layers(layers);
    if let InterventionKind::Knockout(k) = &mut s.kind {
        k.layers = LayerSet::All;
    }
    s
}

/// One point per window: `spec` applied at the window's layers, compared
/// with the unperturbed run. The spec's own layer set is ignored.
pub fn sweep_layers(
    model: &Model,
    probes: &[Probe],
    spec: &InterventionSpec,
    sweep: WindowSweep,
) -> Result<Vec<PcPoint>> {
    let windows = sweep.windows(model.config.n_layers)?;
    let base: Vec<Vec<f64>> = probes
        .par_iter()
        .map(|p| run_distribution(model, p, &[]))
        .collect::<Result<_>>()?;
    windows
        .into_iter()
        .map(|w| {
            let bundle = [restrict(spec, LayerSet::range(w.clone()))];
            let pcs: Vec<f64> = probes
                .par_iter()
                .zip(&base)
                .map(|(p, b)| {
                    let q = run_distribution(model, p, &bundle)?;
                    Ok(compute_pc(&q, b, p.answer as usize)?)
                })
                .collect::<Result<_>>()?;
            Ok(PcPoint {
                window: w.start,
                condition: spec.label.clone(),
                mean_pc: mean(&pcs),
                n: pcs.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_layout, ModelConfig, PeMode};
    use crate::numerics::Rng;

    fn probe(cfg: &ModelConfig, seed: u64) -> Probe {
        let layout = build_layout(cfg, 3, 5).unwrap();
        let mut rng = Rng::new(seed);
        let tokens = (0..layout.total_len)
            .map(|_| rng.below(cfg.vocab_size) as u32)
            .collect();
        Probe {
            tokens,
            layout,
            answer: rng.below(cfg.vocab_size) as u32,
        }
    }

    fn small(pe: PeMode) -> ModelConfig {
        let mut c = ModelConfig::default();
        c.pe_mode = pe;
        c.frame_grid.height = 2;
        c.frame_grid.width = 2;
        c
    }

    #[test]
    fn windows_enumerate() {
        let w = WindowSweep::new(2, 1).windows(6).unwrap();
        assert_eq!(w, vec![0..2, 1..3, 2..4, 3..5, 4..6]);
        assert_eq!(WindowSweep::default().windows(6).unwrap(), vec![0..5, 1..6]);
        assert_eq!(WindowSweep::new(2, 2).windows(6).unwrap(), vec![0..2, 2..4, 4..6]);
        assert!(WindowSweep::new(7, 1).windows(6).is_err());
        assert!(WindowSweep::new(0, 1).windows(6).is_err());
    }

    #[test]
    fn reverse_frames_is_an_involution() {
        let cfg = small(PeMode::Rotary3d);
        let p = probe(&cfg, 1);
        let r = reverse_frames(&p.tokens, &p.layout);
        assert_ne!(r, p.tokens);
        assert_eq!(&r[..3], &p.tokens[..3]);
        assert_eq!(&r[19..], &p.tokens[19..]);
        assert_eq!(&r[3..7], &p.tokens[15..19]);
        assert_eq!(reverse_frames(&r, &p.layout), p.tokens);
    }

    #[test]
    fn reversal_bundles() {
        assert!(compose_reversal(false, false).is_empty());
        assert_eq!(compose_reversal(true, false)[0].kind, InterventionKind::ReverseFrames);
        assert_eq!(compose_reversal(false, true)[0].kind, InterventionKind::ReversePe);
        assert_eq!(compose_reversal(true, true).len(), 2);
    }

    #[test]
    fn pe_reversal_is_invisible_without_pe() {
        let cfg = small(PeMode::None);
        let model = Model::init(cfg, 2).unwrap();
        let p = probe(&cfg, 3);
        let a = run_distribution(&model, &p, &compose_reversal(true, false)).unwrap();
        let b = run_distribution(&model, &p, &compose_reversal(true, true)).unwrap();
        assert_eq!(a, b);
        for l in 0..cfg.n_layers {
            let pcs = measure_pc(&model, &[p.clone()], &[], &[remove_pe_at_layer(l)]).unwrap();
            assert_eq!(pcs, vec![0.0]);
        }
    }

    #[test]
    fn compile_places_edits_on_their_layers() {
        let cfg = small(PeMode::Rotary3d);
        let p = probe(&cfg, 4);
        let ids = assign_position_ids(&p.layout, PositionScheme::Default);
        let ko = KnockoutSpec::new([23], 19..23).on_layers(LayerSet::Only(vec![1, 2]));
        let bundle = [
            remove_pe_at_layer(0),
            InterventionSpec::reverse_pe().on_layers(LayerSet::Only(vec![0, 3])),
            InterventionSpec::knockout(ko).on_layers(LayerSet::Only(vec![2, 4])),
        ];
        let run = compile(&bundle, cfg.n_layers, &p.layout, &p.tokens, &ids).unwrap();
        assert_eq!(run.tokens, p.tokens);
        let layer = |l| run.plan.layer(l).cloned().unwrap_or_default();
        assert!(matches!(layer(0).pe, crate::model::PeEdit::Remove));
        match layer(3).pe {
            crate::model::PeEdit::Ids(x) => assert_eq!(*x, ids.reversed_temporal(&p.layout)),
            other => panic!("{other:?}"),
        }
        assert!(layer(2).mask.is_some());
        assert!(layer(1).mask.is_none() && layer(4).mask.is_none());
        assert!(compile(&[remove_pe_at_layer(9)], cfg.n_layers, &p.layout, &p.tokens, &ids).is_err());
    }

    #[test]
    fn removal_leaves_earlier_layers_untouched() {
        let cfg = small(PeMode::Rotary3d);
        let model = Model::init(cfg, 5).unwrap();
        let p = probe(&cfg, 6);
        let ids = assign_position_ids(&p.layout, PositionScheme::Default);
        let record = crate::model::RecordSpec {
            attention: false,
            hidden: true,
        };
        let mut base = RunPlan::new();
        base.record(record);
        let a = model.forward(&p.tokens, &p.layout, &ids, &base).unwrap();
        let mut run = compile(&[remove_pe_at_layer(3)], cfg.n_layers, &p.layout, &p.tokens, &ids).unwrap();
        run.plan.record(record);
        let b = model.forward(&run.tokens, &p.layout, &ids, &run.plan).unwrap();
        let (ha, hb) = (&a.activations.hidden, &b.activations.hidden);
        for l in 0..3 {
            assert_eq!(ha[l], hb[l], "layer {l}");
        }
        assert_ne!(ha[3], hb[3]);
    }

    #[test]
    fn identity_sweep_is_zero() {
        let cfg = small(PeMode::Rotary3d);
        let model = Model::init(cfg, 7).unwrap();
        let probes: Vec<_> = (0..3).map(|s| probe(&cfg, 10 + s)).collect();
        let noop = InterventionSpec::knockout(KnockoutSpec::empty());
        let pts = sweep_layers(&model, &probes, &noop, WindowSweep::new(2, 1)).unwrap();
        assert_eq!(pts.len(), 5);
        assert!(pts.iter().all(|p| p.mean_pc == 0.0 && p.n == 3));
    }

    #[test]
    fn full_window_equals_full_knockout() {
        let cfg = small(PeMode::Rotary3d);
        let model = Model::init(cfg, 8).unwrap();
        let probes: Vec<_> = (0..3).map(|s| probe(&cfg, 20 + s)).collect();
        let spec = InterventionSpec::knockout(final_token_knockout(&probes[0].layout, Segment::Query));
        let pts = sweep_layers(&model, &probes, &spec, WindowSweep::new(cfg.n_layers, 1)).unwrap();
        let direct = measure_pc(&model, &probes, &[], &[spec]).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].mean_pc, mean(&direct));
        assert_ne!(pts[0].mean_pc, 0.0);
    }

    #[test]
    fn reversed_frames_keep_their_ids() {
        let cfg = small(PeMode::Rotary3d);
        let model = Model::init(cfg, 12).unwrap();
        let p = probe(&cfg, 31);
        let ids = assign_position_ids(&p.layout, PositionScheme::Default);
        let rev_tokens = reverse_frames(&p.tokens, &p.layout);
        let plain = |tokens: &[u32], ids: &PositionIds| {
            let out = model.forward(tokens, &p.layout, ids, &RunPlan::new()).unwrap();
            next_token_distribution(out.last_logits())
        };
        let travelled = ids.reversed_temporal(&p.layout);
        assert_eq!(
            run_distribution(&model, &p, &compose_reversal(true, false)).unwrap(),
            plain(&rev_tokens, &travelled)
        );
        assert_eq!(
            run_distribution(&model, &p, &compose_reversal(true, true)).unwrap(),
            plain(&rev_tokens, &ids)
        );
        assert_eq!(
            run_distribution(&model, &p, &compose_reversal(false, true)).unwrap(),
            plain(&p.tokens, &travelled)
        );
        let back = compile(
            &compose_reversal(true, false),
            cfg.n_layers,
            &p.layout,
            &rev_tokens,
            &travelled,
        )
        .unwrap();
        assert_eq!((back.tokens, back.ids), (p.tokens.clone(), ids));
    }

    #[test]
    fn interventions_do_not_touch_the_model() {
        let cfg = small(PeMode::Rotary3d);
        let model = Model::init(cfg, 9).unwrap();
        let before = model.clone();
        let p = probe(&cfg, 30);
        let a = run_distribution(&model, &p, &[]).unwrap();
        let bundle = [
            InterventionSpec::reverse_frames(),
            InterventionSpec::shuffle_pe(Segment::Video, 1),
            InterventionSpec::knockout(frame_to_query_knockout(&p.layout)),
        ];
        let _ = run_distribution(&model, &p, &bundle).unwrap();
        assert_eq!(run_distribution(&model, &p, &[]).unwrap(), a);
        assert_eq!(model, before);
    }

    fn attention_weights(model: &Model, p: &Probe, bundle: &[InterventionSpec]) -> Vec<Vec<crate::numerics::Matrix>> {
        let ids = assign_position_ids(&p.layout, PositionScheme::Default);
        let mut run = compile(bundle, model.config.n_layers, &p.layout, &p.tokens, &ids).unwrap();
        run.plan.record(crate::model::RecordSpec {
            attention: true,
            hidden: false,
        });
        model
            .forward(&run.tokens, &p.layout, &run.ids, &run.plan)
            .unwrap()
            .activations
            .attention
    }

    #[test]
    fn zero_weights_are_exactly_the_blocked_pairs() {
        let cfg = small(PeMode::Rotary3d);
        let model = Model::init(cfg, 11).unwrap();
        let p = probe(&cfg, 40);
        let specs = [
            final_token_knockout(&p.layout, Segment::Video),
            frame_to_query_knockout(&p.layout),
            inter_frame_knockout(&p.layout).unwrap(),
            single_frame_restriction(&p.layout, 2).unwrap(),
            spatiotemporal_config(&p.layout, SpatiotemporalKind::CorrespondingArea, 0),
        ];
        for spec in specs {
            let blocked = spec.blocked_pairs();
            let att = attention_weights(&model, &p, &[InterventionSpec::knockout(spec)]);
            for heads in &att {
                for a in heads {
                    for i in 0..a.rows() {
                        for j in 0..=i {
                            assert_eq!(a.get(i, j) == 0.0, blocked.contains(&(i, j)), "({i},{j})");
                        }
                    }
                }
            }
        }
    }
}
