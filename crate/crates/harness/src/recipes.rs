//! Named experiment recipes. Each one runs an intervention program on a
//! checkpoint and yields a CSV table plus JSON metadata.

use std::fmt::Write as _;
use std::ops::Range;

use serde_json::json;
use tplab_core::interventions::{
    compose_reversal, final_token_knockout, frame_to_query_knockout, inter_frame_knockout, measure_pc,
    remove_pe_at_layer, single_frame_restriction, spatiotemporal_config, InterventionSpec, LayerSet, Probe,
    SpatiotemporalKind, WindowSweep,
};
use tplab_core::metrics::PerturbationResult;
use tplab_core::model::{Model, Segment, TokenLayout};
use tplab_core::strategies::{benchmark_csv, benchmark_strategies, Strategy, StrategySchedule};
use tplab_core::tasks::{generate_dataset, Split, SyntheticSample, TaskKind};

use crate::config::Settings;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Recipe {
    Fig2PeRemoval,
    Fig3PeShuffle,
    Fig4Reverse,
    Fig5LastToken,
    Fig6Stage,
    Fig7SingleFrame,
    Fig8CausalityFlip,
    Fig9Spatiotemporal,
    Table2Strategies,
}

impl Recipe {
    pub const ALL: [Recipe; 9] = [
        Recipe::Fig2PeRemoval,
        Recipe::Fig3PeShuffle,
        Recipe::Fig4Reverse,
        Recipe::Fig5LastToken,
        Recipe::Fig6Stage,
        Recipe::Fig7SingleFrame,
        Recipe::Fig8CausalityFlip,
        Recipe::Fig9Spatiotemporal,
        Recipe::Table2Strategies,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Fig2PeRemoval => "fig2_pe_removal",
            Recipe::Fig3PeShuffle => "fig3_pe_shuffle",
            Recipe::Fig4Reverse => "fig4_reverse",
            Recipe::Fig5LastToken => "fig5_last_token",
            Recipe::Fig6Stage => "fig6_stage",
            Recipe::Fig7SingleFrame => "fig7_single_frame",
            Recipe::Fig8CausalityFlip => "fig8_causality_flip",
            Recipe::Fig9Spatiotemporal => "fig9_spatiotemporal",
            Recipe::Table2Strategies => "table2_strategies",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Recipe::Fig2PeRemoval => "positional encoding removed at one layer at a time",
            Recipe::Fig3PeShuffle => "position ids shuffled within the video or the query segment",
            Recipe::Fig4Reverse => "reversed frame order versus reversed temporal position ids",
            Recipe::Fig5LastToken => "final token cut off from the query or the video, per layer window",
            Recipe::Fig6Stage => "query cut off from frames and frames cut off from earlier frames, per window",
            Recipe::Fig7SingleFrame => "query restricted to a single frame",
            Recipe::Fig8CausalityFlip => "single-frame restriction on reversed videos",
            Recipe::Fig9Spatiotemporal => "visual attention restricted to spatially aligned regions, per window",
            Recipe::Table2Strategies => "accuracy and cost of the efficiency strategies",
        }
    }

    /// Task used when the settings name none.
    pub fn default_task(self) -> TaskKind {
        match self {
            Recipe::Fig7SingleFrame => TaskKind::Order,
            Recipe::Fig8CausalityFlip => TaskKind::YesNo,
            _ => TaskKind::Direction,
        }
    }
}

impl std::fmt::Display for Recipe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Recipe {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| HarnessError::UnknownRecipe(s.to_string()))
    }
}

/// Result of one recipe run.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeOutput {
    pub recipe: Recipe,
    pub csv: String,
    pub metadata: serde_json::Value,
}

/// Eval-split samples of `task` sized for `model`.
pub fn eval_samples(model: &Model, task: TaskKind, n: usize, seed: u64) -> Result<Vec<SyntheticSample>, HarnessError> {
    task.check_grid(model.config.frame_grid)
        .map_err(|e| HarnessError::Mismatch(e.to_string()))?;
    Ok(generate_dataset(task, model.config.frame_grid, n, seed, Split::Eval)?)
}

/// Eval-split probes of `task` for `model`.
pub fn eval_probes(model: &Model, task: TaskKind, n: usize, seed: u64) -> Result<Vec<Probe>, HarnessError> {
    Ok(eval_samples(model, task, n, seed)?
        .iter()
        .map(|s| s.to_probe(&model.config))
        .collect::<Result<_, _>>()?)
}

/// The probes of `samples` scored against the answer of the frame-reversed
/// video, for tasks that define one.
pub fn flipped_label_probes(model: &Model, samples: &[SyntheticSample]) -> Result<Vec<Probe>, HarnessError> {
    samples
        .iter()
        .map(|s| {
            let mut p = s.to_probe(&model.config)?;
            p.answer = s.flipped_answer().unwrap_or(s.answer);
            Ok(p)
        })
        .collect()
}

struct Runner<'a> {
    model: &'a Model,
    probes: &'a [Probe],
    result: PerturbationResult,
}

impl Runner<'_> {
    fn layout(&self) -> &TokenLayout {
        &self.probes[0].layout
    }

    fn point(
        &mut self,
        window: usize,
        condition: &str,
        base: &[InterventionSpec],
        perturbed: &[InterventionSpec],
    ) -> Result<(), HarnessError> {
        let pcs = measure_pc(self.model, self.probes, base, perturbed)?;
        self.result.push(window, condition, &pcs);
        Ok(())
    }

    fn sweep(
        &mut self,
        condition: &str,
        spec: &InterventionSpec,
        windows: &[Range<usize>],
    ) -> Result<(), HarnessError> {
        for w in windows {
            let s = spec.clone().on_layers(LayerSet::range(w.clone()));
            self.point(w.start, condition, &[], &[s])?;
        }
        Ok(())
    }
}

fn sweep_csv(r: &PerturbationResult) -> String {
    let mut s = String::from("recipe,task,condition,window,mean_pc,n\n");
    for p in &r.points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.recipe, r.task, p.condition, p.window, p.mean_pc, p.n
        );
    }
    s
}

/// Mean number of earlier visual tokens a visual token may still read
/// under a spatiotemporal configuration, over visual tokens past frame 0.
pub fn mean_visual_sources(layout: &TokenLayout, kind: SpatiotemporalKind, radius: usize) -> f64 {
    let video = layout.video();
    let counts: Vec<f64> = video
        .iter()
        .filter(|&i| !layout.frames[0].contains(i))
        .map(|i| {
            let ci = layout.cell_of(i).expect("visual token");
            (video.start..i)
                .filter(|&j| kind.allows(ci, layout.cell_of(j).expect("visual token"), radius))
                .count() as f64
        })
        .collect();
    tplab_core::metrics::mean(&counts)
}

/// Runs `recipe` on `model`.
pub fn run_recipe(recipe: Recipe, model: &Model, settings: &Settings) -> Result<RecipeOutput, HarnessError> {
    let task = settings.task.unwrap_or_else(|| recipe.default_task());
    let probes = eval_probes(model, task, settings.n_samples, settings.data_seed)?;
    let n_layers = model.config.n_layers;
    let window = settings.window.min(n_layers);
    let windows = WindowSweep::new(window, settings.stride).windows(n_layers)?;
    let flipped: Vec<Probe>;
    let mut extra = serde_json::Map::new();
    let mut run = Runner {
        model,
        probes: &probes,
        result: PerturbationResult::new(recipe.name(), task.name(), settings.seed),
    };
    let frames = run.layout().n_frames();
    let csv = match recipe {
        Recipe::Fig2PeRemoval => {
            for l in 0..n_layers {
                run.point(l, "remove_pe", &[], &[remove_pe_at_layer(l)])?;
            }
            sweep_csv(&run.result)
        }
        Recipe::Fig3PeShuffle => {
            for (i, (name, seg)) in [("shuffle_video", Segment::Video), ("shuffle_query", Segment::Query)]
                .into_iter()
                .enumerate()
            {
                run.point(i, name, &[], &[InterventionSpec::shuffle_pe(seg, settings.seed)])?;
            }
            sweep_csv(&run.result)
        }
        Recipe::Fig4Reverse => {
            run.point(0, "reverse_order", &[], &compose_reversal(true, false))?;
            run.point(1, "reverse_pe", &[], &compose_reversal(false, true))?;
            sweep_csv(&run.result)
        }
        Recipe::Fig5LastToken => {
            let layout = run.layout().clone();
            run.sweep(
                "last_from_query",
                &InterventionSpec::knockout(final_token_knockout(&layout, Segment::Query)),
                &windows,
            )?;
            run.sweep(
                "last_from_video",
                &InterventionSpec::knockout(final_token_knockout(&layout, Segment::Video)),
                &windows,
            )?;
            sweep_csv(&run.result)
        }
        Recipe::Fig6Stage => {
            let layout = run.layout().clone();
            run.sweep(
                "frame_to_query",
                &InterventionSpec::knockout(frame_to_query_knockout(&layout)),
                &windows,
            )?;
            run.sweep(
                "inter_frame",
                &InterventionSpec::knockout(inter_frame_knockout(&layout)?),
                &windows,
            )?;
            sweep_csv(&run.result)
        }
        Recipe::Fig7SingleFrame => {
            let layout = run.layout().clone();
            for k in 0..frames {
                let s = InterventionSpec::knockout(single_frame_restriction(&layout, k)?);
                run.point(k, &format!("only_frame_{k}"), &[], &[s])?;
            }
            sweep_csv(&run.result)
        }
        Recipe::Fig8CausalityFlip => {
            let layout = run.layout().clone();
            let samples = eval_samples(model, task, settings.n_samples, settings.data_seed)?;
            flipped = flipped_label_probes(model, &samples)?;
            let conditions = [
                ("reversed_order", compose_reversal(true, false)),
                ("reversed_order_and_pe", compose_reversal(true, true)),
            ];
            for k in 0..frames {
                let s = InterventionSpec::knockout(single_frame_restriction(&layout, k)?);
                run.point(k, &format!("only_frame_{k}"), &[], std::slice::from_ref(&s))?;
            }
            run.probes = &flipped;
            for (name, rev) in conditions {
                for k in 0..frames {
                    let mut both = rev.clone();
                    both.push(InterventionSpec::knockout(single_frame_restriction(&layout, k)?));
                    run.point(k, &format!("{name}_only_frame_{k}"), &rev, &both)?;
                }
            }
            sweep_csv(&run.result)
        }
        Recipe::Fig9Spatiotemporal => {
            let layout = run.layout().clone();
            let mut counts = serde_json::Map::new();
            for kind in SpatiotemporalKind::ALL {
                let s = InterventionSpec::knockout(spatiotemporal_config(&layout, kind, settings.radius));
                run.sweep(kind.name(), &s, &windows)?;
                counts.insert(
                    kind.name().into(),
                    json!(mean_visual_sources(&layout, kind, settings.radius)),
                );
            }
            extra.insert("mean_visual_sources".into(), counts.into());
            sweep_csv(&run.result)
        }
        Recipe::Table2Strategies => {
            let scheds: Vec<_> = Strategy::ALL.iter().map(|&s| StrategySchedule::new(s)).collect();
            let rows = benchmark_strategies(model, &probes, &scheds)?;
            benchmark_csv(&rows)
        }
    };
    let points = run.result.points.len();
    let mut metadata = json!({
        "recipe": recipe.name(),
        "description": recipe.description(),
        "task": task.name(),
        "seed": settings.seed,
        "data_seed": settings.data_seed,
        "n_samples": probes.len(),
        "window": window,
        "stride": settings.stride,
        "radius": settings.radius,
        "model": model.config,
        "points": points,
        "columns": csv.lines().next().unwrap_or("").split(',').collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    if let Some(m) = metadata.as_object_mut() {
        m.extend(extra);
    }
    Ok(RecipeOutput { recipe, csv, metadata })
}
