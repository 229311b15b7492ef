//! Decoder-only transformer over an instruction / video-frames / query token
//! layout.
//!
//! The forward pass accepts a [`RunPlan`] that can switch positional
//! encodings off per layer, substitute position ids per layer, add knockout
//! masks per layer, attach hooks and record activations. A [`KvCache`] with a
//! segment-aware eviction policy backs both full-sequence and incremental
//! evaluation.

mod cache;
mod checkpoint;
mod forward;
mod layout;
mod params;
mod rope;
mod train_pass;

pub use cache::{EvictionRule, KvCache, KV_BYTES_PER_VALUE};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    Activations, ForwardOutput, HookContext, HookFn, HookPoint, HookSite, HookTensor, LayerPlan, PeEdit, RecordSpec,
    RunPlan,
};
pub use layout::{assign_position_ids, build_layout, Coord, PositionIds, PositionScheme, Segment, Span, TokenLayout};
pub use params::{ParamIndex, ParamKind, Weights};
pub use rope::{apply_pe, RopeTable};
pub use train_pass::{loss_and_grad, train_logits, BatchStats, TrainExample};

use crate::numerics::{self, NumericsError, Rng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LN_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfVocab { position: usize, token: u32, vocab: usize },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("layer {layer}, head {head}: token {token} has no attendable source")]
    FullyMasked { layer: usize, head: usize, token: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config mismatch: expected {expected:?}, found {found:?}")]
    ConfigMismatch {
        expected: Box<ModelConfig>,
        found: Box<ModelConfig>,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    None,
    Rotary1d,
    Rotary3d,
}

impl PeMode {
    pub fn code(self) -> u32 {
        match self {
            PeMode::None => 0,
            PeMode::Rotary1d => 1,
            PeMode::Rotary3d => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(PeMode::None),
            1 => Some(PeMode::Rotary1d),
            2 => Some(PeMode::Rotary3d),
            _ => None,
        }
    }
}

impl std::str::FromStr for PeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(PeMode::None),
            "rotary_1d" => Ok(PeMode::Rotary1d),
            "rotary_3d" => Ok(PeMode::Rotary3d),
            other => Err(format!("unknown pe mode {other:?}")),
        }
    }
}

/// Video grid: `frames x height x width` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameGrid {
    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub ffn_mult: usize,
    pub pe_mode: PeMode,
    pub vocab_size: usize,
    pub frame_grid: FrameGrid,
}

impl Default for ModelConfig {
    /// The desk-scale default: 6 layers, width 64, 4 heads of 16, 4x4x4 video grid.
    fn default() -> Self {
        Self {
            n_layers: 6,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            ffn_mult: 4,
            pe_mode: PeMode::Rotary3d,
            vocab_size: 64,
            frame_grid: FrameGrid {
                frames: 4,
                height: 4,
                width: 4,
            },
        }
    }
}

impl ModelConfig {
    pub fn d_ffn(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.ffn_mult == 0 {
            return fail("layers, heads, head width and ffn multiplier must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        match self.pe_mode {
            PeMode::Rotary1d if !self.d_head.is_multiple_of(2) => {
                return fail(format!("rotary_1d needs an even head width, got {}", self.d_head))
            }
            // bands of d/2, d/4, d/4 dimensions, each made of rotation pairs
            PeMode::Rotary3d if !self.d_head.is_multiple_of(8) => {
                return fail(format!(
                    "rotary_3d needs a head width divisible by 8, got {}",
                    self.d_head
                ))
            }
            _ => {}
        }
        if self.vocab_size == 0 {
            return fail("empty vocabulary".into());
        }
        let g = self.frame_grid;
        if g.frames == 0 || g.height == 0 || g.width == 0 {
            return fail(format!("degenerate frame grid {g:?}"));
        }
        Ok(())
    }
}

/// Transformer parameters plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl Model {
    /// Random initialization: N(0, 1/fan_in) projections, residual outputs
    /// scaled down by `sqrt(2 * n_layers)`, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut weights = Weights::zeros(&config);
        let d = config.d_model as f64;
        let f = config.d_ffn() as f64;
        let resid = (2.0 * config.n_layers as f64).sqrt();
        let index = weights.index().clone();
        for entry in index.entries() {
            let std = match entry.kind {
                ParamKind::TokenEmbedding => 1.0,
                ParamKind::LnGain(_) | ParamKind::FfnLnGain(_) | ParamKind::FinalLnGain => {
                    weights.slice_mut(entry.kind).fill(1.0);
                    continue;
                }
                ParamKind::LnBias(_)
                | ParamKind::FfnLnBias(_)
                | ParamKind::FinalLnBias
                | ParamKind::FfnInBias(_)
                | ParamKind::FfnOutBias(_) => continue,
                ParamKind::Wq(_) | ParamKind::Wk(_) | ParamKind::Wv(_) | ParamKind::FfnIn(_) => 1.0 / d.sqrt(),
                ParamKind::Wo(_) => 1.0 / d.sqrt() / resid,
                ParamKind::FfnOut(_) => 1.0 / f.sqrt() / resid,
                ParamKind::Unembed => 1.0 / d.sqrt(),
            };
            for v in weights.slice_mut(entry.kind) {
                *v = rng.normal() * std;
            }
        }
        Ok(Self { config, weights })
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }
}

/// Softmax over final-position logits.
pub fn next_token_distribution(logits: &[f64]) -> Vec<f64> {
    numerics::softmax(logits)
}

/// Layer index band `[floor-rounded start, rounded end)` for a depth fraction
/// interval, rounding each edge to the nearest layer boundary.
pub fn resolve_band(n_layers: usize, start: f64, end: f64) -> std::ops::Range<usize> {
    let edge = |f: f64| ((f * n_layers as f64).round() as usize).min(n_layers);
    let (a, b) = (edge(start), edge(end));
    a..b.max(a)
}

/// Early / middle / deep thirds of depth, with breakpoints at 10/28 and 20/28.
pub fn depth_bands(n_layers: usize) -> [std::ops::Range<usize>; 3] {
    [
        resolve_band(n_layers, 0.0, 10.0 / 28.0),
        resolve_band(n_layers, 10.0 / 28.0, 20.0 / 28.0),
        resolve_band(n_layers, 20.0 / 28.0, 1.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.d_model, c.n_heads * c.d_head);
        assert_eq!(c.frame_grid.tokens_per_frame(), 16);
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut c = ModelConfig::default();
        c.d_model = 60;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.d_head = 12;
        c.d_model = 48;
        assert!(c.validate().is_err(), "12 is not divisible into three rotary bands");
        c.pe_mode = PeMode::Rotary1d;
        c.validate().unwrap();
    }

    #[test]
    fn bands_for_toy_depth() {
        assert_eq!(resolve_band(6, 10.0 / 28.0, 20.0 / 28.0), 2..4);
        assert_eq!(resolve_band(6, 20.0 / 28.0, 1.0), 4..6);
        assert_eq!(resolve_band(28, 10.0 / 28.0, 20.0 / 28.0), 10..20);
        assert_eq!(resolve_band(6, 0.0, 0.0), 0..0);
        let [e, m, d] = depth_bands(28);
        assert_eq!((e, m, d), (0..10, 10..20, 20..28));
    }

    #[test]
    fn next_token_distribution_examples() {
        let p = next_token_distribution(&[0.5; 8]);
        assert!(p.iter().all(|v| (v - 0.125).abs() < 1e-12));
        let mut logits = vec![0.0; 10];
        logits[3] = 20.0;
        assert!(next_token_distribution(&logits)[3] > 0.999);
        let s: f64 = next_token_distribution(&[1.0, -2.0, 3.5]).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn next_token_distribution_matches_masked_softmax() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let m = numerics::Matrix::from_rows(&[logits.to_vec()]);
        let via_mask = numerics::masked_softmax(&m, &numerics::Matrix::zeros(1, 4)).unwrap();
        assert_eq!(via_mask.row(0), next_token_distribution(&logits).as_slice());
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(ModelConfig::default(), 1).unwrap();
        let b = Model::init(ModelConfig::default(), 1).unwrap();
        let c = Model::init(ModelConfig::default(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
