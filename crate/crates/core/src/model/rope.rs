//! Rotary position encodings.
//!
//! `rotary_1d` rotates adjacent coordinate pairs of every head by
//! `flat * base^(-2p/d_head)`. `rotary_3d` splits each head into a temporal
//! band (first half of the dims) and two spatial bands (a quarter each),
//! each band with its own inverse-frequency ladder driven by `t`, `h` and `w`.

use super::{PeMode, PositionIds, ROPE_BASE};
use crate::numerics::Matrix;

/// Per-token cos/sin of every rotation pair of one head.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    /// Returns `None` for `PeMode::None`.
    pub fn new(ids: &PositionIds, mode: PeMode, d_head: usize) -> Option<Self> {
        let pairs = d_head / 2;
        let freqs: Vec<(usize, f64)> = match mode {
            PeMode::None => return None,
            PeMode::Rotary1d => (0..pairs)
                .map(|p| (3, ROPE_BASE.powf(-2.0 * p as f64 / d_head as f64)))
                .collect(),
            PeMode::Rotary3d => {
                let band = |axis: usize, dims: usize| {
                    (0..dims / 2).map(move |p| (axis, ROPE_BASE.powf(-2.0 * p as f64 / dims as f64)))
                };
                band(0, d_head / 2)
                    .chain(band(1, d_head / 4))
                    .chain(band(2, d_head / 4))
                    .collect()
            }
        };
        debug_assert_eq!(freqs.len(), pairs);
        let n = ids.len();
        let mut cos = Vec::with_capacity(n * pairs);
        let mut sin = Vec::with_capacity(n * pairs);
        for c in &ids.coords {
            for &(axis, f) in &freqs {
                let pos = match axis {
                    0 => c.t,
                    1 => c.h,
                    2 => c.w,
                    _ => c.flat,
                } as f64;
                let (s, co) = (pos * f).sin_cos();
                cos.push(co);
                sin.push(s);
            }
        }
        Some(Self { pairs, cos, sin })
    }

    /// Rotates every head of `x` in place; row `r` of `x` sits at sequence
    /// position `positions[r]`. `inverse` applies the transposed rotation.
    pub fn rotate(&self, x: &mut Matrix, positions: std::ops::Range<usize>, n_heads: usize, inverse: bool) {
        let d_head = self.pairs * 2;
        debug_assert_eq!(x.cols(), n_heads * d_head);
        debug_assert_eq!(x.rows(), positions.len());
        let sign = if inverse { -1.0 } else { 1.0 };
        for (r, pos) in positions.enumerate() {
            let cs = &self.cos[pos * self.pairs..(pos + 1) * self.pairs];
            let sn = &self.sin[pos * self.pairs..(pos + 1) * self.pairs];
            let row = x.row_mut(r);
            for h in 0..n_heads {
                let head = &mut row[h * d_head..(h + 1) * d_head];
                for p in 0..self.pairs {
                    let (a, b) = (head[2 * p], head[2 * p + 1]);
                    let (c, s) = (cs[p], sign * sn[p]);
                    head[2 * p] = a * c - b * s;
                    head[2 * p + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Applies the positional encoding to queries or keys (`len x n_heads*d_head`,
/// one row per token of `ids`).
pub fn apply_pe(x: &Matrix, ids: &PositionIds, mode: PeMode, n_heads: usize) -> Matrix {
    let mut out = x.clone();
    if let Some(table) = RopeTable::new(ids, mode, x.cols() / n_heads) {
        table.rotate(&mut out, 0..x.rows(), n_heads, false);
    }
    out
}
