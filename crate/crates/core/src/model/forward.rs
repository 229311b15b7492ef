use std::sync::Arc;

use super::{KvCache, Model, ModelError, ParamKind, PositionIds, Result, RopeTable, TokenLayout, LN_EPS};
use crate::numerics::{gemm_acc, layer_norm_row, softmax_in_place, Matrix};

/// Where a hook fires inside an attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HookSite {
    /// Queries and keys after projection, before the positional encoding.
    PrePe,
    /// One head's scaled scores with all masks added, before the softmax.
    PostScores,
    /// Concatenated head outputs, before the output projection.
    PostAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookTensor {
    Query,
    Key,
    Scores { head: usize },
    Attention,
}

/// Everything a hook callback is told about the tensor it receives.
#[derive(Debug, Clone)]
pub struct HookContext<'a> {
    pub layer: usize,
    pub site: HookSite,
    pub tensor: HookTensor,
    /// Sequence positions of the tensor's rows.
    pub rows: std::ops::Range<usize>,
    /// Sequence positions of the score columns (only for `PostScores`).
    pub cols: &'a [usize],
}

pub type HookFn<'a> = Box<dyn Fn(&HookContext<'_>, &mut Matrix) + Send + Sync + 'a>;

pub struct HookPoint<'a> {
    pub layer: usize,
    pub site: HookSite,
    pub callback: HookFn<'a>,
}

impl std::fmt::Debug for HookPoint<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HookPoint")
            .field("layer", &self.layer)
            .field("site", &self.site)
            .finish_non_exhaustive()
    }
}

/// Positional-encoding handling for one layer.
#[derive(Debug, Clone, Default)]
pub enum PeEdit {
    #[default]
    Keep,
    Remove,
    Ids(Arc<PositionIds>),
}

#[derive(Debug, Clone, Default)]
pub struct LayerPlan {
    pub pe: PeEdit,
    /// Additive `{0, -inf}` mask over `(target, source)` sequence positions.
    pub mask: Option<Arc<Matrix>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecordSpec {
    pub attention: bool,
    pub hidden: bool,
}

/// Per-layer edits, hooks and recording switches for one evaluation.
#[derive(Debug, Default)]
pub struct RunPlan<'h> {
    layers: Vec<LayerPlan>,
    hooks: Vec<HookPoint<'h>>,
    pub record: RecordSpec,
}

impl<'h> RunPlan<'h> {
    pub fn new() -> Self {
        Self::default()
    }

    fn layer_mut(&mut self, layer: usize) -> &mut LayerPlan {
        if self.layers.len() <= layer {
            self.layers.resize_with(layer + 1, LayerPlan::default);
        }
        &mut self.layers[layer]
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerPlan> {
        self.layers.get(layer)
    }

    pub fn remove_pe(&mut self, layer: usize) -> &mut Self {
        self.layer_mut(layer).pe = PeEdit::Remove;
        self
    }

    pub fn set_ids(&mut self, layer: usize, ids: Arc<PositionIds>) -> &mut Self {
        self.layer_mut(layer).pe = PeEdit::Ids(ids);
        self
    }

    /// Adds `mask` to the layer's mask (masks compose by addition).
    pub fn add_mask(&mut self, layer: usize, mask: &Matrix) -> &mut Self {
        let slot = &mut self.layer_mut(layer).mask;
        match slot {
            Some(existing) => {
                let mut m = (**existing).clone();
                for (a, b) in m.data_mut().iter_mut().zip(mask.data()) {
                    *a += b;
                }
                *slot = Some(Arc::new(m));
            }
            None => *slot = Some(Arc::new(mask.clone())),
        }
        self
    }

    pub fn hook(&mut self, hook: HookPoint<'h>) -> &mut Self {
        self.hooks.push(hook);
        self
    }

    pub fn record(&mut self, spec: RecordSpec) -> &mut Self {
        self.record = spec;
        self
    }

    fn has_hook(&self, layer: usize, site: HookSite) -> bool {
        self.hooks.iter().any(|h| h.layer == layer && h.site == site)
    }

    fn fire(&self, ctx: &HookContext<'_>, m: &mut Matrix) {
        for h in self.hooks.iter().filter(|h| h.layer == ctx.layer && h.site == ctx.site) {
            (h.callback)(ctx, m);
        }
    }
}

/// Activations captured when requested by [`RecordSpec`].
#[derive(Debug, Clone, Default)]
pub struct Activations {
    /// `[layer][head]`: weights of the evaluated rows over all positions.
    pub attention: Vec<Vec<Matrix>>,
    /// Residual stream after each layer.
    pub hidden: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row per evaluated position.
    pub logits: Matrix,
    pub activations: Activations,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

impl Model {
    /// Full-sequence evaluation with a private, empty cache.
    pub fn forward(
        &self,
        tokens: &[u32],
        layout: &TokenLayout,
        ids: &PositionIds,
        plan: &RunPlan<'_>,
    ) -> Result<ForwardOutput> {
        let mut cache = KvCache::new(&self.config);
        self.forward_cached(tokens, layout, ids, plan, &mut cache)
    }

    /// Evaluates `tokens` as the continuation of whatever `cache` holds:
    /// the first new token sits at position `cache.len()`.
    pub fn forward_cached(
        &self,
        tokens: &[u32],
        layout: &TokenLayout,
        ids: &PositionIds,
        plan: &RunPlan<'_>,
        cache: &mut KvCache,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let start = cache.len();
        let n = tokens.len();
        let rows = start..start + n;
        if cache.n_layers() != cfg.n_layers {
            return Err(ModelError::Length(format!(
                "cache has {} layers, model {}",
                cache.n_layers(),
                cfg.n_layers
            )));
        }
        if rows.end > layout.total_len || ids.len() != layout.total_len {
            return Err(ModelError::Length(format!(
                "positions {rows:?} / {} ids do not fit a layout of {}",
                ids.len(),
                layout.total_len
            )));
        }
        if layout.grid != cfg.frame_grid {
            return Err(ModelError::Layout(format!(
                "layout grid {:?} does not match model grid {:?}",
                layout.grid, cfg.frame_grid
            )));
        }
        for (off, &t) in tokens.iter().enumerate() {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfVocab {
                    position: start + off,
                    token: t,
                    vocab: cfg.vocab_size,
                });
            }
        }

        let (d, dh, nh, f) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_ffn());
        let w = &self.weights;
        let base_table = RopeTable::new(ids, cfg.pe_mode, dh);
        let scale = 1.0 / (dh as f64).sqrt();

        let emb = w.slice(ParamKind::TokenEmbedding);
        let mut x = Matrix::zeros(n, d);
        for (r, &t) in tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
        }

        let mut acts = Activations::default();
        let mut h = Matrix::zeros(n, d);
        for l in 0..cfg.n_layers {
            let lp = plan.layer(l);
            let (g1, b1) = (w.slice(ParamKind::LnGain(l)), w.slice(ParamKind::LnBias(l)));
            for r in 0..n {
                layer_norm_row(x.row(r), g1, b1, LN_EPS, h.row_mut(r));
            }
            let mut q = Matrix::zeros(n, d);
            let mut k = Matrix::zeros(n, d);
            let mut v = Matrix::zeros(n, d);
            gemm_acc(h.data(), w.slice(ParamKind::Wq(l)), q.data_mut(), n, d, d);
            gemm_acc(h.data(), w.slice(ParamKind::Wk(l)), k.data_mut(), n, d, d);
            gemm_acc(h.data(), w.slice(ParamKind::Wv(l)), v.data_mut(), n, d, d);

            if plan.has_hook(l, HookSite::PrePe) {
                for (tensor, m) in [(HookTensor::Query, &mut q), (HookTensor::Key, &mut k)] {
                    let ctx = HookContext {
                        layer: l,
                        site: HookSite::PrePe,
                        tensor,
                        rows: rows.clone(),
                        cols: &[],
                    };
                    plan.fire(&ctx, m);
                }
            }

            let layer_table;
            let table = match lp.map(|p| &p.pe) {
                None | Some(PeEdit::Keep) => base_table.as_ref(),
                Some(PeEdit::Remove) => None,
                Some(PeEdit::Ids(alt)) => {
                    if alt.len() != layout.total_len {
                        return Err(ModelError::Length(format!(
                            "layer {l} position ids have length {}, layout {}",
                            alt.len(),
                            layout.total_len
                        )));
                    }
                    layer_table = RopeTable::new(alt, cfg.pe_mode, dh);
                    layer_table.as_ref()
                }
            };
            if let Some(t) = table {
                t.rotate(&mut q, rows.clone(), nh, false);
                t.rotate(&mut k, rows.clone(), nh, false);
            }

            cache.append(l, k.data(), v.data(), layout);
            let live = cache.live_indices(l);
            let mask = lp.and_then(|p| p.mask.as_deref());

            let mut att = Matrix::zeros(n, d);
            if plan.record.attention {
                acts.attention.push(Vec::with_capacity(nh));
            }
            let n_live = live.len();
            let mut qh = vec![0.0; n * dh];
            let mut kt = vec![0.0; dh * n_live];
            let mut vh = vec![0.0; n_live * dh];
            let mut oh = vec![0.0; n * dh];
            for head in 0..nh {
                let cols = head * dh..(head + 1) * dh;
                for r in 0..n {
                    qh[r * dh..(r + 1) * dh].copy_from_slice(&q.row(r)[cols.clone()]);
                }
                for (c, &j) in live.iter().enumerate() {
                    for (e, &kv) in cache.key(l, j)[cols.clone()].iter().enumerate() {
                        kt[e * n_live + c] = kv;
                    }
                    vh[c * dh..(c + 1) * dh].copy_from_slice(&cache.value(l, j)[cols.clone()]);
                }
                let mut scores = Matrix::zeros(n, n_live);
                gemm_acc(&qh, &kt, scores.data_mut(), n, dh, n_live);
                for r in 0..n {
                    let i = start + r;
                    let srow = scores.row_mut(r);
                    for (c, &j) in live.iter().enumerate() {
                        srow[c] = if j > i {
                            f64::NEG_INFINITY
                        } else {
                            match mask {
                                Some(m) => srow[c] * scale + m.get(i, j),
                                None => srow[c] * scale,
                            }
                        };
                    }
                }
                if plan.has_hook(l, HookSite::PostScores) {
                    let ctx = HookContext {
                        layer: l,
                        site: HookSite::PostScores,
                        tensor: HookTensor::Scores { head },
                        rows: rows.clone(),
                        cols: &live,
                    };
                    plan.fire(&ctx, &mut scores);
                }
                for r in 0..n {
                    softmax_in_place(scores.row_mut(r)).map_err(|_| ModelError::FullyMasked {
                        layer: l,
                        head,
                        token: start + r,
                    })?;
                }
                oh.fill(0.0);
                gemm_acc(scores.data(), &vh, &mut oh, n, n_live, dh);
                for r in 0..n {
                    att.row_mut(r)[cols.clone()].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
                }
                if plan.record.attention {
                    let mut full = Matrix::zeros(n, layout.total_len);
                    for r in 0..n {
                        for (c, &j) in live.iter().enumerate() {
                            full.set(r, j, scores.get(r, c));
                        }
                    }
                    acts.attention[l].push(full);
                }
            }
            if plan.has_hook(l, HookSite::PostAttention) {
                let ctx = HookContext {
                    layer: l,
                    site: HookSite::PostAttention,
                    tensor: HookTensor::Attention,
                    rows: rows.clone(),
                    cols: &[],
                };
                plan.fire(&ctx, &mut att);
            }
            gemm_acc(att.data(), w.slice(ParamKind::Wo(l)), x.data_mut(), n, d, d);

            let (g2, b2) = (w.slice(ParamKind::FfnLnGain(l)), w.slice(ParamKind::FfnLnBias(l)));
            for r in 0..n {
                layer_norm_row(x.row(r), g2, b2, LN_EPS, h.row_mut(r));
            }
            let mut u = Matrix::zeros(n, f);
            let bias1 = w.slice(ParamKind::FfnInBias(l));
            for r in 0..n {
                u.row_mut(r).copy_from_slice(bias1);
            }
            gemm_acc(h.data(), w.slice(ParamKind::FfnIn(l)), u.data_mut(), n, d, f);
            for v in u.data_mut() {
                *v = gelu(*v);
            }
            let bias2 = w.slice(ParamKind::FfnOutBias(l));
            for r in 0..n {
                for (o, b) in x.row_mut(r).iter_mut().zip(bias2) {
                    *o += b;
                }
            }
            gemm_acc(u.data(), w.slice(ParamKind::FfnOut(l)), x.data_mut(), n, f, d);
            if plan.record.hidden {
                acts.hidden.push(x.clone());
            }
        }

        let (gf, bf) = (w.slice(ParamKind::FinalLnGain), w.slice(ParamKind::FinalLnBias));
        for r in 0..n {
            layer_norm_row(x.row(r), gf, bf, LN_EPS, h.row_mut(r));
        }
        let mut logits = Matrix::zeros(n, cfg.vocab_size);
        gemm_acc(
            h.data(),
            w.slice(ParamKind::Unembed),
            logits.data_mut(),
            n,
            d,
            cfg.vocab_size,
        );
        Ok(ForwardOutput {
            logits,
            activations: acts,
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn tanh_exp(y: f64) -> f64 {
    // 1 - 2 / (e^{2y} + 1)
    1.0 - 2.0 / (crate::numerics::exp(2.0 * y) + 1.0)
}

/// tanh term of the GELU approximation; `gelu` and `gelu_grad_from` share it.
#[inline]
pub(crate) fn gelu_tanh(x: f64) -> f64 {
    tanh_exp(GELU_C * (x + 0.044715 * x * x * x))
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

#[inline]
pub(crate) fn gelu_from(x: f64, t: f64) -> f64 {
    0.5 * x * (1.0 + t)
}

#[inline]
pub(crate) fn gelu_grad_from(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    gelu_grad_from(x, gelu_tanh(x))
}
