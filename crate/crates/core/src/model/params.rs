use super::ModelConfig;

/// Identifies one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    TokenEmbedding,
    LnGain(usize),
    LnBias(usize),
    Wq(usize),
    Wk(usize),
    Wv(usize),
    Wo(usize),
    FfnLnGain(usize),
    FfnLnBias(usize),
    FfnIn(usize),
    FfnInBias(usize),
    FfnOut(usize),
    FfnOutBias(usize),
    FinalLnGain,
    FinalLnBias,
    Unembed,
}

impl ParamKind {
    pub fn name(&self) -> String {
        match *self {
            ParamKind::TokenEmbedding => "tok_emb".into(),
            ParamKind::LnGain(l) => format!("layers.{l}.ln1.gain"),
            ParamKind::LnBias(l) => format!("layers.{l}.ln1.bias"),
            ParamKind::Wq(l) => format!("layers.{l}.attn.wq"),
            ParamKind::Wk(l) => format!("layers.{l}.attn.wk"),
            ParamKind::Wv(l) => format!("layers.{l}.attn.wv"),
            ParamKind::Wo(l) => format!("layers.{l}.attn.wo"),
            ParamKind::FfnLnGain(l) => format!("layers.{l}.ln2.gain"),
            ParamKind::FfnLnBias(l) => format!("layers.{l}.ln2.bias"),
            ParamKind::FfnIn(l) => format!("layers.{l}.ffn.w1"),
            ParamKind::FfnInBias(l) => format!("layers.{l}.ffn.b1"),
            ParamKind::FfnOut(l) => format!("layers.{l}.ffn.w2"),
            ParamKind::FfnOutBias(l) => format!("layers.{l}.ffn.b2"),
            ParamKind::FinalLnGain => "ln_f.gain".into(),
            ParamKind::FinalLnBias => "ln_f.bias".into(),
            ParamKind::Unembed => "unembed".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Offsets of every tensor inside one flat buffer, in declared order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIndex {
    entries: Vec<ParamEntry>,
    first_layer: usize,
    total: usize,
}

const LAYER_TENSORS: usize = 12;

impl ParamIndex {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ffn(), cfg.vocab_size);
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |kind, rows, cols| {
            entries.push(ParamEntry {
                kind,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };
        push(ParamKind::TokenEmbedding, v, d);
        for l in 0..cfg.n_layers {
            push(ParamKind::LnGain(l), 1, d);
            push(ParamKind::LnBias(l), 1, d);
            push(ParamKind::Wq(l), d, d);
            push(ParamKind::Wk(l), d, d);
            push(ParamKind::Wv(l), d, d);
            push(ParamKind::Wo(l), d, d);
            push(ParamKind::FfnLnGain(l), 1, d);
            push(ParamKind::FfnLnBias(l), 1, d);
            push(ParamKind::FfnIn(l), d, f);
            push(ParamKind::FfnInBias(l), 1, f);
            push(ParamKind::FfnOut(l), f, d);
            push(ParamKind::FfnOutBias(l), 1, d);
        }
        push(ParamKind::FinalLnGain, 1, d);
        push(ParamKind::FinalLnBias, 1, d);
        push(ParamKind::Unembed, d, v);
        Self {
            first_layer: 1,
            total: offset,
            entries,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entry(&self, kind: ParamKind) -> &ParamEntry {
        let pos = match kind {
            ParamKind::TokenEmbedding => 0,
            ParamKind::FinalLnGain => self.entries.len() - 3,
            ParamKind::FinalLnBias => self.entries.len() - 2,
            ParamKind::Unembed => self.entries.len() - 1,
            ParamKind::LnGain(l) => self.first_layer + l * LAYER_TENSORS,
            ParamKind::LnBias(l) => self.first_layer + l * LAYER_TENSORS + 1,
            ParamKind::Wq(l) => self.first_layer + l * LAYER_TENSORS + 2,
            ParamKind::Wk(l) => self.first_layer + l * LAYER_TENSORS + 3,
            ParamKind::Wv(l) => self.first_layer + l * LAYER_TENSORS + 4,
            ParamKind::Wo(l) => self.first_layer + l * LAYER_TENSORS + 5,
            ParamKind::FfnLnGain(l) => self.first_layer + l * LAYER_TENSORS + 6,
            ParamKind::FfnLnBias(l) => self.first_layer + l * LAYER_TENSORS + 7,
            ParamKind::FfnIn(l) => self.first_layer + l * LAYER_TENSORS + 8,
            ParamKind::FfnInBias(l) => self.first_layer + l * LAYER_TENSORS + 9,
            ParamKind::FfnOut(l) => self.first_layer + l * LAYER_TENSORS + 10,
            ParamKind::FfnOutBias(l) => self.first_layer + l * LAYER_TENSORS + 11,
        };
        let e = &self.entries[pos];
        debug_assert_eq!(e.kind, kind);
        e
    }

    pub fn range(&self, kind: ParamKind) -> std::ops::Range<usize> {
        let e = self.entry(kind);
        e.offset..e.offset + e.len()
    }
}

/// All model parameters in one flat buffer. Gradients and optimizer moments
/// reuse the same type so element-wise updates are plain slice zips.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    index: ParamIndex,
    data: Vec<f64>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let index = ParamIndex::new(cfg);
        let data = vec![0.0; index.total()];
        Self { index, data }
    }

    pub fn zeros_like(other: &Weights) -> Self {
        Self {
            index: other.index.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn slice(&self, kind: ParamKind) -> &[f64] {
        &self.data[self.index.range(kind)]
    }

    #[inline]
    pub fn slice_mut(&mut self, kind: ParamKind) -> &mut [f64] {
        let r = self.index.range(kind);
        &mut self.data[r]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_dense_and_ordered() {
        let cfg = ModelConfig::default();
        let idx = ParamIndex::new(&cfg);
        let mut expect = 0;
        for e in idx.entries() {
            assert_eq!(e.offset, expect);
            assert_eq!(idx.entry(e.kind), e);
            expect += e.len();
        }
        assert_eq!(expect, idx.total());
        let (d, f, v) = (64, 256, 64);
        let per_layer = 4 * d * d + 2 * d * f + f + 5 * d;
        assert_eq!(idx.total(), 2 * v * d + 2 * d + 6 * per_layer);
    }
}
