use super::{ModelConfig, Segment, TokenLayout};

/// Byte width assumed for one cached key/value element.
pub const KV_BYTES_PER_VALUE: usize = 4;

/// Tokens of `segment` leave the cache from `from_layer` onward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvictionRule {
    pub segment: Segment,
    pub from_layer: usize,
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

/// Per-layer keys (after the positional encoding) and values.
///
/// Eviction is monotone in depth: a token evicted at layer `l` is absent
/// from layers `l..` until the cache is cleared.
#[derive(Debug, Clone)]
pub struct KvCache {
    d_model: usize,
    layers: Vec<LayerCache>,
    exit_layer: Vec<Option<usize>>,
    rules: Vec<EvictionRule>,
    eviction_log: Vec<(usize, usize)>,
    peak_bytes: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self::with_rules(cfg, Vec::new())
    }

    pub fn with_rules(cfg: &ModelConfig, rules: Vec<EvictionRule>) -> Self {
        Self {
            d_model: cfg.d_model,
            layers: vec![LayerCache::default(); cfg.n_layers],
            exit_layer: Vec::new(),
            rules,
            eviction_log: Vec::new(),
            peak_bytes: 0,
        }
    }

    pub fn rules(&self) -> &[EvictionRule] {
        &self.rules
    }

    /// Number of tokens the deepest layer has seen.
    pub fn len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            *l = LayerCache::default();
        }
        self.exit_layer.clear();
        self.eviction_log.clear();
        self.peak_bytes = 0;
    }

    /// `(layer, token)` pairs in the order they were evicted.
    pub fn eviction_log(&self) -> &[(usize, usize)] {
        &self.eviction_log
    }

    #[inline]
    pub fn is_live(&self, layer: usize, token: usize) -> bool {
        token < self.layers[layer].len && self.exit_layer[token].is_none_or(|e| layer < e)
    }

    pub fn live_indices(&self, layer: usize) -> Vec<usize> {
        (0..self.layers[layer].len)
            .filter(|&j| self.is_live(layer, j))
            .collect()
    }

    pub fn live_count(&self, layer: usize) -> usize {
        (0..self.layers[layer].len).filter(|&j| self.is_live(layer, j)).count()
    }

    /// Live tokens x (key + value) x width x bytes per value.
    pub fn layer_bytes(&self, layer: usize) -> usize {
        self.live_count(layer) * 2 * self.d_model * KV_BYTES_PER_VALUE
    }

    pub fn total_bytes(&self) -> usize {
        (0..self.layers.len()).map(|l| self.layer_bytes(l)).sum()
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    #[inline]
    pub fn key(&self, layer: usize, token: usize) -> &[f64] {
        &self.layers[layer].keys[token * self.d_model..(token + 1) * self.d_model]
    }

    #[inline]
    pub fn value(&self, layer: usize, token: usize) -> &[f64] {
        &self.layers[layer].values[token * self.d_model..(token + 1) * self.d_model]
    }

    /// Removes `token` from `layer` and every deeper layer.
    pub fn evict(&mut self, layer: usize, token: usize) {
        if token >= self.exit_layer.len() {
            self.exit_layer.resize(token + 1, None);
        }
        match self.exit_layer[token] {
            Some(e) if e <= layer => {}
            _ => {
                self.exit_layer[token] = Some(layer);
                self.eviction_log.push((layer, token));
            }
        }
    }

    /// Appends keys/values for the next `n` tokens of `layer`, then applies
    /// the eviction rules to them.
    pub(crate) fn append(&mut self, layer: usize, keys: &[f64], values: &[f64], layout: &TokenLayout) {
        let d = self.d_model;
        let n = keys.len() / d;
        let start = self.layers[layer].len;
        let lc = &mut self.layers[layer];
        lc.keys.extend_from_slice(keys);
        lc.values.extend_from_slice(values);
        lc.len += n;
        if self.exit_layer.len() < start + n {
            self.exit_layer.resize(start + n, None);
        }
        for tok in start..start + n {
            let seg = layout.segment_of(tok);
            let hit = self.rules.iter().any(|r| r.segment == seg && layer >= r.from_layer);
            if hit {
                self.evict(layer, tok);
            }
        }
        self.peak_bytes = self.peak_bytes.max(self.total_bytes());
    }
}
