use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{InterventionError, LayerSet, Result};
use crate::model::{Segment, TokenLayout};
use crate::numerics::Matrix;

/// One `targets x sources` rectangle of blocked pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnockoutBlock {
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
}

/// A union of blocked `(target, source)` rectangles plus the layers it
/// applies to. Pairs with `source > target` are left to the causal mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnockoutSpec {
    pub blocks: Vec<KnockoutBlock>,
    pub layers: LayerSet,
}

impl KnockoutSpec {
    pub fn new(targets: impl IntoIterator<Item = usize>, sources: impl IntoIterator<Item = usize>) -> Self {
        Self {
            blocks: vec![KnockoutBlock {
                targets: targets.into_iter().collect(),
                sources: sources.into_iter().collect(),
            }],
            layers: LayerSet::All,
        }
    }

    pub fn empty() -> Self {
        Self {
            blocks: Vec::new(),
            layers: LayerSet::All,
        }
    }

    pub fn on_layers(mut self, layers: LayerSet) -> Self {
        self.layers = layers;
        self
    }

    /// Union of the blocked pairs; the layer set of `self` is kept.
    pub fn union(mut self, other: KnockoutSpec) -> Self {
        self.blocks.extend(other.blocks);
        self
    }

    pub fn targets(&self) -> BTreeSet<usize> {
        self.blocks.iter().flat_map(|b| b.targets.iter().copied()).collect()
    }

    pub fn sources(&self) -> BTreeSet<usize> {
        self.blocks.iter().flat_map(|b| b.sources.iter().copied()).collect()
    }

    /// Every blocked `(i, j)` with `j <= i`.
    pub fn blocked_pairs(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for b in &self.blocks {
            for &i in &b.targets {
                for &j in &b.sources {
                    if j <= i {
                        out.insert((i, j));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self, total_len: usize) -> Result<()> {
        for b in &self.blocks {
            if let Some(&bad) = b.targets.iter().chain(&b.sources).find(|&&i| i >= total_len) {
                return Err(InterventionError::IndexOutOfRange {
                    index: bad,
                    len: total_len,
                });
            }
        }
        Ok(())
    }
}

/// Additive `{0, -inf}` mask for `spec`. Errors when some row would have no
/// attendable source once the causal mask is added.
pub fn build_knockout_mask(spec: &KnockoutSpec, total_len: usize) -> Result<Matrix> {
    spec.validate(total_len)?;
    let mut m = Matrix::zeros(total_len, total_len);
    let mut blocked = vec![0usize; total_len];
    for b in &spec.blocks {
        for &i in &b.targets {
            for &j in &b.sources {
                if j <= i && m.get(i, j) == 0.0 {
                    m.set(i, j, f64::NEG_INFINITY);
                    blocked[i] += 1;
                }
            }
        }
    }
    if let Some(row) = (0..total_len).find(|&i| blocked[i] == i + 1) {
        return Err(InterventionError::FullyMaskedRow { row });
    }
    Ok(m)
}

fn span_minus(span: std::ops::Range<usize>, exclude: usize) -> Vec<usize> {
    span.filter(|&j| j != exclude).collect()
}

/// The final token may not read from `source` (its own position excluded).
pub fn final_token_knockout(layout: &TokenLayout, source: Segment) -> KnockoutSpec {
    let last = layout.last_index();
    KnockoutSpec::new([last], span_minus(layout.segment(source).iter(), last))
}

/// Query tokens may not read any visual token.
pub fn frame_to_query_knockout(layout: &TokenLayout) -> KnockoutSpec {
    KnockoutSpec::new(layout.query.iter(), layout.video().iter())
}

/// Each frame may not read any earlier frame.
pub fn inter_frame_knockout(layout: &TokenLayout) -> Result<KnockoutSpec> {
    if layout.n_frames() < 2 {
        return Err(InterventionError::TooFewFrames {
            needed: 2,
            found: layout.n_frames(),
        });
    }
    let mut spec = KnockoutSpec::empty();
    for k in 1..layout.n_frames() {
        spec = spec.union(KnockoutSpec::new(
            layout.frames[k].iter(),
            layout.frames[0].start..layout.frames[k - 1].end,
        ));
    }
    Ok(spec)
}

/// Visual tokens may not read other visual tokens of the same frame.
pub fn intra_frame_knockout(layout: &TokenLayout) -> KnockoutSpec {
    let mut spec = KnockoutSpec::empty();
    for f in &layout.frames {
        for i in f.iter() {
            spec = spec.union(KnockoutSpec::new([i], span_minus(f.iter(), i)));
        }
    }
    spec
}

/// Query tokens may read frame `keep` only, among visual tokens.
pub fn single_frame_restriction(layout: &TokenLayout, keep: usize) -> Result<KnockoutSpec> {
    if keep >= layout.n_frames() {
        return Err(InterventionError::FrameOutOfRange {
            frame: keep,
            frames: layout.n_frames(),
        });
    }
    let kept = layout.frames[keep];
    Ok(KnockoutSpec::new(
        layout.query.iter(),
        layout.video().iter().filter(|j| !kept.contains(*j)),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatiotemporalKind {
    /// Aligned region of every earlier frame.
    CorrespondingArea,
    /// All of the immediately preceding frame.
    PreviousFrame,
    /// Aligned region of the immediately preceding frame.
    CorrespondingAreaPrev,
}

impl SpatiotemporalKind {
    pub const ALL: [SpatiotemporalKind; 3] = [
        SpatiotemporalKind::CorrespondingArea,
        SpatiotemporalKind::PreviousFrame,
        SpatiotemporalKind::CorrespondingAreaPrev,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpatiotemporalKind::CorrespondingArea => "corresponding_area",
            SpatiotemporalKind::PreviousFrame => "previous_frame",
            SpatiotemporalKind::CorrespondingAreaPrev => "corresponding_area_prev",
        }
    }

    /// Whether a visual token at `(k, h, w)` keeps access to an earlier visual
    /// token at `(k2, h2, w2)`.
    pub fn allows(self, (k, h, w): (usize, usize, usize), (k2, h2, w2): (usize, usize, usize), radius: usize) -> bool {
        let near = h.abs_diff(h2) <= radius && w.abs_diff(w2) <= radius;
        match self {
            SpatiotemporalKind::CorrespondingArea => k2 < k && near,
            SpatiotemporalKind::PreviousFrame => k2 + 1 == k,
            SpatiotemporalKind::CorrespondingAreaPrev => k2 + 1 == k && near,
        }
    }
}

impl std::str::FromStr for SpatiotemporalKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown spatiotemporal configuration {s:?}"))
    }
}

/// Among earlier visual tokens, each visual token keeps only the sources the
/// configuration allows; its own position and all text tokens stay readable.
pub fn spatiotemporal_config(layout: &TokenLayout, kind: SpatiotemporalKind, radius: usize) -> KnockoutSpec {
    let mut spec = KnockoutSpec::empty();
    for i in layout.video().iter() {
        let ci = layout.cell_of(i).expect("visual token");
        let sources: Vec<usize> = (layout.video().start..i)
            .filter(|&j| !kind.allows(ci, layout.cell_of(j).expect("visual token"), radius))
            .collect();
        if !sources.is_empty() {
            spec = spec.union(KnockoutSpec::new([i], sources));
        }
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_layout, FrameGrid, ModelConfig};
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn layout(t: usize, h: usize, w: usize, li: usize, lq: usize) -> TokenLayout {
        let mut c = ModelConfig::default();
        c.frame_grid = FrameGrid {
            frames: t,
            height: h,
            width: w,
        };
        build_layout(&c, li, lq).unwrap()
    }

    fn masked(m: &Matrix) -> BTreeSet<(usize, usize)> {
        let mut s = BTreeSet::new();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if m.get(i, j) == f64::NEG_INFINITY {
                    s.insert((i, j));
                }
            }
        }
        s
    }

    #[test]
    fn single_pair_and_empty() {
        let m = build_knockout_mask(&KnockoutSpec::new([2], [0]), 3).unwrap();
        assert_eq!(masked(&m), [(2, 0)].into_iter().collect());
        let z = build_knockout_mask(&KnockoutSpec::new([], [0, 1]), 3).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(build_knockout_mask(&KnockoutSpec::new([5], [0]), 3).is_err());
    }

    #[test]
    fn fully_masked_row_is_named() {
        let err = build_knockout_mask(&KnockoutSpec::new([1], [0, 1]), 3).unwrap_err();
        assert!(matches!(err, InterventionError::FullyMaskedRow { row: 1 }));
        assert!(build_knockout_mask(&KnockoutSpec::new([1, 2], [0, 1]), 3).is_err());
        build_knockout_mask(&KnockoutSpec::new([2], [0, 1]), 3).unwrap();
    }

    #[test]
    fn final_token_segments() {
        let l = layout(4, 2, 2, 3, 5);
        let v = final_token_knockout(&l, Segment::Video);
        assert_eq!(v.targets(), [23].into_iter().collect());
        assert_eq!(v.sources(), (3..19).collect());
        let q = final_token_knockout(&l, Segment::Query);
        assert_eq!(q.sources(), (19..23).collect());
        let m = build_knockout_mask(&q, l.total_len).unwrap();
        let brute: BTreeSet<_> = (19..23).map(|j| (23, j)).collect();
        assert_eq!(masked(&m), brute);
    }

    #[test]
    fn counting_examples() {
        let l = layout(2, 4, 4, 2, 3);
        let s = inter_frame_knockout(&l).unwrap();
        let expect: BTreeSet<_> = l.frames[1]
            .iter()
            .flat_map(|i| l.frames[0].iter().map(move |j| (i, j)))
            .collect();
        assert_eq!(s.blocked_pairs(), expect);

        let l = layout(4, 4, 4, 2, 3);
        assert_eq!(inter_frame_knockout(&l).unwrap().blocked_pairs().len(), 16 * 16 * 6);
        assert!(inter_frame_knockout(&layout(1, 4, 4, 2, 3)).is_err());

        let l = layout(4, 2, 2, 3, 5);
        let ftq = frame_to_query_knockout(&l);
        assert_eq!(ftq.blocked_pairs().len(), 5 * 16);
    }

    #[test]
    fn single_frame_sources() {
        let l = layout(4, 2, 2, 3, 5);
        let last = single_frame_restriction(&l, 3).unwrap();
        assert_eq!(last.sources(), (3..15).collect());
        let first = single_frame_restriction(&l, 0).unwrap();
        assert_eq!(first.sources(), (7..19).collect());
        assert_eq!(first.targets(), (19..24).collect());
        assert!(single_frame_restriction(&l, 4).is_err());
    }

    fn allowed_visual_sources(spec: &KnockoutSpec, l: &TokenLayout, i: usize) -> usize {
        let blocked = spec.blocked_pairs();
        (l.video().start..i).filter(|&j| !blocked.contains(&(i, j))).count()
    }

    #[test]
    fn spatiotemporal_counts() {
        let l = layout(4, 4, 4, 2, 3);
        let prev0 = spatiotemporal_config(&l, SpatiotemporalKind::CorrespondingAreaPrev, 0);
        for i in l.video().iter() {
            let expect = usize::from(l.frame_of(i).unwrap() > 0);
            assert_eq!(allowed_visual_sources(&prev0, &l, i), expect);
        }
        let pf = spatiotemporal_config(&l, SpatiotemporalKind::PreviousFrame, 1);
        for i in l.frames[1].start..l.video().end {
            assert_eq!(allowed_visual_sources(&pf, &l, i), 16);
        }
    }

    #[test]
    fn spatiotemporal_matches_geometric_oracle() {
        let l = layout(3, 2, 2, 1, 1);
        for kind in SpatiotemporalKind::ALL {
            for radius in 0..3 {
                let spec = spatiotemporal_config(&l, kind, radius);
                let blocked = spec.blocked_pairs();
                for i in l.video().iter() {
                    for j in l.video().start..i {
                        let (k, h, w) = l.cell_of(i).unwrap();
                        let (k2, h2, w2) = l.cell_of(j).unwrap();
                        let dh = (h as i64 - h2 as i64).abs() as usize;
                        let dw = (w as i64 - w2 as i64).abs() as usize;
                        let ok = match kind {
                            SpatiotemporalKind::CorrespondingArea => k2 < k && dh <= radius && dw <= radius,
                            SpatiotemporalKind::PreviousFrame => k2 == k.wrapping_sub(1),
                            SpatiotemporalKind::CorrespondingAreaPrev => {
                                k2 == k.wrapping_sub(1) && dh <= radius && dw <= radius
                            }
                        };
                        assert_eq!(!blocked.contains(&(i, j)), ok, "{kind:?} r={radius} ({i},{j})");
                    }
                }
                assert!(blocked
                    .iter()
                    .all(|&(i, j)| l.video().contains(i) && l.video().contains(j)));
            }
        }
    }

    #[test]
    fn disjoint_union_equals_mask_sum() {
        let l = layout(4, 2, 2, 3, 5);
        let a = single_frame_restriction(&l, 1).unwrap();
        let b = inter_frame_knockout(&l).unwrap();
        let mut sum = build_knockout_mask(&a, l.total_len).unwrap();
        sum.add_assign(&build_knockout_mask(&b, l.total_len).unwrap()).unwrap();
        let u = build_knockout_mask(&a.union(b), l.total_len).unwrap();
        assert_eq!(sum, u);
    }

    proptest! {
        #[test]
        fn mask_matches_pair_enumeration(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let len = 2 + rng.below(29);
            let mut spec = KnockoutSpec::empty();
            for _ in 0..1 + rng.below(3) {
                let t: Vec<usize> = (0..len).filter(|_| rng.uniform() < 0.3).collect();
                let s: Vec<usize> = (0..len).filter(|_| rng.uniform() < 0.3).collect();
                spec = spec.union(KnockoutSpec::new(t, s));
            }
            let mut brute = BTreeSet::new();
            for b in &spec.blocks {
                for &i in &b.targets {
                    for &j in &b.sources {
                        if j <= i {
                            brute.insert((i, j));
                        }
                    }
                }
            }
            match build_knockout_mask(&spec, len) {
                Ok(m) => prop_assert_eq!(masked(&m), brute),
                Err(InterventionError::FullyMaskedRow { row }) => {
                    prop_assert!((0..=row).all(|j| brute.contains(&(row, j))));
                }
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
