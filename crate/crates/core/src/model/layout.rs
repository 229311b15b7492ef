use super::{FrameGrid, ModelConfig, ModelError, Result};
use crate::numerics::Rng;
use serde::{Deserialize, Serialize};

/// Half-open index interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }

    pub fn iter(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Instruction,
    Video,
    Query,
}

impl std::str::FromStr for Segment {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "instruction" => Ok(Segment::Instruction),
            "video" => Ok(Segment::Video),
            "query" => Ok(Segment::Query),
            other => Err(format!("unknown segment {other:?}")),
        }
    }
}

/// Partition of a sequence into instruction, per-frame visual blocks and query.
///
/// Visual tokens are frame-major, then row-major within a frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub instruction: Span,
    pub frames: Vec<Span>,
    pub query: Span,
    pub total_len: usize,
    pub grid: FrameGrid,
}

pub fn build_layout(config: &ModelConfig, instruction_len: usize, query_len: usize) -> Result<TokenLayout> {
    let grid = config.frame_grid;
    if instruction_len == 0 || query_len == 0 {
        return Err(ModelError::Layout(format!(
            "segments must be non-empty (instruction {instruction_len}, query {query_len})"
        )));
    }
    if grid.frames == 0 || grid.tokens_per_frame() == 0 {
        return Err(ModelError::Layout(format!("empty frame grid {grid:?}")));
    }
    let per_frame = grid.tokens_per_frame();
    let instruction = Span::new(0, instruction_len);
    let frames = (0..grid.frames)
        .map(|k| {
            let s = instruction_len + k * per_frame;
            Span::new(s, s + per_frame)
        })
        .collect::<Vec<_>>();
    let q_start = instruction_len + grid.frames * per_frame;
    let query = Span::new(q_start, q_start + query_len);
    Ok(TokenLayout {
        instruction,
        frames,
        query,
        total_len: query.end,
        grid,
    })
}

impl TokenLayout {
    /// All visual tokens.
    pub fn video(&self) -> Span {
        Span::new(self.frames[0].start, self.frames[self.frames.len() - 1].end)
    }

    pub fn last_index(&self) -> usize {
        self.total_len - 1
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn segment(&self, s: Segment) -> Span {
        match s {
            Segment::Instruction => self.instruction,
            Segment::Video => self.video(),
            Segment::Query => self.query,
        }
    }

    pub fn segment_of(&self, i: usize) -> Segment {
        if self.instruction.contains(i) {
            Segment::Instruction
        } else if self.video().contains(i) {
            Segment::Video
        } else {
            Segment::Query
        }
    }

    pub fn frame_of(&self, i: usize) -> Option<usize> {
        let v = self.video();
        v.contains(i).then(|| (i - v.start) / self.grid.tokens_per_frame())
    }

    /// `(frame, row, col)` of a visual token.
    pub fn cell_of(&self, i: usize) -> Option<(usize, usize, usize)> {
        let k = self.frame_of(i)?;
        let off = i - self.frames[k].start;
        Some((k, off / self.grid.width, off % self.grid.width))
    }

    pub fn index_of(&self, frame: usize, row: usize, col: usize) -> usize {
        self.frames[frame].start + row * self.grid.width + col
    }

    /// Checks the partition invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Layout(m.to_string()));
        if self.instruction.start != 0 || self.instruction.is_empty() {
            return fail("instruction must start at 0 and be non-empty");
        }
        let mut cursor = self.instruction.end;
        let per = self.grid.tokens_per_frame();
        for f in &self.frames {
            if f.start != cursor || f.len() != per {
                return fail("frames must be contiguous and of equal length H*W");
            }
            cursor = f.end;
        }
        if self.frames.is_empty() || self.query.start != cursor || self.query.is_empty() {
            return fail("query must follow the frames and be non-empty");
        }
        if self.query.end != self.total_len {
            return fail("ranges must cover the whole sequence");
        }
        Ok(())
    }
}

/// Position coordinates of one token. `t`, `h`, `w` feed the multi-axis
/// rotary encoding; `flat` feeds the single-axis one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub t: u32,
    pub h: u32,
    pub w: u32,
    pub flat: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionIds {
    pub coords: Vec<Coord>,
}

impl PositionIds {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScheme {
    Default,
    ReversedTemporal,
    Shuffled { segment: Segment, seed: u64 },
}

/// Default ids: text tokens carry `t = h = w = flat` offsets; frame `k` of the
/// video carries `t = base + k` with `(h, w) = base + (row, col)`, and the
/// query resumes after the largest video id. `flat` is always the sequence
/// index.
pub fn assign_position_ids(layout: &TokenLayout, scheme: PositionScheme) -> PositionIds {
    let base = layout.instruction.len() as u32;
    let g = layout.grid;
    let mut coords = Vec::with_capacity(layout.total_len);
    for i in layout.instruction.iter() {
        let p = i as u32;
        coords.push(Coord {
            t: p,
            h: p,
            w: p,
            flat: p,
        });
    }
    for k in 0..g.frames {
        for r in 0..g.height {
            for c in 0..g.width {
                coords.push(Coord {
                    t: base + k as u32,
                    h: base + r as u32,
                    w: base + c as u32,
                    flat: coords.len() as u32,
                });
            }
        }
    }
    let q_base = base + g.frames.max(g.height).max(g.width) as u32;
    for (j, i) in layout.query.iter().enumerate() {
        let p = q_base + j as u32;
        coords.push(Coord {
            t: p,
            h: p,
            w: p,
            flat: i as u32,
        });
    }
    let ids = PositionIds { coords };
    match scheme {
        PositionScheme::Default => ids,
        PositionScheme::ReversedTemporal => ids.reversed_temporal(layout),
        PositionScheme::Shuffled { segment, seed } => ids.shuffled(layout, segment, seed),
    }
}

impl PositionIds {
    /// Copy with the temporal coordinates of the frames mirrored.
    pub fn reversed_temporal(&self, layout: &TokenLayout) -> PositionIds {
        let mut out = self.clone();
        reverse_temporal(&mut out, layout);
        out
    }

    /// Copy with the coordinates inside `segment` permuted by a seeded shuffle.
    pub fn shuffled(&self, layout: &TokenLayout, segment: Segment, seed: u64) -> PositionIds {
        let mut out = self.clone();
        let span = layout.segment(segment);
        Rng::new(seed).shuffle(&mut out.coords[span.start..span.end]);
        out
    }
}

/// Frame `k` takes the temporal coordinates of frame `T-1-k`; spatial
/// coordinates and text tokens are untouched. An involution.
pub(crate) fn reverse_temporal(ids: &mut PositionIds, layout: &TokenLayout) {
    let n = layout.n_frames();
    let per = layout.grid.tokens_per_frame();
    for k in 0..n / 2 {
        let (a, b) = (layout.frames[k].start, layout.frames[n - 1 - k].start);
        for off in 0..per {
            let (x, y) = (ids.coords[a + off], ids.coords[b + off]);
            ids.coords[a + off].t = y.t;
            ids.coords[a + off].flat = y.flat;
            ids.coords[b + off].t = x.t;
            ids.coords[b + off].flat = x.flat;
        }
    }
}
