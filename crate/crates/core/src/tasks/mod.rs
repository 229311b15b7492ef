//! Synthetic temporal tasks over symbol-grid videos, with a small trainer.
//!
//! Every sample is `[BOS, INSTR]`, then `T` frames of `H x W` symbols, then a
//! four-token query ending in `ASK`; the answer is a single token.

mod train;

pub use train::{evaluate, train, EvalReport, Optimizer, TrainConfig, TrainReport};

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interventions::{InterventionError, Probe};
use crate::model::{build_layout, FrameGrid, ModelConfig, ModelError, TokenLayout};
use crate::numerics::Rng;

/// Token ids shared by all tasks.
pub mod vocab {
    pub const BOS: u32 = 0;
    pub const INSTR: u32 = 1;
    pub const BG: u32 = 2;
    /// Static clutter symbols `CLUTTER..CLUTTER + N_CLUTTER`.
    pub const CLUTTER: u32 = 3;
    pub const N_CLUTTER: u32 = 6;
    /// Object symbols `OBJECT..OBJECT + N_OBJECTS`.
    pub const OBJECT: u32 = 9;
    pub const N_OBJECTS: u32 = 8;
    pub const Q_DIRECTION: u32 = 17;
    pub const Q_ORDER: u32 = 18;
    pub const Q_BEFORE: u32 = 19;
    pub const ASK: u32 = 20;
    pub const LEFT: u32 = 21;
    pub const RIGHT: u32 = 22;
    pub const UP: u32 = 23;
    pub const DOWN: u32 = 24;
    pub const YES: u32 = 25;
    pub const NO: u32 = 26;
    pub const MOVE: u32 = 27;
    /// Smallest vocabulary that covers every task token.
    pub const SIZE: usize = 28;
}

use vocab::*;

pub const INSTRUCTION: [u32; 2] = [BOS, INSTR];
pub const QUERY_LEN: usize = 4;
const CLUTTER_DENSITY: f64 = 0.25;
/// Extra objects per video that the query does not ask about.
const DISTRACTORS: usize = 1;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{kind} needs {needed}, grid is {grid:?}")]
    GridTooSmall {
        kind: TaskKind,
        needed: String,
        grid: FrameGrid,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("vocabulary of {found} is smaller than the {needed} task tokens")]
    VocabTooSmall { needed: usize, found: usize },
    #[error("sample grid {found:?} does not match model grid {expected:?}")]
    GridMismatch { expected: FrameGrid, found: FrameGrid },
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Direction,
    Order,
    YesNo,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Direction, TaskKind::Order, TaskKind::YesNo];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Direction => "direction",
            TaskKind::Order => "order",
            TaskKind::YesNo => "yes_no",
        }
    }

    /// Number of balanced answer classes.
    pub fn n_classes(self) -> usize {
        match self {
            TaskKind::Direction => 4,
            TaskKind::Order => N_OBJECTS as usize,
            TaskKind::YesNo => 2,
        }
    }

    /// Accuracy of a uniform guess among the answers the query allows.
    pub fn chance(self) -> f64 {
        match self {
            TaskKind::Direction => 0.25,
            TaskKind::Order | TaskKind::YesNo => 0.5,
        }
    }

    /// Checks that `grid` can host the task.
    pub fn check_grid(self, grid: FrameGrid) -> Result<()> {
        let (t, h, w) = (grid.frames, grid.height, grid.width);
        let fail = |needed: &str| {
            Err(TaskError::GridTooSmall {
                kind: self,
                needed: needed.to_string(),
                grid,
            })
        };
        match self {
            TaskKind::Direction if t < 2 || h < t || w < t => {
                fail("at least 2 frames and both grid sides at least the frame count")
            }
            TaskKind::Order if t < 3 || h * w < 3 => fail("at least 3 frames and 3 cells per frame"),
            TaskKind::YesNo if t < 2 => fail("at least 2 frames"),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub task: TaskKind,
    pub grid: FrameGrid,
    /// One row-major `H x W` grid per frame.
    pub frames: Vec<Vec<u32>>,
    pub instruction: Vec<u32>,
    pub query: Vec<u32>,
    pub answer: u32,
}

impl SyntheticSample {
    /// Instruction, frames and query as one sequence.
    pub fn tokens(&self) -> Vec<u32> {
        let mut v = self.instruction.clone();
        for f in &self.frames {
            v.extend_from_slice(f);
        }
        v.extend_from_slice(&self.query);
        v
    }

    pub fn layout(&self, config: &ModelConfig) -> Result<TokenLayout> {
        if config.frame_grid != self.grid {
            return Err(TaskError::GridMismatch {
                expected: config.frame_grid,
                found: self.grid,
            });
        }
        Ok(build_layout(config, self.instruction.len(), self.query.len())?)
    }

    /// Answer of the same question on the frame-reversed video, when the
    /// task defines one.
    pub fn flipped_answer(&self) -> Option<u32> {
        match self.task {
            TaskKind::Direction => Some(match self.answer {
                LEFT => RIGHT,
                RIGHT => LEFT,
                UP => DOWN,
                _ => UP,
            }),
            TaskKind::YesNo => Some(if self.answer == YES { NO } else { YES }),
            TaskKind::Order => None,
        }
    }

    /// The same sample with frames in reverse order and, when defined, the
    /// answer updated to match.
    pub fn reversed(&self) -> SyntheticSample {
        let mut s = self.clone();
        s.frames.reverse();
        if let Some(a) = self.flipped_answer() {
            s.answer = a;
        }
        s
    }

    pub fn to_probe(&self, config: &ModelConfig) -> Result<Probe> {
        Ok(Probe {
            tokens: self.tokens(),
            layout: self.layout(config)?,
            answer: self.answer,
        })
    }

    fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tokens() {
            for b in t.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        }
        h ^= u64::from(self.answer);
        h.wrapping_mul(PRIME)
    }

    /// Which side of the fixed train/eval partition the sample belongs to.
    pub fn split(&self) -> Split {
        if self.fingerprint() >> 61 == 0 {
            Split::Eval
        } else {
            Split::Train
        }
    }
}

/// Content-hash partition of the sample space: about one sample in eight
/// belongs to `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

struct Canvas {
    grid: FrameGrid,
    frames: Vec<Vec<u32>>,
}

impl Canvas {
    fn new(grid: FrameGrid, rng: &mut Rng, reserved: &[(usize, usize)]) -> Self {
        let mut base = vec![BG; grid.tokens_per_frame()];
        for r in 0..grid.height {
            for c in 0..grid.width {
                if !reserved.contains(&(r, c)) && rng.uniform() < CLUTTER_DENSITY {
                    base[r * grid.width + c] = CLUTTER + rng.below(N_CLUTTER as usize) as u32;
                }
            }
        }
        Self {
            grid,
            frames: vec![base; grid.frames],
        }
    }

    fn put(&mut self, frame: usize, (r, c): (usize, usize), sym: u32) {
        self.frames[frame][r * self.grid.width + c] = sym;
    }
}

/// `n` distinct object symbols in random order, led by `first` when given.
fn pick_objects(rng: &mut Rng, n: usize, first: Option<u32>) -> Vec<u32> {
    let mut all: Vec<u32> = (OBJECT..OBJECT + N_OBJECTS).filter(|&o| Some(o) != first).collect();
    rng.shuffle(&mut all);
    first.into_iter().chain(all).take(n).collect()
}

/// `n` distinct values from `lo..hi` in random order.
fn pick_distinct(rng: &mut Rng, lo: usize, hi: usize, n: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (lo..hi).collect();
    rng.shuffle(&mut all);
    all.truncate(n);
    all
}

fn cell(grid: FrameGrid, i: usize) -> (usize, usize) {
    (i / grid.width, i % grid.width)
}

/// Cells of an object crossing `line` one cell per frame, moving towards
/// `answer`.
fn straight_path(grid: FrameGrid, answer: u32, line: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let t = grid.frames;
    let forward = matches!(answer, RIGHT | DOWN);
    let along = |start: usize, k: usize| if forward { start + k } else { start + t - 1 - k };
    match answer {
        LEFT | RIGHT => {
            let c0 = rng.below(grid.width - t + 1);
            (0..t).map(|k| (line, along(c0, k))).collect()
        }
        _ => {
            let r0 = rng.below(grid.height - t + 1);
            (0..t).map(|k| (along(r0, k), line)).collect()
        }
    }
}

fn sample_direction(grid: FrameGrid, class: usize, rng: &mut Rng) -> SyntheticSample {
    let answer = [LEFT, RIGHT, UP, DOWN][class];
    let objs = pick_objects(rng, 1, None);
    let horizontal = matches!(answer, LEFT | RIGHT);
    let lines = pick_distinct(rng, 0, if horizontal { grid.height } else { grid.width }, objs.len());
    let mut paths = vec![straight_path(grid, answer, lines[0], rng)];
    for &line in &lines[1..] {
        let dir = if horizontal {
            [LEFT, RIGHT][rng.below(2)]
        } else {
            [UP, DOWN][rng.below(2)]
        };
        paths.push(straight_path(grid, dir, line, rng));
    }
    let reserved: Vec<_> = paths.concat();
    let mut canvas = Canvas::new(grid, rng, &reserved);
    for (path, &obj) in paths.iter().zip(&objs) {
        for (k, &c) in path.iter().enumerate() {
            canvas.put(k, c, obj);
        }
    }
    SyntheticSample {
        task: TaskKind::Direction,
        grid,
        frames: canvas.frames,
        instruction: INSTRUCTION.to_vec(),
        query: vec![Q_DIRECTION, objs[0], MOVE, ASK],
        answer,
    }
}

fn sample_order(grid: FrameGrid, class: usize, rng: &mut Rng) -> SyntheticSample {
    let n = (2 + DISTRACTORS).min(grid.frames - 1);
    let objs = pick_objects(rng, n, Some(OBJECT + class as u32));
    let mut onsets = pick_distinct(rng, 1, grid.frames, n);
    if onsets[0] > onsets[1] {
        onsets.swap(0, 1);
    }
    let cells: Vec<_> = pick_distinct(rng, 0, grid.tokens_per_frame(), n)
        .into_iter()
        .map(|i| cell(grid, i))
        .collect();
    let mut canvas = Canvas::new(grid, rng, &cells);
    for ((&obj, &onset), &c) in objs.iter().zip(&onsets).zip(&cells) {
        for k in onset..grid.frames {
            canvas.put(k, c, obj);
        }
    }
    let (early, late) = (objs[0], objs[1]);
    let query = if rng.below(2) == 0 {
        vec![Q_ORDER, early, late, ASK]
    } else {
        vec![Q_ORDER, late, early, ASK]
    };
    SyntheticSample {
        task: TaskKind::Order,
        grid,
        frames: canvas.frames,
        instruction: INSTRUCTION.to_vec(),
        query,
        answer: early,
    }
}

fn sample_yes_no(grid: FrameGrid, class: usize, rng: &mut Rng) -> SyntheticSample {
    let answer = [YES, NO][class];
    let objs = pick_objects(rng, 2, None);
    let mut when = pick_distinct(rng, 0, grid.frames, 2);
    if (when[0] < when[1]) != (answer == YES) {
        when.swap(0, 1);
    }
    let cells: Vec<_> = (0..2)
        .map(|_| (rng.below(grid.height), rng.below(grid.width)))
        .collect();
    let mut canvas = Canvas::new(grid, rng, &cells);
    for ((&obj, &k), &c) in objs.iter().zip(&when).zip(&cells) {
        canvas.put(k, c, obj);
    }
    SyntheticSample {
        task: TaskKind::YesNo,
        grid,
        frames: canvas.frames,
        instruction: INSTRUCTION.to_vec(),
        query: vec![Q_BEFORE, objs[0], objs[1], ASK],
        answer,
    }
}

/// `n` samples of `kind` from `split`, with answer classes assigned round
/// robin so every class count is within one of `n / classes`.
pub fn generate_dataset(
    kind: TaskKind,
    grid: FrameGrid,
    n: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(TaskError::EmptyDataset);
    }
    kind.check_grid(grid)?;
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % kind.n_classes();
        let s = loop {
            let s = match kind {
                TaskKind::Direction => sample_direction(grid, class, &mut rng),
                TaskKind::Order => sample_order(grid, class, &mut rng),
                TaskKind::YesNo => sample_yes_no(grid, class, &mut rng),
            };
            if s.split() == split {
                break s;
            }
        };
        out.push(s);
    }
    Ok(out)
}

/// One JSON object per line.
pub fn write_jsonl(samples: &[SyntheticSample], mut w: impl Write) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<SyntheticSample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SyntheticSample = serde_json::from_str(&line).map_err(|e| TaskError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    const GRID: FrameGrid = FrameGrid {
        frames: 4,
        height: 4,
        width: 4,
    };

    fn find(frame: &[u32], sym: u32) -> Vec<(usize, usize)> {
        (0..frame.len())
            .filter(|&i| frame[i] == sym)
            .map(|i| (i / 4, i % 4))
            .collect()
    }

    #[test]
    fn direction_motion_matches_answer() {
        for s in generate_dataset(TaskKind::Direction, GRID, 200, 1, Split::Train).unwrap() {
            let obj = s.query[1];
            let pos: Vec<_> = s.frames.iter().map(|f| find(f, obj)).collect();
            assert!(pos.iter().all(|p| p.len() == 1));
            for k in 0..3 {
                let ((r0, c0), (r1, c1)) = (pos[k][0], pos[k + 1][0]);
                let step = (r1 as i64 - r0 as i64, c1 as i64 - c0 as i64);
                let expect = match s.answer {
                    RIGHT => (0, 1),
                    LEFT => (0, -1),
                    DOWN => (1, 0),
                    UP => (-1, 0),
                    a => panic!("answer {a}"),
                };
                assert_eq!(step, expect);
            }
        }
    }

    #[test]
    fn class_balance() {
        for kind in TaskKind::ALL {
            let data = generate_dataset(kind, GRID, 1000, 2, Split::Train).unwrap();
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for s in &data {
                *counts.entry(s.answer).or_default() += 1;
            }
            assert_eq!(counts.len(), kind.n_classes());
            let per = 1000 / kind.n_classes();
            assert!(counts.values().all(|&c| c.abs_diff(per) <= 1), "{kind}: {counts:?}");
        }
    }

    #[test]
    fn yes_no_follows_flash_order_and_flips() {
        for s in generate_dataset(TaskKind::YesNo, GRID, 200, 3, Split::Train).unwrap() {
            let when = |sym| s.frames.iter().position(|f| f.contains(&sym)).unwrap();
            let (a, b) = (s.query[1], s.query[2]);
            assert_eq!(s.answer == YES, when(a) < when(b));
            let r = s.reversed();
            let when_r = |sym| r.frames.iter().position(|f| f.contains(&sym)).unwrap();
            assert_eq!(r.answer == YES, when_r(a) < when_r(b));
            assert_ne!(r.answer, s.answer);
        }
    }

    #[test]
    fn order_answer_appears_first() {
        for s in generate_dataset(TaskKind::Order, GRID, 200, 4, Split::Train).unwrap() {
            let when = |sym| s.frames.iter().position(|f| f.contains(&sym)).unwrap();
            let (a, b) = (s.query[1], s.query[2]);
            assert!(s.answer == a || s.answer == b);
            let other = if s.answer == a { b } else { a };
            assert!(when(s.answer) < when(other));
            assert!(when(s.answer) >= 1);
            assert!(s.frames[3].contains(&a) && s.frames[3].contains(&b));
        }
    }

    #[test]
    fn deterministic_and_disjoint_splits() {
        let a = generate_dataset(TaskKind::Direction, GRID, 300, 5, Split::Train).unwrap();
        let b = generate_dataset(TaskKind::Direction, GRID, 300, 5, Split::Train).unwrap();
        assert_eq!(a, b);
        let e = generate_dataset(TaskKind::Direction, GRID, 300, 5, Split::Eval).unwrap();
        assert!(e.iter().all(|s| s.split() == Split::Eval));
        assert!(a.iter().all(|s| !e.contains(s)));
    }

    #[test]
    fn sequence_shape() {
        let cfg = ModelConfig::default();
        let s = &generate_dataset(TaskKind::Order, GRID, 1, 6, Split::Train).unwrap()[0];
        let l = s.layout(&cfg).unwrap();
        assert_eq!(s.tokens().len(), l.total_len);
        assert_eq!(l.total_len, 2 + 64 + QUERY_LEN);
        assert!(s.tokens().iter().all(|&t| (t as usize) < vocab::SIZE));
        assert_eq!(*s.tokens().last().unwrap(), ASK);
    }

    #[test]
    fn small_grids_are_rejected() {
        let g = FrameGrid {
            frames: 4,
            height: 3,
            width: 8,
        };
        assert!(matches!(
            generate_dataset(TaskKind::Direction, g, 4, 0, Split::Train),
            Err(TaskError::GridTooSmall { .. })
        ));
        assert!(generate_dataset(TaskKind::YesNo, g, 4, 0, Split::Train).is_ok());
        assert!(generate_dataset(TaskKind::YesNo, g, 0, 0, Split::Train).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let data = generate_dataset(TaskKind::YesNo, GRID, 20, 7, Split::Eval).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&data, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 20);
        let first: serde_json::Value = serde_json::from_slice(buf.split(|&b| b == b'\n').next().unwrap()).unwrap();
        assert_eq!(first["task"], "yes_no");
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), data);
        assert!(read_jsonl(&b"{not json}\n"[..]).is_err());
    }
}
