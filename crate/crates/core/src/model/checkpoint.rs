//! Binary checkpoint format.
//!
//! Layout (all integers little-endian `u32`):
//! magic `TPLAB01`, the ten configuration fields, a block count, then one
//! block per tensor in declared order: name length, UTF-8 name, rows, cols
//! and `rows * cols` little-endian `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use super::{FrameGrid, Model, ModelConfig, ModelError, PeMode, Result, Weights};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"TPLAB01";

fn put(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> ModelError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ModelError::Checkpoint("truncated file".into())
    } else {
        ModelError::Io(e)
    }
}

pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<()> {
    let c = &model.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        c.n_layers,
        c.d_model,
        c.n_heads,
        c.d_head,
        c.ffn_mult,
        c.pe_mode.code() as usize,
        c.vocab_size,
        c.frame_grid.frames,
        c.frame_grid.height,
        c.frame_grid.width,
    ] {
        put(w, v)?;
    }
    let index = model.weights.index();
    put(w, index.entries().len())?;
    for e in index.entries() {
        let name = e.kind.name();
        put(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put(w, e.rows)?;
        put(w, e.cols)?;
        let mut buf = Vec::with_capacity(e.len() * 4);
        for &v in model.weights.slice(e.kind) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a checkpoint; when `expected` is given the stored configuration
/// must equal it.
pub fn read_checkpoint(r: &mut impl Read, expected: Option<&ModelConfig>) -> Result<Model> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut f = [0usize; 10];
    for v in &mut f {
        *v = get(r)? as usize;
    }
    let pe_mode = PeMode::from_code(f[5] as u32)
        .ok_or_else(|| ModelError::Checkpoint(format!("unknown pe mode code {}", f[5])))?;
    let config = ModelConfig {
        n_layers: f[0],
        d_model: f[1],
        n_heads: f[2],
        d_head: f[3],
        ffn_mult: f[4],
        pe_mode,
        vocab_size: f[6],
        frame_grid: FrameGrid {
            frames: f[7],
            height: f[8],
            width: f[9],
        },
    };
    if let Some(exp) = expected {
        if *exp != config {
            return Err(ModelError::ConfigMismatch {
                expected: Box::new(*exp),
                found: Box::new(config),
            });
        }
    }
    config.validate()?;
    let mut weights = Weights::zeros(&config);
    let index = weights.index().clone();
    let count = get(r)? as usize;
    if count != index.entries().len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, found {count}",
            index.entries().len()
        )));
    }
    for e in index.entries() {
        let len = get(r)? as usize;
        if len > 256 {
            return Err(ModelError::Checkpoint(format!("tensor name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let want = e.kind.name();
        if name != want.as_bytes() {
            return Err(ModelError::Checkpoint(format!(
                "expected tensor {want}, found {}",
                String::from_utf8_lossy(&name)
            )));
        }
        let (rows, cols) = (get(r)? as usize, get(r)? as usize);
        if (rows, cols) != (e.rows, e.cols) {
            return Err(ModelError::Checkpoint(format!(
                "{want}: expected {}x{}, found {rows}x{cols}",
                e.rows, e.cols
            )));
        }
        let mut buf = vec![0u8; e.len() * 4];
        r.read_exact(&mut buf).map_err(truncated)?;
        for (dst, chunk) in weights.slice_mut(e.kind).iter_mut().zip(buf.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(Model { config, weights })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Model> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r, expected)
}
