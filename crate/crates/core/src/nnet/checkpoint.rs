//! Checkpoint format: `GKPM`, then little-endian `u32` version, K, M and
//! layer count, one `(out, in)` `u32` pair per layer, and finally every
//! parameter as little-endian `f64` (each layer's weights row-major, then its
//! biases).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use thiserror::Error;

use super::model::{layer_dims, Dense, ModelParams, N_LAYERS};
use crate::io::{write_atomic, FormatError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GKPM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad checkpoint: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * N_LAYERS + 8 * params.param_count());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    for v in [CHECKPOINT_VERSION, params.k() as u32, params.m() as u32, params.layers().len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in params.layers() {
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
    }
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams, CheckpointError> {
    let bad = |reason: String| CheckpointError::BadCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let truncated = || bad(format!("truncated at {} bytes", bytes.len()));
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).ok_or_else(truncated)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("magic {magic:?}")));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let k = r.u32().ok_or_else(truncated)? as usize;
    let m = r.u32().ok_or_else(truncated)? as usize;
    let n_layers = r.u32().ok_or_else(truncated)? as usize;
    if n_layers != N_LAYERS {
        return Err(bad(format!("{n_layers} layers, expected {N_LAYERS}")));
    }
    let expected = layer_dims(k, m);
    for (i, &(o, inp)) in expected.iter().enumerate() {
        let found = (r.u32().ok_or_else(truncated)? as usize, r.u32().ok_or_else(truncated)? as usize);
        if found != (o, inp) {
            return Err(bad(format!("layer {i} is {found:?}, expected ({o}, {inp}) for K={k}, M={m}")));
        }
    }
    let mut layers = Vec::with_capacity(N_LAYERS);
    for &(o, inp) in &expected {
        let w = (0..o * inp).map(|_| r.f64()).collect::<Option<Vec<_>>>().ok_or_else(truncated)?;
        let b = (0..o).map(|_| r.f64()).collect::<Option<Vec<_>>>().ok_or_else(truncated)?;
        layers.push(Dense {
            w: Array2::from_shape_vec((o, inp), w).expect("length matches"),
            b: Array1::from(b),
        });
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ModelParams::from_layers(k, m, layers).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &encode(params)).map_err(|e| match e {
        FormatError::Io { path, source } => CheckpointError::Io { path, source },
        other => unreachable!("write_atomic only fails with I/O errors: {other}"),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}
