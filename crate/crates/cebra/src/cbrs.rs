//! The `cbrs` session container.
//!
//! Little-endian layout: a 64-byte header (magic `CBRS`, `u32` version 1,
//! `u64 T`, `u32 n`, `u32 m`, `u8 has_discrete`, three reserved bytes, `u32 K`,
//! zero padding), then the `T x n` signal as `f32` row-major, the `T x m`
//! continuous context as `f32`, and `T` `i32` class labels when present.
//! Values are widened to `f64` on load.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use cebra_core::{Matrix, Session};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CBRS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

/// Size in bytes of the encoding of a `T x n` session with `m` context columns.
pub fn encoded_len(t: usize, n: usize, m: usize, has_discrete: bool) -> usize {
    HEADER_LEN + 4 * (t * n + t * m + if has_discrete { t } else { 0 })
}

pub fn encode(session: &Session) -> Vec<u8> {
    let t = session.len();
    let n = session.signal_dim();
    let m = session.context_dim();
    let discrete = session.discrete();
    let mut out = Vec::with_capacity(encoded_len(t, n, m, discrete.is_some()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u64).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.push(u8::from(discrete.is_some()));
    out.extend_from_slice(&[0; 3]);
    out.extend_from_slice(&session.num_classes().to_le_bytes());
    out.resize(HEADER_LEN, 0);
    for v in session.signal().as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(c) = session.continuous() {
        for v in c.as_slice() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(k) = discrete {
        for &v in k {
            out.extend_from_slice(&(v as i32).to_le_bytes());
        }
    }
    out
}

/// Parses a container; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Session> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("missing CBRS magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let t = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let n = u32_at(16) as usize;
    let m = u32_at(20) as usize;
    let has_discrete = match bytes[24] {
        0 => false,
        1 => true,
        v => return Err(bad(format!("has_discrete flag is {v}, expected 0 or 1"))),
    };
    let k = u32_at(28);
    if bytes[25..28].iter().chain(&bytes[32..HEADER_LEN]).any(|&b| b != 0) {
        return Err(bad("nonzero reserved header bytes".into()));
    }
    let t = usize::try_from(t).map_err(|_| bad(format!("T = {t} does not fit in memory")))?;
    let expected = t
        .checked_mul(n + m + usize::from(has_discrete))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| bad("header dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "file has {} bytes, header (T={t}, n={n}, m={m}, discrete={has_discrete}) implies {expected}",
            bytes.len()
        )));
    }
    let mut words = bytes[HEADER_LEN..].chunks_exact(4).map(|w| <[u8; 4]>::try_from(w).unwrap());
    let mut floats = |count: usize| -> Vec<f64> {
        words
            .by_ref()
            .take(count)
            .map(|w| f64::from(f32::from_le_bytes(w)))
            .collect()
    };
    let signal = Matrix::from_vec(t, n, floats(t * n))?;
    let continuous = if m > 0 {
        Some(Matrix::from_vec(t, m, floats(t * m))?)
    } else {
        None
    };
    let discrete = if has_discrete {
        let labels = words
            .map(|w| i32::from_le_bytes(w))
            .enumerate()
            .map(|(row, v)| u32::try_from(v).map_err(|_| bad(format!("negative class label {v} in row {row}"))))
            .collect::<Result<Vec<u32>>>()?;
        Some(labels)
    } else {
        None
    };
    Session::with_num_classes(signal, continuous, discrete, k).map_err(|e| bad(e.to_string()))
}

pub fn write_session(session: &Session, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(session))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_session(path: &Path) -> Result<Session> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// A bare matrix (embedding, latent) stored as a context-free session.
pub fn write_matrix(m: &Matrix, path: &Path) -> Result<()> {
    write_session(&Session::new(m.clone(), None, None)?, path)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    Ok(read_session(path)?.signal().clone())
}
