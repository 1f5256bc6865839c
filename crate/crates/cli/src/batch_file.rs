//! Binary batch files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CRZB" | version=1 | dtype=1 (f64) | rank | dims[rank]
//!        | payload: product(dims) f64 LE | label count | labels
//! ```

use croze_core::{Batch, Tensor};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CRZB";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u32 = 1;

/// Refuse payloads above this many elements (2 GiB of f64s).
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BatchFileError {
    #[error("bad magic bytes, not a batch file")]
    Magic,
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("unsupported dtype code {0}")]
    Dtype(u32),
    #[error("expected rank 4 (N, C, H, W), found {0}")]
    Rank(u32),
    #[error("dimension {index} is zero")]
    ZeroDim { index: usize },
    #[error("payload of {0} elements is too large")]
    TooLarge(u64),
    #[error("truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("label count {count} does not match batch size {n}")]
    LabelCount { count: u32, n: u32 },
    #[error("non-finite pixel at element {0}")]
    NonFinite(usize),
    #[error("{0} trailing bytes after labels")]
    Trailing(usize),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], BatchFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(BatchFileError::Truncated { offset: self.pos, what })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, BatchFileError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn encode_batch(batch: &Batch) -> Vec<u8> {
    let shape = batch.images().shape();
    let mut out = Vec::with_capacity(24 + 8 * batch.images().len() + 4 * (batch.len() + 1));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in batch.images().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    for &y in batch.labels() {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    out
}

pub fn decode_batch(bytes: &[u8]) -> Result<Batch, BatchFileError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic").map_err(|_| BatchFileError::Magic)? != MAGIC {
        return Err(BatchFileError::Magic);
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(BatchFileError::Version(version));
    }
    let dtype = c.u32("dtype")?;
    if dtype != DTYPE_F64 {
        return Err(BatchFileError::Dtype(dtype));
    }
    let rank = c.u32("rank")?;
    if rank != 4 {
        return Err(BatchFileError::Rank(rank));
    }
    let mut dims = Vec::with_capacity(4);
    let mut elements: u64 = 1;
    for index in 0..4 {
        let d = c.u32("dims")?;
        if d == 0 {
            return Err(BatchFileError::ZeroDim { index });
        }
        elements = elements.saturating_mul(u64::from(d));
        dims.push(d as usize);
    }
    if elements > MAX_ELEMENTS {
        return Err(BatchFileError::TooLarge(elements));
    }
    let raw = c.take(elements as usize * 8, "payload")?;
    let mut data = Vec::with_capacity(elements as usize);
    for (i, chunk) in raw.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(BatchFileError::NonFinite(i));
        }
        data.push(v);
    }
    let count = c.u32("label count")?;
    if count as usize != dims[0] {
        return Err(BatchFileError::LabelCount {
            count,
            n: dims[0] as u32,
        });
    }
    let mut labels = Vec::with_capacity(dims[0]);
    for _ in 0..count {
        labels.push(c.u32("labels")? as usize);
    }
    if c.pos != bytes.len() {
        return Err(BatchFileError::Trailing(bytes.len() - c.pos));
    }
    let images = Tensor::new(dims, data).expect("dims validated");
    Ok(Batch::new(images, labels).expect("label count validated"))
}
