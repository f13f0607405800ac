//! Little-endian binary containers shared by environments (`RCM1`), cocycle
//! fields (`CCF1`) and corrector solutions (`COR1`).
//!
//! Common 48-byte header:
//!
//! | offset | type    | field                 |
//! |--------|---------|-----------------------|
//! | 0      | [u8; 4] | magic                 |
//! | 4      | u32     | version (= 1)         |
//! | 8      | u32     | d                     |
//! | 12     | u32     | L                     |
//! | 16     | f64     | a                     |
//! | 24     | f64     | b                     |
//! | 32     | u64     | seed                  |
//! | 40     | u8      | model id              |
//! | 41     | [u8; 7] | zero padding          |

use crate::lattice::{ShapeError, TorusShape};
use std::path::Path;
use thiserror::Error;

pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 48;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("file length {found} does not match expected {expected}")]
    Length { expected: usize, found: usize },
    #[error("invalid shape in header: {0}")]
    Shape(#[from] ShapeError),
    #[error("invalid header: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub magic: [u8; 4],
    pub shape: TorusShape,
    pub bounds: (f64, f64),
    pub seed: u64,
    pub model_id: u8,
}

impl Header {
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape.side() as u32).to_le_bytes());
        out.extend_from_slice(&self.bounds.0.to_le_bytes());
        out.extend_from_slice(&self.bounds.1.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(self.model_id);
        out.extend_from_slice(&[0u8; 7]);
    }

    pub fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<Self, FormatError> {
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Length { expected: HEADER_LEN, found: bytes.len() });
        }
        let mut r = Reader::new(bytes);
        let found: [u8; 4] = r.take(4).try_into().unwrap();
        if found != magic {
            return Err(FormatError::Magic { expected: magic, found });
        }
        let version = r.u32();
        if version != VERSION {
            return Err(FormatError::Version(version));
        }
        let dim = r.u32() as usize;
        let side = r.u32() as usize;
        let shape = TorusShape::new(dim, side)?;
        let a = r.f64();
        let b = r.f64();
        let seed = r.u64();
        let model_id = r.take(1)[0];
        if r.take(7).iter().any(|&p| p != 0) {
            return Err(FormatError::Invalid("nonzero padding".into()));
        }
        Ok(Self { magic, shape, bounds: (a, b), seed, model_id })
    }
}

/// Sequential little-endian reader; callers check lengths up front.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn at(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    pub(crate) fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    pub(crate) fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    pub(crate) fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }

    pub(crate) fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().unwrap())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub(crate) fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn check_len(bytes: &[u8], expected: usize) -> Result<(), FormatError> {
    if bytes.len() != expected {
        return Err(FormatError::Length { expected, found: bytes.len() });
    }
    Ok(())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    std::fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    Ok(std::fs::read(path)?)
}
