//! Extended latent codes (18 style rows of 512 values) and their on-disk store.
//!
//! Store layout, little-endian throughout:
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 4     | magic `FALC`                  |
//! | 4     | format version (`u32`)        |
//! | 4     | rows (`u32`)                  |
//! | 4     | cols (`u32`)                  |
//! | 4·r·c | row-major `f32` payload       |

use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const LATENT_ROWS: usize = 18;
pub const LATENT_COLS: usize = 512;
pub const LATENT_LEN: usize = LATENT_ROWS * LATENT_COLS;

pub const STORE_MAGIC: [u8; 4] = *b"FALC";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// A code in the generator's extended latent space. Always 18×512 and finite.
#[derive(Clone, PartialEq)]
pub struct LatentCode {
    values: Vec<f32>,
}

impl std::fmt::Debug for LatentCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LatentCode({}x{}, fp={})", LATENT_ROWS, LATENT_COLS, &self.fingerprint()[..12])
    }
}

impl LatentCode {
    pub fn from_vec(values: Vec<f32>) -> Result<Self> {
        if values.len() != LATENT_LEN {
            return Err(Error::Validation(format!(
                "latent code must have {LATENT_LEN} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "latent code value at row {} col {} is not finite",
                i / LATENT_COLS,
                i % LATENT_COLS
            )));
        }
        Ok(Self { values })
    }

    /// Rounds a working-precision code to storage precision.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::from_vec(values.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; LATENT_LEN],
        }
    }

    /// Repeats one 512-vector across all 18 rows.
    pub fn broadcast(row: &[f32]) -> Result<Self> {
        if row.len() != LATENT_COLS {
            return Err(Error::Validation(format!(
                "broadcast row must have {LATENT_COLS} values, got {}",
                row.len()
            )));
        }
        Self::from_vec(row.repeat(LATENT_ROWS))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * LATENT_COLS..(r + 1) * LATENT_COLS]
    }

    pub fn rows(&self, rows: Range<usize>) -> &[f32] {
        &self.values[rows.start * LATENT_COLS..rows.end * LATENT_COLS]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn fingerprint(&self) -> String {
        crate::hashing::sha256_hex(&self.to_le_bytes())
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * LATENT_LEN);
        out.extend_from_slice(&STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(LATENT_ROWS as u32).to_le_bytes());
        out.extend_from_slice(&(LATENT_COLS as u32).to_le_bytes());
        out.extend_from_slice(&self.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Validation("latent store truncated header".into()));
        }
        if bytes[..4] != STORE_MAGIC {
            return Err(Error::Validation("latent store has wrong magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (version, rows, cols) = (word(4), word(8) as usize, word(12) as usize);
        if version != STORE_VERSION {
            return Err(Error::Validation(format!(
                "unsupported latent store version {version}"
            )));
        }
        if rows != LATENT_ROWS || cols != LATENT_COLS {
            return Err(Error::Validation(format!(
                "latent store shape {rows}x{cols}, expected {LATENT_ROWS}x{LATENT_COLS}"
            )));
        }
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != 4 * rows * cols {
            return Err(Error::Validation(format!(
                "latent store payload is {} bytes, expected {}",
                payload.len(),
                4 * rows * cols
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_vec(values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Partition of the 18 rows into frozen-low, trainable and frozen-high bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSplit {
    /// First trainable row.
    pub start: usize,
    /// One past the last trainable row.
    pub end: usize,
}

impl Default for LayerSplit {
    fn default() -> Self {
        Self { start: 3, end: 8 }
    }
}

impl LayerSplit {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end || end > LATENT_ROWS {
            return Err(Error::Validation(format!(
                "invalid layer split {start}..{end}: need start < end <= {LATENT_ROWS}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn trainable_rows(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn trainable_len(&self) -> usize {
        (self.end - self.start) * LATENT_COLS
    }

    /// Flat index range of the trainable block inside an 18×512 buffer.
    pub fn flat_range(&self) -> Range<usize> {
        self.start * LATENT_COLS..self.end * LATENT_COLS
    }

    pub fn is_frozen(&self, row: usize) -> bool {
        !(self.start..self.end).contains(&row)
    }
}
