//! `LTXT` dense matrix files.
//!
//! Layout (little-endian): magic `LTXT`, `u32` version (1), `u64` rows,
//! `u64` cols, then `rows * cols` `f32` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AnatomyError, Result};

pub const MAGIC: &[u8; 4] = b"LTXT";
pub const VERSION: u32 = 1;

/// A row-major `f32` matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(AnatomyError::validation(format!(
                "matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(AnatomyError::validation(format!(
                "expected {} values for {rows}x{cols}, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AnatomyError::validation(format!(
                "non-finite value at row {}, column {}",
                i / cols,
                i % cols
            )));
        }
        Ok(EmbeddingMatrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AnatomyError::validation("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies the selected rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            if r >= self.rows {
                return Err(AnatomyError::invalid(format!("row {r} out of range")));
            }
            values.extend_from_slice(self.row(r));
        }
        Self::new(rows.len(), self.cols, values)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 24];
        r.read_exact(&mut header)
            .map_err(|_| AnatomyError::Format("truncated LTXT header".into()))?;
        if &header[..4] != MAGIC {
            return Err(AnatomyError::Format(format!(
                "bad magic {:?}, expected \"LTXT\"",
                String::from_utf8_lossy(&header[..4])
            )));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(AnatomyError::Format(format!("unsupported LTXT version {version}")));
        }
        let rows = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| AnatomyError::Format("LTXT dimensions overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n {
            return Err(AnatomyError::Format(format!(
                "LTXT payload has {} bytes, header declares {rows}x{cols} ({n} bytes)",
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, cols, values)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Vec::new();
        EmbeddingMatrix::new(1, 1, vec![1.0]).unwrap().write_to(&mut bytes).unwrap();
        bytes[0] = b'X';
        assert!(matches!(EmbeddingMatrix::read_from(&bytes[..]), Err(AnatomyError::Format(_))));
    }

    #[test]
    fn rejects_short_payload() {
        let mut bytes = Vec::new();
        EmbeddingMatrix::new(2, 2, vec![1.0; 4]).unwrap().write_to(&mut bytes).unwrap();
        bytes.pop();
        assert!(matches!(EmbeddingMatrix::read_from(&bytes[..]), Err(AnatomyError::Format(_))));
    }

    #[test]
    fn rejects_non_finite() {
        let err = EmbeddingMatrix::new(1, 2, vec![1.0, f32::NAN]).unwrap_err();
        assert!(err.to_string().contains("column 1"));
    }

    #[test]
    fn header_layout() {
        let mut bytes = Vec::new();
        EmbeddingMatrix::new(2, 3, vec![0.5; 6]).unwrap().write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"LTXT");
        assert_eq!(bytes.len(), 24 + 24);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
    }

    proptest! {
        #[test]
        fn round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let values: Vec<f32> = (0..rows * cols).map(|i| (i as f32 + seed as f32).sin()).collect();
            let m = EmbeddingMatrix::new(rows, cols, values).unwrap();
            let mut bytes = Vec::new();
            m.write_to(&mut bytes).unwrap();
            prop_assert_eq!(EmbeddingMatrix::read_from(&bytes[..]).unwrap(), m);
        }
    }
}
