//! Dense per-image embedding matrices and the `WDEM` binary format.
//!
//! Layout (all integers little-endian):
//!
//! | field     | type                         |
//! |-----------|------------------------------|
//! | magic     | `b"WDEM"`                    |
//! | version   | `u16` (= 1)                  |
//! | dim       | `u32`                        |
//! | rows      | `u64`                        |
//! | data      | `rows * dim` `f32`, row-major |
//! | row ids   | `rows` x (`u32` byte length, UTF-8 bytes) |

use std::io::{Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::binio;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"WDEM";
pub const EMBEDDING_VERSION: u16 = 1;

/// Tolerance on row norms for a matrix to count as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding matrix must have at least one row and one column (got {rows}x{dim})")]
    EmptyShape { rows: usize, dim: usize },
    #[error("data length {len} does not match {rows}x{dim}")]
    DataLength { len: usize, rows: usize, dim: usize },
    #[error("{ids} row ids for {rows} rows")]
    RowIds { ids: usize, rows: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {row} (`{id}`) has zero norm and cannot be normalized")]
    DegenerateRow { row: usize, id: String },
    #[error("bad embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `rows x dim` matrix of `f32` embeddings with one image id per row.
///
/// `normalized` is derived from the data on construction, so it is true iff
/// every row has unit norm within [`UNIT_NORM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f32>,
    rows: usize,
    dim: usize,
    row_ids: Vec<String>,
    normalized: bool,
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

impl EmbeddingMatrix {
    pub fn new(data: Vec<f32>, dim: usize, row_ids: Vec<String>) -> Result<Self, EmbeddingError> {
        let rows = data.len().checked_div(dim).unwrap_or(0);
        if rows == 0 || dim == 0 {
            return Err(EmbeddingError::EmptyShape { rows, dim });
        }
        if data.len() != rows * dim {
            return Err(EmbeddingError::DataLength { len: data.len(), rows, dim });
        }
        if row_ids.len() != rows {
            return Err(EmbeddingError::RowIds { ids: row_ids.len(), rows });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite { row: pos / dim, col: pos % dim });
        }
        let normalized = data.par_chunks(dim).all(|row| (row_norm(row) - 1.0).abs() <= UNIT_NORM_TOLERANCE);
        Ok(Self { data, rows, dim, row_ids, normalized })
    }

    /// Builds a matrix with ids `row0`, `row1`, ...
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(EmbeddingError::DataLength { len: bad.len(), rows: rows.len(), dim });
        }
        let ids = (0..rows.len()).map(|i| format!("row{i}")).collect();
        Self::new(rows.concat(), dim, ids)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn into_parts(self) -> (Vec<f32>, usize, Vec<String>) {
        (self.data, self.dim, self.row_ids)
    }

    /// Selects rows by position, preserving the given order.
    pub fn select(&self, positions: &[usize]) -> Result<Self, EmbeddingError> {
        let mut data = Vec::with_capacity(positions.len() * self.dim);
        let mut ids = Vec::with_capacity(positions.len());
        for &p in positions {
            data.extend_from_slice(self.row(p));
            ids.push(self.row_ids[p].clone());
        }
        Self::new(data, self.dim, ids)
    }

    /// Divides every row by its Euclidean norm.
    pub fn normalize(&self) -> Result<Self, EmbeddingError> {
        let mut data = self.data.clone();
        let dim = self.dim;
        let degenerate = data
            .par_chunks_mut(dim)
            .enumerate()
            .map(|(i, row)| {
                let norm = row_norm(row);
                if norm == 0.0 {
                    return Some(i);
                }
                for x in row.iter_mut() {
                    *x = (f64::from(*x) / norm) as f32;
                }
                None
            })
            .min_by_key(|r| r.unwrap_or(usize::MAX))
            .flatten();
        if let Some(row) = degenerate {
            return Err(EmbeddingError::DegenerateRow { row, id: self.row_ids[row].clone() });
        }
        Self::new(data, dim, self.row_ids.clone())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EmbeddingError> {
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
        w.write_all(&binio::u32_len(self.dim)?.to_le_bytes())?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        binio::write_f32s(&mut w, &self.data)?;
        for id in &self.row_ids {
            binio::write_str(&mut w, id)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, EmbeddingError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != EMBEDDING_MAGIC {
            return Err(EmbeddingError::Format(format!("bad magic {magic:?}")));
        }
        let version = binio::read_u16(&mut r)?;
        if version != EMBEDDING_VERSION {
            return Err(EmbeddingError::Format(format!("unsupported version {version}")));
        }
        let dim = binio::read_u32(&mut r)? as usize;
        let rows = usize::try_from(binio::read_u64(&mut r)?)
            .map_err(|_| EmbeddingError::Format("row count overflows".into()))?;
        let len = rows.checked_mul(dim).ok_or_else(|| EmbeddingError::Format("matrix size overflows".into()))?;
        let data = binio::read_f32s(&mut r, len)?;
        let mut ids = Vec::with_capacity(rows.min(1 << 20));
        for _ in 0..rows {
            ids.push(binio::read_str(&mut r).map_err(|e| EmbeddingError::Format(e.to_string()))?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(EmbeddingError::Format("trailing bytes after row ids".into()));
        }
        Self::new(data, dim, ids)
    }
}
