//! Byte layouts of the state values backing DDOs.
//!
//! A dense matrix is stored column-major as `f64`s so a column range is one
//! contiguous byte range. A sparse matrix is stored in compressed-sparse-column
//! form with 16-byte entries, padded so that no column straddles a chunk
//! boundary unless it is larger than a chunk (in which case it starts on one).

use std::ops::Range;

use crate::codec::{bytes_to_u64s, u64s_to_bytes};

pub const DEFAULT_CHUNK_SIZE: usize = 4096;

/// Indices of the chunks covering `[offset, offset + len)`.
pub fn chunk_span(offset: usize, len: usize, chunk_size: usize) -> Range<usize> {
    if len == 0 {
        return 0..0;
    }
    let first = offset / chunk_size;
    let last = (offset + len - 1) / chunk_size;
    first..last + 1
}

/// Byte length of chunk `index` in a value of `value_len` bytes.
pub fn chunk_len(index: usize, chunk_size: usize, value_len: usize) -> usize {
    let start = index * chunk_size;
    if start >= value_len {
        0
    } else {
        chunk_size.min(value_len - start)
    }
}

pub fn chunk_count(value_len: usize, chunk_size: usize) -> usize {
    value_len.div_ceil(chunk_size)
}

pub fn meta_key(prefix: &str) -> String {
    format!("{prefix}.meta")
}

pub fn colptr_key(prefix: &str) -> String {
    format!("{prefix}.colptr")
}

pub fn entries_key(prefix: &str) -> String {
    format!("{prefix}.entries")
}

/// Column-major dense `f64` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayout {
    pub rows: usize,
    pub cols: usize,
}

impl DenseLayout {
    pub fn value_len(&self) -> usize {
        self.rows * self.cols * 8
    }

    pub fn column_bytes(&self, cols: Range<usize>) -> Range<usize> {
        let stride = self.rows * 8;
        cols.start * stride..cols.end * stride
    }

    pub fn encode_meta(&self) -> Vec<u8> {
        u64s_to_bytes(&[self.rows as u64, self.cols as u64])
    }

    pub fn decode_meta(bytes: &[u8]) -> Option<Self> {
        match bytes_to_u64s(bytes).as_slice() {
            [rows, cols, ..] => Some(DenseLayout {
                rows: *rows as usize,
                cols: *cols as usize,
            }),
            _ => None,
        }
    }

    /// Encodes `columns` (each of `rows` values) column-major.
    pub fn encode(columns: &[Vec<f64>]) -> (DenseLayout, Vec<u8>) {
        let rows = columns.first().map_or(0, Vec::len);
        let mut bytes = Vec::with_capacity(rows * columns.len() * 8);
        for col in columns {
            assert_eq!(col.len(), rows, "ragged dense matrix");
            for v in col {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        (
            DenseLayout {
                rows,
                cols: columns.len(),
            },
            bytes,
        )
    }
}

pub const SPARSE_ENTRY_SIZE: usize = 16;
/// Row marker of a padding entry.
pub const PAD_ROW: u32 = u32::MAX;
/// Bytes per column in the colptr value: `(start, end)` entry indices.
pub const COLPTR_STRIDE: usize = 16;

/// Chunk-aligned compressed-sparse-column matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseLayout {
    pub rows: usize,
    pub cols: usize,
    pub chunk_size: usize,
    /// Total entries including padding.
    pub entry_slots: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEncoded {
    pub layout: SparseLayout,
    pub meta: Vec<u8>,
    pub colptr: Vec<u8>,
    pub entries: Vec<u8>,
}

impl SparseLayout {
    pub fn encode_meta(&self) -> Vec<u8> {
        u64s_to_bytes(&[
            self.rows as u64,
            self.cols as u64,
            self.chunk_size as u64,
            self.entry_slots as u64,
        ])
    }

    pub fn decode_meta(bytes: &[u8]) -> Option<Self> {
        match bytes_to_u64s(bytes).as_slice() {
            [rows, cols, chunk, slots, ..] => Some(SparseLayout {
                rows: *rows as usize,
                cols: *cols as usize,
                chunk_size: *chunk as usize,
                entry_slots: *slots as usize,
            }),
            _ => None,
        }
    }

    pub fn colptr_len(&self) -> usize {
        self.cols * COLPTR_STRIDE
    }

    pub fn entries_len(&self) -> usize {
        self.entry_slots * SPARSE_ENTRY_SIZE
    }

    pub fn colptr_bytes(&self, cols: Range<usize>) -> Range<usize> {
        cols.start * COLPTR_STRIDE..cols.end * COLPTR_STRIDE
    }

    /// Encodes columns of `(row, value)` pairs.
    pub fn encode(rows: usize, columns: &[Vec<(u32, f64)>], chunk_size: usize) -> SparseEncoded {
        assert!(chunk_size >= SPARSE_ENTRY_SIZE && chunk_size % SPARSE_ENTRY_SIZE == 0);
        let per_chunk = chunk_size / SPARSE_ENTRY_SIZE;
        let mut entries: Vec<(u32, f64)> = Vec::new();
        let mut colptr = Vec::with_capacity(columns.len() * 2);
        for col in columns {
            let pos = entries.len();
            let in_chunk = pos % per_chunk;
            let needs_pad =
                !col.is_empty() && in_chunk != 0 && (col.len() > per_chunk || in_chunk + col.len() > per_chunk);
            if needs_pad {
                let pad = per_chunk - in_chunk;
                entries.extend(std::iter::repeat_n((PAD_ROW, 0.0), pad));
            }
            let start = entries.len();
            for &(r, v) in col {
                assert!((r as usize) < rows, "row index out of range");
                entries.push((r, v));
            }
            colptr.push(start as u64);
            colptr.push(entries.len() as u64);
        }
        let mut entry_bytes = Vec::with_capacity(entries.len() * SPARSE_ENTRY_SIZE);
        for (r, v) in &entries {
            entry_bytes.extend_from_slice(&r.to_le_bytes());
            entry_bytes.extend_from_slice(&0u32.to_le_bytes());
            entry_bytes.extend_from_slice(&v.to_le_bytes());
        }
        let layout = SparseLayout {
            rows,
            cols: columns.len(),
            chunk_size,
            entry_slots: entries.len(),
        };
        SparseEncoded {
            meta: layout.encode_meta(),
            colptr: u64s_to_bytes(&colptr),
            entries: entry_bytes,
            layout,
        }
    }
}

pub fn decode_entry(bytes: &[u8]) -> (u32, f64) {
    let row = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let val = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
    (row, val)
}

/// Decodes the `(start, end)` entry bounds at `col` from a colptr slice that
/// begins at column `first_col`.
pub fn colptr_at(colptr: &[u8], first_col: usize, col: usize) -> (usize, usize) {
    let off = (col - first_col) * COLPTR_STRIDE;
    let start = u64::from_le_bytes(colptr[off..off + 8].try_into().unwrap());
    let end = u64::from_le_bytes(colptr[off + 8..off + 16].try_into().unwrap());
    (start as usize, end as usize)
}
