//! Distributed data objects over the state API.
//!
//! All DDOs read and write the node-local replica through a mapped shared
//! region. Reads pull lazily: only the chunks covering the accessed range are
//! replicated. [`AsyncVector`] writes stay local until [`AsyncVector::push`].

use std::ops::Range;

use crate::layout::{self, DenseLayout, SparseLayout, COLPTR_STRIDE, PAD_ROW, SPARSE_ENTRY_SIZE};
use crate::state;
use crate::Errno;

/// A shared `f64` vector with explicit, asynchronous pushes.
pub struct AsyncVector {
    key: String,
    data: &'static mut [u8],
    len: usize,
}

impl AsyncVector {
    /// Maps `key` holding `len` elements, pulling it on first use on this node.
    pub fn new(key: &str, len: usize) -> Result<Self, Errno> {
        let data = state::get_state(key, len * 8, 0)?;
        Ok(AsyncVector {
            key: key.to_string(),
            data,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        assert!(i < self.len, "AsyncVector index {i} out of range");
        f64::from_le_bytes(self.data[i * 8..i * 8 + 8].try_into().unwrap())
    }

    pub fn set(&mut self, i: usize, v: f64) {
        assert!(i < self.len, "AsyncVector index {i} out of range");
        self.data[i * 8..i * 8 + 8].copy_from_slice(&v.to_le_bytes());
    }

    /// Unsynchronised in-place add; co-located Faaslets observe it at once.
    pub fn add(&mut self, i: usize, delta: f64) {
        let v = self.get(i);
        self.set(i, v + delta);
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn push(&self) -> Result<(), Errno> {
        state::push_state(&self.key)
    }

    pub fn pull(&self) -> Result<(), Errno> {
        state::pull_state(&self.key)
    }
}

/// Read-only column-major dense matrix.
pub struct MatrixReadOnly {
    key: String,
    layout: DenseLayout,
}

impl MatrixReadOnly {
    pub fn new(key: &str) -> Result<Self, Errno> {
        let meta = state::get_state(&layout::meta_key(key), 16, 0)?;
        let layout = DenseLayout::decode_meta(meta).ok_or(Errno::Invalid)?;
        Ok(MatrixReadOnly {
            key: key.to_string(),
            layout,
        })
    }

    pub fn rows(&self) -> usize {
        self.layout.rows
    }

    pub fn cols(&self) -> usize {
        self.layout.cols
    }

    /// Column values for `cols`, pulling only the chunks that cover them.
    pub fn columns(&self, cols: Range<usize>) -> Result<DenseColumns, Errno> {
        if cols.end > self.layout.cols || cols.start > cols.end {
            return Err(Errno::Range);
        }
        let bytes = self.layout.column_bytes(cols.clone());
        let data: &'static [u8] = if bytes.is_empty() {
            &[]
        } else {
            state::get_state_offset(&self.key, bytes.start, bytes.len(), 0)?
        };
        Ok(DenseColumns {
            first: cols.start,
            rows: self.layout.rows,
            data,
        })
    }

    pub fn column(&self, col: usize) -> Result<Vec<f64>, Errno> {
        let view = self.columns(col..col + 1)?;
        Ok(view.column(col).collect())
    }
}

pub struct DenseColumns {
    first: usize,
    rows: usize,
    data: &'static [u8],
}

impl DenseColumns {
    pub fn column(&self, col: usize) -> impl Iterator<Item = f64> + '_ {
        let base = (col - self.first) * self.rows * 8;
        (0..self.rows).map(move |r| {
            let o = base + r * 8;
            f64::from_le_bytes(self.data[o..o + 8].try_into().unwrap())
        })
    }
}

/// Read-only chunk-aligned compressed-sparse-column matrix.
pub struct SparseMatrixReadOnly {
    prefix: String,
    layout: SparseLayout,
}

impl SparseMatrixReadOnly {
    pub fn new(prefix: &str) -> Result<Self, Errno> {
        let meta = state::get_state(&layout::meta_key(prefix), 32, 0)?;
        let layout = SparseLayout::decode_meta(meta).ok_or(Errno::Invalid)?;
        Ok(SparseMatrixReadOnly {
            prefix: prefix.to_string(),
            layout,
        })
    }

    pub fn rows(&self) -> usize {
        self.layout.rows
    }

    pub fn cols(&self) -> usize {
        self.layout.cols
    }

    pub fn columns(&self, cols: Range<usize>) -> Result<SparseColumns, Errno> {
        if cols.end > self.layout.cols || cols.start > cols.end {
            return Err(Errno::Range);
        }
        if cols.is_empty() {
            return Ok(SparseColumns {
                cols,
                colptr: &[],
                entries: &[],
                entry_base: 0,
            });
        }
        let ptr_bytes = self.layout.colptr_bytes(cols.clone());
        let colptr: &'static [u8] =
            state::get_state_offset(&layout::colptr_key(&self.prefix), ptr_bytes.start, ptr_bytes.len(), 0)?;
        let (first, _) = layout::colptr_at(colptr, cols.start, cols.start);
        let (_, last) = layout::colptr_at(colptr, cols.start, cols.end - 1);
        let entries: &'static [u8] = if last > first {
            state::get_state_offset(
                &layout::entries_key(&self.prefix),
                first * SPARSE_ENTRY_SIZE,
                (last - first) * SPARSE_ENTRY_SIZE,
                0,
            )?
        } else {
            &[]
        };
        Ok(SparseColumns {
            cols,
            colptr,
            entries,
            entry_base: first,
        })
    }
}

pub struct SparseColumns {
    cols: Range<usize>,
    colptr: &'static [u8],
    entries: &'static [u8],
    entry_base: usize,
}

#[derive(Clone, Copy)]
pub struct SparseColumn<'a> {
    entries: &'a [u8],
}

impl<'a> SparseColumn<'a> {
    /// `(row, value)` pairs of the stored entries.
    pub fn non_nulls(&self) -> impl Iterator<Item = (usize, f64)> + 'a {
        self.entries
            .chunks_exact(SPARSE_ENTRY_SIZE)
            .map(layout::decode_entry)
            .filter(|(r, _)| *r != PAD_ROW)
            .map(|(r, v)| (r as usize, v))
    }
}

impl SparseColumns {
    pub fn iter(&self) -> impl Iterator<Item = (usize, SparseColumn<'_>)> + '_ {
        self.cols.clone().map(move |c| {
            debug_assert!(self.colptr.len() >= (c - self.cols.start + 1) * COLPTR_STRIDE);
            let (s, e) = layout::colptr_at(self.colptr, self.cols.start, c);
            let lo = (s - self.entry_base) * SPARSE_ENTRY_SIZE;
            let hi = (e - self.entry_base) * SPARSE_ENTRY_SIZE;
            (
                c,
                SparseColumn {
                    entries: &self.entries[lo.min(hi)..hi],
                },
            )
        })
    }
}
