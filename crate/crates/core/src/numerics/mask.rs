use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Boolean `L×L` attention mask; `allows(i, j)` means position `i` may attend to `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn new(len: usize) -> Self {
        AttentionMask {
            len,
            bits: vec![false; len * len],
        }
    }

    pub fn causal(len: usize) -> Self {
        let mut m = Self::new(len);
        for i in 0..len {
            for j in 0..=i {
                m.set(i, j, true);
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.len + j]
    }

    pub fn set(&mut self, i: usize, j: usize, allowed: bool) {
        self.bits[i * self.len + j] = allowed;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.len..(i + 1) * self.len]
    }

    /// Compressed per-row lists of visible columns, ascending.
    pub fn visible_rows(&self) -> Result<VisibleRows> {
        let mut offsets = Vec::with_capacity(self.len + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for i in 0..self.len {
            let before = cols.len();
            cols.extend((0..self.len).filter(|&j| self.allows(i, j)));
            if cols.len() == before {
                return Err(Error::DegenerateMask { row: i });
            }
            offsets.push(cols.len());
        }
        Ok(VisibleRows { offsets, cols })
    }
}

/// CSR view of an [`AttentionMask`]; every row is non-empty.
#[derive(Clone, Debug)]
pub struct VisibleRows {
    offsets: Vec<usize>,
    cols: Vec<usize>,
}

impl VisibleRows {
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }
}
