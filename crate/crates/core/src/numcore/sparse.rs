use std::ops::Range;

use crate::error::{Error, Result};

use super::Tensor;

/// Square sparse matrix in compressed-row form with sorted column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    // Row of every stored entry, for scatter-style backward passes.
    row_of: Vec<usize>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are rejected.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut row_of = Vec::with_capacity(triplets.len());
        let mut prev: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(Error::invalid(format!("entry ({r}, {c}) outside {n}x{n}")));
            }
            if prev == Some((r, c)) {
                return Err(Error::invalid(format!("duplicate entry ({r}, {c})")));
            }
            prev = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            row_of.push(r);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
            row_of,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn row_indices(&self) -> &[usize] {
        &self.row_of
    }

    /// Entry index range of row `r`.
    pub fn row_range(&self, r: usize) -> Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    /// Position of entry `(r, c)` in the value array, if stored.
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let range = self.row_range(r);
        self.col_idx[range.clone()]
            .binary_search(&c)
            .ok()
            .map(|off| range.start + off)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.position(r, c).map_or(0.0, |p| self.values[p])
    }

    /// For each entry `(r, c)`, the position of `(c, r)` if stored.
    pub fn mirror_positions(&self) -> Vec<Option<usize>> {
        (0..self.nnz())
            .map(|e| self.position(self.col_idx[e], self.row_of[e]))
            .collect()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n, self.n]);
        for e in 0..self.nnz() {
            t.set(self.row_of[e], self.col_idx[e], self.values[e]);
        }
        t
    }

    pub fn is_symmetric(&self) -> bool {
        self.mirror_positions()
            .iter()
            .enumerate()
            .all(|(e, m)| m.is_some_and(|p| self.values[p] == self.values[e]))
    }
}

/// Splits `width` columns into `count` contiguous blocks whose sizes differ
/// by at most one; earlier blocks take the remainder.
pub fn block_ranges(width: usize, count: usize) -> Result<Vec<Range<usize>>> {
    if count == 0 || count > width {
        return Err(Error::invalid(format!(
            "cannot split {width} features into {count} blocks"
        )));
    }
    let base = width / count;
    let extra = width % count;
    let mut start = 0;
    Ok((0..count)
        .map(|b| {
            let len = base + usize::from(b < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Block index of every column.
pub fn block_of_columns(ranges: &[Range<usize>]) -> Vec<usize> {
    let mut out = Vec::new();
    for (b, r) in ranges.iter().enumerate() {
        out.extend(std::iter::repeat_n(b, r.len()));
    }
    out
}
