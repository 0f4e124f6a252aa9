//! Compressed sparse column matrices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sparse matrix in compressed-sparse-column form with sorted row indices.
#[derive(Debug, Clone)]
pub struct CscMatrix<T> {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CscMatrix<T> {
    /// Build from per-column entry lists. Entries are sorted by row and
    /// duplicates within a column are summed.
    pub fn from_columns(nrows: usize, mut columns: Vec<Vec<(usize, T)>>) -> Result<Self> {
        let ncols = columns.len();
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in columns.iter_mut() {
            col.sort_by_key(|&(i, _)| i);
            let mut last: Option<usize> = None;
            for &(i, v) in col.iter() {
                if i >= nrows {
                    return Err(Error::IndexOutOfRange(format!(
                        "row {i} >= nrows {nrows}"
                    )));
                }
                if last == Some(i) {
                    let n = values.len();
                    values[n - 1] += v;
                } else {
                    row_idx.push(i);
                    values.push(v);
                    last = Some(i);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[T], y: &mut [T]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for v in y.iter_mut() {
            *v = T::zero();
        }
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == T::zero() {
                continue;
            }
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[p]] += self.values[p] * xj;
            }
        }
    }

    /// `y = A^T x`.
    pub fn matvec_transpose(&self, x: &[T], y: &mut [T]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for j in 0..self.ncols {
            let mut acc = T::zero();
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc += self.values[p] * x[self.row_idx[p]];
            }
            y[j] = acc;
        }
    }

    pub fn column_sums(&self) -> Vec<T> {
        (0..self.ncols)
            .map(|j| {
                let mut acc = T::zero();
                for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                    acc += self.values[p];
                }
                acc
            })
            .collect()
    }

    pub fn min_value(&self) -> T {
        self.values
            .iter()
            .fold(T::infinity(), |acc, &v| T::min(acc, v))
    }

    pub fn for_each_entry(&self, mut f: impl FnMut(usize, usize, T)) {
        for j in 0..self.ncols {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                f(self.row_idx[p], j, self.values[p]);
            }
        }
    }

    /// Entry accessor; zero when absent. Linear in the column length.
    pub fn get(&self, i: usize, j: usize) -> T {
        for p in self.col_ptr[j]..self.col_ptr[j + 1] {
            if self.row_idx[p] == i {
                return self.values[p];
            }
        }
        T::zero()
    }

    /// New matrix with every stored value mapped through `f(i, j, v)`.
    pub fn map_values(&self, mut f: impl FnMut(usize, usize, T) -> T) -> Self {
        let mut out = self.clone();
        for j in 0..self.ncols {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                out.values[p] = f(self.row_idx[p], j, self.values[p]);
            }
        }
        out
    }

    /// Largest sub- and super-diagonal offsets carrying a stored entry.
    pub fn bandwidths(&self) -> (usize, usize) {
        let (mut kl, mut ku) = (0usize, 0usize);
        self.for_each_entry(|i, j, _| {
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        });
        (kl, ku)
    }

    /// Dense copy, for small oracles and tests.
    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut dense = vec![vec![T::zero(); self.ncols]; self.nrows];
        self.for_each_entry(|i, j, v| dense[i][j] += v);
        dense
    }
}
