//! Column-per-time-step storage of spatial fields.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::linalg::Matrix;

/// Snapshots of a field on a fixed spatial grid, one column per saved step.
/// Data is stored column-major so each snapshot is contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMatrix {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl SnapshotMatrix {
    /// Empty matrix for fields with the given spatial extents.
    pub fn new(dims: &[usize]) -> Self {
        SnapshotMatrix {
            dims: dims.to_vec(),
            data: Vec::new(),
        }
    }

    pub fn from_parts(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let rows: usize = dims.iter().product();
        if rows == 0 || data.len() % rows != 0 {
            return shape_err("SnapshotMatrix::from_parts", dims, &[data.len()]);
        }
        Ok(SnapshotMatrix {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_rows(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn n_cols(&self) -> usize {
        self.data.len() / self.n_rows().max(1)
    }

    pub fn push(&mut self, column: &[f64]) -> Result<()> {
        if column.len() != self.n_rows() {
            return shape_err("SnapshotMatrix::push", &self.dims, &[column.len()]);
        }
        self.data.extend_from_slice(column);
        Ok(())
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.n_rows();
        &self.data[j * n..(j + 1) * n]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_rows().max(1))
    }

    /// Raw column-major payload.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Dense rows × cols copy.
    pub fn to_matrix(&self) -> Matrix {
        let n = self.n_rows();
        Matrix::from_fn(n, self.n_cols(), |i, j| self.data[j * n + i])
    }

    /// Sub-range of columns `[start, start + len)` as a dense matrix.
    pub fn window(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.n_cols() {
            return shape_err("SnapshotMatrix::window", &[start, len], &[self.n_cols()]);
        }
        let n = self.n_rows();
        Ok(Matrix::from_fn(n, len, |i, j| self.data[(start + j) * n + i]))
    }

    pub fn truncated(&self, cols: usize) -> SnapshotMatrix {
        let n = self.n_rows();
        SnapshotMatrix {
            dims: self.dims.clone(),
            data: self.data[..cols.min(self.n_cols()) * n].to_vec(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
