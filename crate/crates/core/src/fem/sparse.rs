//! Symmetric block-sparse matrices with 3×3 blocks, one block row per vertex.

use nalgebra::{Matrix3, Vector3};

use crate::scalar::Real;

/// Fixed sparsity pattern: for each block row the sorted block columns.
#[derive(Clone, Debug)]
pub struct BlockCsr<T: Real> {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<Matrix3<T>>,
}

impl<T: Real> BlockCsr<T> {
    /// Pattern coupling every pair of vertices that share an element.
    pub fn from_elements(n: usize, elements: &[[usize; 4]]) -> Self {
        let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for e in elements {
            for &a in e {
                adj[a].extend_from_slice(e);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for mut row in adj {
            row.sort_unstable();
            row.dedup();
            cols.extend(row);
            row_ptr.push(cols.len());
        }
        let values = vec![Matrix3::zeros(); cols.len()];
        Self { row_ptr, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Index of block `(i, j)` in the value array.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let r = &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]];
        r.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = Matrix3::zeros());
    }

    pub fn add_at(&mut self, slot: usize, m: &Matrix3<T>) {
        self.values[slot] += m;
    }

    pub fn block(&self, i: usize, j: usize) -> Matrix3<T> {
        self.slot(i, j).map_or_else(Matrix3::zeros, |s| self.values[s])
    }

    pub fn diagonal(&self, i: usize) -> Matrix3<T> {
        self.block(i, i)
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[Vector3<T>], y: &mut [Vector3<T>]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = Vector3::zeros();
            for s in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[s] * x[self.cols[s]];
            }
            *yi = acc;
        }
    }

    /// Dense copy, for inspection and tests on small systems.
    pub fn to_dense(&self) -> nalgebra::DMatrix<T> {
        let n = self.rows();
        let mut d = nalgebra::DMatrix::zeros(3 * n, 3 * n);
        for i in 0..n {
            for s in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[s];
                d.fixed_view_mut::<3, 3>(3 * i, 3 * j).copy_from(&self.values[s]);
            }
        }
        d
    }
}
