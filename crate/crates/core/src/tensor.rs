//! Dense rank-3 tensor with (i, j, k) lexicographic storage.

use nalgebra::{DMatrix, DVector};

/// Cubic tensor `T[i][j][k]`, `0 <= i, j, k < dim`, stored row-major
/// (index `(i*dim + j)*dim + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dim: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dim: usize) -> Self {
        Tensor3 {
            dim,
            data: vec![0.0; dim * dim * dim],
        }
    }

    pub fn from_vec(dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), dim * dim * dim, "tensor data length");
        Tensor3 { dim, data }
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor3::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    t[(i, j, k)] = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied()
    }

    /// Quadratic form per leading index: `out[i] = sum_jk a[j] T[i][j][k] a[k]`.
    pub fn quadratic_form(&self, a: &DVector<f64>) -> DVector<f64> {
        let n = self.dim;
        debug_assert_eq!(a.len(), n);
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                let aj = a[j];
                if aj == 0.0 {
                    continue;
                }
                let base = (i * n + j) * n;
                let mut inner = 0.0;
                for k in 0..n {
                    inner += self.data[base + k] * a[k];
                }
                acc += aj * inner;
            }
            out[i] = acc;
        }
        out
    }

    /// Jacobian of the quadratic form at `a`:
    /// `J[i][j] = sum_k (T[i][j][k] + T[i][k][j]) a[k]`.
    pub fn quadratic_jacobian(&self, a: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim;
        let mut jac = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += (self.data[(i * n + j) * n + k] + self.data[(i * n + k) * n + j]) * a[k];
                }
                jac[(i, j)] = acc;
            }
        }
        jac
    }

    pub fn add(&self, other: &Tensor3) -> Tensor3 {
        assert_eq!(self.dim, other.dim);
        Tensor3 {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

impl std::ops::Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;
    fn index(&self, (i, j, k): (usize, usize, usize)) -> &f64 {
        &self.data[(i * self.dim + j) * self.dim + k]
    }
}

impl std::ops::IndexMut<(usize, usize, usize)> for Tensor3 {
    fn index_mut(&mut self, (i, j, k): (usize, usize, usize)) -> &mut f64 {
        &mut self.data[(i * self.dim + j) * self.dim + k]
    }
}
