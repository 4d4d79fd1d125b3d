//! Small shared linear algebra helpers: sorted symmetric eigendecomposition
//! and the truncated pseudo-inverse used by the Kalman gains.

use nalgebra::{DMatrix, DVector};

/// Symmetric eigendecomposition with eigenvalues sorted descending
/// (ties broken by original index, so the result is deterministic).
pub fn sorted_symmetric_eigen(mat: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = mat.nrows();
    let eig = mat.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &idx) in order.iter().enumerate() {
        vectors.column_mut(k).copy_from(&eig.eigenvectors.column(idx));
    }
    (values, vectors)
}

pub fn symmetrize(mat: &DMatrix<f64>) -> DMatrix<f64> {
    (mat + mat.transpose()) * 0.5
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix, truncating
/// eigenvalues at `rel_cutoff` times the largest. Returns the inverse and
/// the effective rank used.
pub fn sym_pseudo_inverse(mat: &DMatrix<f64>, rel_cutoff: f64) -> (DMatrix<f64>, usize) {
    let (vals, vecs) = sorted_symmetric_eigen(&symmetrize(mat));
    pseudo_inverse_from_eigen(&vals, &vecs, rel_cutoff)
}

pub fn pseudo_inverse_from_eigen(
    vals: &DVector<f64>,
    vecs: &DMatrix<f64>,
    rel_cutoff: f64,
) -> (DMatrix<f64>, usize) {
    let n = vals.len();
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut inv = DMatrix::zeros(n, n);
    let mut rank = 0;
    if scale == 0.0 {
        return (inv, 0);
    }
    for k in 0..n {
        // Negative eigenvalues of a symmetrized covariance are roundoff;
        // they are never inverted.
        if vals[k] > rel_cutoff * scale {
            let col = vecs.column(k);
            inv += col * col.transpose() / vals[k];
            rank += 1;
        }
    }
    (inv, rank)
}
