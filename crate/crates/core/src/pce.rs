//! Polynomial chaos algebra and the square-root PCE form of the
//! Gauss-Markov-Kalman update.
//!
//! Random variables are expanded in probabilists' Hermite polynomials of
//! independent standard Gaussian germs,
//!
//! ```text
//!   q(ω) ≈ Σ_α q^(α) Ψ_α(ξ(ω)),    Ψ_α(ξ) = Π_k He_{α_k}(ξ_k),
//! ```
//!
//! over the complete total-degree multi-index set. With Δ the diagonal of
//! basis norms E(Ψ_α²) = Π_k α_k!, covariances reduce to weighted coefficient
//! products, C_{x,y} = x̃ Δ ỹᵀ over α > 0.
//!
//! The smoother update transports the mean by the Kalman gain and the
//! fluctuating part by a square-root factor: S_f = q̃_f Δ^{1/2} satisfies
//! S_f S_fᵀ = C_f, the posterior factor S_a (eigen-factorization of
//! C_a = C_f − K C_y Kᵀ, aligned to S_f by an orthogonal Procrustes
//! rotation) is mapped back onto coefficients via q̃_a = S_a Δ^{−1/2}, so the
//! posterior lives in the prior's approximation space and keeps its
//! cardinality.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RomError};
use crate::linalg;

/// Complete total-degree multi-index set over `m` germ variables with
/// |α| ≤ p, in graded-lexicographic order (degree first, then descending
/// first component), the zero index first. Indices are stored flat with
/// stride `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiIndexSet {
    m: usize,
    p: usize,
    flat: Vec<u32>,
}

/// Number of multi-indices in the total-degree set: C(m + p, p).
/// `None` on u64 overflow.
pub fn cardinality(m: usize, p: usize) -> Option<u64> {
    let mut acc: u128 = 1;
    for i in 1..=p as u128 {
        acc = acc.checked_mul(m as u128 + i)?;
        acc /= i;
        if acc > u64::MAX as u128 {
            return None;
        }
    }
    Some(acc as u64)
}

/// Hard cap on the enumerated set size.
const MAX_CARDINALITY: u64 = 10_000_000;

/// Builds the complete total-degree multi-index set.
pub fn build_multiindex(m: usize, p: usize) -> Result<MultiIndexSet> {
    if m == 0 {
        return Err(RomError::InvalidArgument(
            "multi-index set needs m >= 1".into(),
        ));
    }
    let card = cardinality(m, p).filter(|&c| c <= MAX_CARDINALITY).ok_or(
        RomError::InvalidArgument(format!(
            "multi-index set for m = {m}, p = {p} exceeds the {MAX_CARDINALITY} index cap"
        )),
    )?;
    let mut flat = Vec::with_capacity(card as usize * m);
    let mut scratch = vec![0u32; m];
    for degree in 0..=p {
        compositions(degree as u32, 0, &mut scratch, &mut flat);
    }
    debug_assert_eq!(flat.len() as u64, card * m as u64);
    Ok(MultiIndexSet { m, p, flat })
}

// All weak compositions of `left` into the slots from `slot` on, first
// component descending (graded-lex within a degree block).
fn compositions(left: u32, slot: usize, scratch: &mut Vec<u32>, out: &mut Vec<u32>) {
    let m = scratch.len();
    if slot == m - 1 {
        scratch[slot] = left;
        out.extend_from_slice(scratch);
        return;
    }
    for first in (0..=left).rev() {
        scratch[slot] = first;
        compositions(left - first, slot + 1, scratch, out);
    }
}

impl MultiIndexSet {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.flat.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn index(&self, k: usize) -> &[u32] {
        &self.flat[k * self.m..(k + 1) * self.m]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.flat.chunks(self.m)
    }

    /// Basis-norm diagonal Δ_αα = E(Ψ_α²) = Π_k α_k!.
    pub fn norm_diagonal(&self) -> NormDiagonal {
        let values = DVector::from_fn(self.len(), |k, _| {
            self.index(k)
                .iter()
                .map(|&a| factorial(a))
                .product::<f64>()
        });
        NormDiagonal { values }
    }
}

fn factorial(n: u32) -> f64 {
    (1..=n as u64).map(|i| i as f64).product()
}

/// Diagonal of Hermite basis norms.
#[derive(Debug, Clone)]
pub struct NormDiagonal {
    pub values: DVector<f64>,
}

/// Evaluates the multivariate Hermite basis on germ samples: entry (i, α)
/// is Ψ_α(ξ_i) with the probabilists' Hermite recurrence
/// He_{n+1} = x He_n − n He_{n−1}.
pub fn evaluate_basis(set: &MultiIndexSet, xi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if xi.ncols() != set.m() {
        return Err(RomError::DimensionMismatch(format!(
            "samples have {} columns, index set has m = {}",
            xi.ncols(),
            set.m()
        )));
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(RomError::InvalidArgument(
            "germ samples must be finite".into(),
        ));
    }
    let n = xi.nrows();
    let p = set.p();
    let m = set.m();
    let mut design = DMatrix::zeros(n, set.len());
    // Per-sample table of He_d(xi_k) for d = 0..=p.
    let mut he = vec![0.0; m * (p + 1)];
    for i in 0..n {
        for k in 0..m {
            let x = xi[(i, k)];
            he[k * (p + 1)] = 1.0;
            if p >= 1 {
                he[k * (p + 1) + 1] = x;
            }
            for d in 1..p {
                he[k * (p + 1) + d + 1] =
                    x * he[k * (p + 1) + d] - d as f64 * he[k * (p + 1) + d - 1];
            }
        }
        for (col, alpha) in set.iter().enumerate() {
            let mut prod = 1.0;
            for (k, &a) in alpha.iter().enumerate() {
                if a > 0 {
                    prod *= he[k * (p + 1) + a as usize];
                }
            }
            design[(i, col)] = prod;
        }
    }
    Ok(design)
}

/// A d-output expansion over a shared multi-index set; column 0 carries the
/// means.
#[derive(Debug, Clone)]
pub struct PceExpansion {
    pub index_set: MultiIndexSet,
    /// d × P coefficient matrix.
    pub coefficients: DMatrix<f64>,
}

impl PceExpansion {
    pub fn new(index_set: MultiIndexSet, coefficients: DMatrix<f64>) -> Result<Self> {
        if coefficients.ncols() != index_set.len() {
            return Err(RomError::DimensionMismatch(format!(
                "coefficient columns {} differ from index count {}",
                coefficients.ncols(),
                index_set.len()
            )));
        }
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(RomError::InvalidArgument(
                "expansion coefficients must be finite".into(),
            ));
        }
        Ok(PceExpansion {
            index_set,
            coefficients,
        })
    }

    pub fn n_outputs(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.coefficients.column(0).into_owned()
    }

    /// Fluctuation block: all columns α > 0.
    pub fn fluctuation(&self) -> DMatrix<f64> {
        self.coefficients
            .columns(1, self.coefficients.ncols() - 1)
            .into_owned()
    }

    /// Evaluates the expansion at germ samples, one output row per sample.
    pub fn evaluate(&self, xi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let design = evaluate_basis(&self.index_set, xi)?;
        Ok(design * self.coefficients.transpose())
    }
}

/// Mean and covariance of an expansion: mean is column 0 and
/// C = Σ_{α>0} Δ_αα c_α c_αᵀ.
pub fn pce_moments(
    expansion: &PceExpansion,
    norms: &NormDiagonal,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if norms.values.len() != expansion.index_set.len() {
        return Err(RomError::DimensionMismatch(
            "norm diagonal does not match the index set".into(),
        ));
    }
    let mean = expansion.mean();
    let cov = weighted_cross(
        &expansion.fluctuation(),
        &expansion.fluctuation(),
        &norms.values,
    );
    Ok((mean, cov))
}

// x (d1 × P-1) Δ' yᵀ (P-1 × d2) with Δ' the norm diagonal over α > 0.
fn weighted_cross(x: &DMatrix<f64>, y: &DMatrix<f64>, norms: &DVector<f64>) -> DMatrix<f64> {
    let mut y_scaled = y.clone();
    for (c, mut col) in y_scaled.column_iter_mut().enumerate() {
        col *= norms[c + 1];
    }
    x * y_scaled.transpose()
}

#[derive(Debug, Clone)]
pub struct GmkPceInfo {
    /// Effective rank used in the pseudo-inverse of C_y.
    pub gain_rank: usize,
    /// Rank of the posterior covariance factor.
    pub posterior_rank: usize,
    pub warnings: Vec<String>,
}

/// Square-root PCE Gauss-Markov-Kalman update.
///
/// `prior` and `forecast` must share one multi-index set over the parameter
/// germ. Observation noise enters only through its covariance diagonal
/// `noise_var` (its germ would contribute pure degree-1 terms that are
/// discarded when the posterior is constrained back to the prior space).
pub fn gmk_pce_update(
    prior: &PceExpansion,
    forecast: &PceExpansion,
    y: &DVector<f64>,
    noise_var: &DVector<f64>,
    norms: &NormDiagonal,
    rel_cutoff: f64,
) -> Result<(PceExpansion, GmkPceInfo)> {
    if prior.index_set != forecast.index_set {
        return Err(RomError::DimensionMismatch(
            "prior and forecast expansions must share the multi-index set".into(),
        ));
    }
    let p_total = prior.index_set.len();
    if norms.values.len() != p_total {
        return Err(RomError::DimensionMismatch(
            "norm diagonal does not match the index set".into(),
        ));
    }
    let d_y = forecast.n_outputs();
    if y.len() != d_y || noise_var.len() != d_y {
        return Err(RomError::DimensionMismatch(format!(
            "data/noise length must equal the {d_y} forecast outputs"
        )));
    }
    if noise_var.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(RomError::InvalidArgument(
            "noise variances must be non-negative".into(),
        ));
    }
    let mut warnings = Vec::new();

    let q_fluct = prior.fluctuation(); // s × (P-1)
    let y_fluct = forecast.fluctuation(); // d_y × (P-1)

    // Covariances from the coefficients.
    let c_qy = weighted_cross(&q_fluct, &y_fluct, &norms.values);
    let mut c_y = weighted_cross(&y_fluct, &y_fluct, &norms.values);
    for j in 0..d_y {
        c_y[(j, j)] += noise_var[j];
    }

    // PSD check on the (symmetrized) forecast covariance, then its
    // pseudo-inverse from the same eigendecomposition.
    let c_y = linalg::symmetrize(&c_y);
    let (vals, vecs) = linalg::sorted_symmetric_eigen(&c_y);
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale > 0.0 && vals[vals.len() - 1] < -1e-12 * scale {
        return Err(RomError::NumericalConditioning(format!(
            "forecast covariance is indefinite: min eigenvalue {:e} at scale {:e}",
            vals[vals.len() - 1],
            scale
        )));
    }
    let (c_y_pinv, gain_rank) = linalg::pseudo_inverse_from_eigen(&vals, &vecs, rel_cutoff);
    let gain = &c_qy * c_y_pinv;

    // Mean update.
    let mean_a = prior.mean() + &gain * (y - forecast.mean());

    // Posterior covariance and its clipped eigen-factor.
    let c_f = weighted_cross(&q_fluct, &q_fluct, &norms.values);
    let c_a = linalg::symmetrize(&(&c_f - &gain * &c_y * gain.transpose()));
    let (a_vals, a_vecs) = linalg::sorted_symmetric_eigen(&c_a);
    let clip_tol = 1e-12 * c_a.trace().abs();
    if let Some(min) = a_vals.iter().cloned().reduce(f64::min) {
        if min < -clip_tol.max(f64::MIN_POSITIVE) {
            warnings.push(format!(
                "posterior covariance eigenvalue {min:e} clipped to zero (trace {:e})",
                c_a.trace()
            ));
        }
    }
    let s = prior.n_outputs();
    let p_fluct = p_total - 1;
    let rank = a_vals
        .iter()
        .take(s.min(p_fluct))
        .filter(|&&v| v > 0.0)
        .count();

    // Thin factor S_a = V sqrt(Λ⁺): s × rank.
    let mut s_a_thin = DMatrix::zeros(s, rank);
    for k in 0..rank {
        let sqrt_l = a_vals[k].sqrt();
        for r in 0..s {
            s_a_thin[(r, k)] = a_vecs[(r, k)] * sqrt_l;
        }
    }

    // Prior factor S_f = q̃_f Δ'^{1/2}.
    let mut s_f = q_fluct.clone();
    for (c, mut col) in s_f.column_iter_mut().enumerate() {
        col *= norms.values[c + 1].sqrt();
    }

    // Orthogonal Procrustes alignment of the new factor with the prior
    // one: minimizes |S_a Q − S_f| over orthogonal Q, which keeps the
    // posterior coefficients as close to the prior's as the covariance
    // allows (K = 0 reproduces the prior exactly). Only the thin SVD of
    // the rank × (P−1) product is needed.
    let fluct_a = if rank == 0 {
        DMatrix::zeros(s, p_fluct)
    } else {
        let cross = s_a_thin.transpose() * &s_f; // rank × (P-1)
        let svd = cross.svd(true, true);
        let u = svd.u.as_ref().expect("svd with u");
        let v_t = svd.v_t.as_ref().expect("svd with v_t");
        let rotation = u * v_t; // rank × (P-1), orthonormal rows
        let mut aligned = s_a_thin * rotation; // s × (P-1)
        for (c, mut col) in aligned.column_iter_mut().enumerate() {
            col /= norms.values[c + 1].sqrt();
        }
        aligned
    };

    let mut coefficients = DMatrix::zeros(s, p_total);
    coefficients.column_mut(0).copy_from(&mean_a);
    coefficients.columns_mut(1, p_fluct).copy_from(&fluct_a);

    Ok((
        PceExpansion::new(prior.index_set.clone(), coefficients)?,
        GmkPceInfo {
            gain_rank,
            posterior_rank: rank,
            warnings,
        },
    ))
}
