//! Variance-based sensitivity analysis and screening of correction
//! parameters.
//!
//! Two complementary diagnostics: the first-order Sobol index of a forecast
//! expansion (fraction of output variance carried by one germ alone) and
//! the posterior-to-prior variance ratio J_k = var(q_a,k)/var(q_f,k) — near
//! one means the data did not inform that parameter. Screening freezes the
//! uninformed parameters. The statistical EnKF gain can be replaced by an
//! "improved" gain built from a sparsely regressed linear forward map H,
//! for which the prior covariance is known exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RomError};
use crate::linalg;
use crate::pce::{NormDiagonal, PceExpansion};
use crate::prior::GaussianPrior;
use crate::rvm::{rvm_fit, RvmConfig};

/// Screening outcome: variance ratios, optional Sobol indices, and the
/// retained parameter set.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub ratio: DVector<f64>,
    pub sobol_first: Option<DVector<f64>>,
    pub active_set: Vec<usize>,
    pub threshold: f64,
    pub warnings: Vec<String>,
}

/// J_k = posterior variance / prior variance, with inactive prior entries
/// reported as 1 by convention.
pub fn variance_ratio(prior: &GaussianPrior, posterior_var: &DVector<f64>) -> Result<DVector<f64>> {
    if posterior_var.len() != prior.len() {
        return Err(RomError::DimensionMismatch(format!(
            "posterior variance length {} vs prior length {}",
            posterior_var.len(),
            prior.len()
        )));
    }
    let mut ratio = DVector::zeros(prior.len());
    for k in 0..prior.len() {
        if !prior.active_mask[k] {
            ratio[k] = 1.0;
            continue;
        }
        let pv = prior.std[k] * prior.std[k];
        if pv <= 0.0 {
            return Err(RomError::InvalidArgument(format!(
                "prior std must be positive on active entry {k}"
            )));
        }
        ratio[k] = (posterior_var[k] / pv).max(0.0);
    }
    Ok(ratio)
}

/// First-order Sobol indices of an expansion, variance-weighted across the
/// output dimensions:
/// S_i = Σ_outputs Σ_{α: only α_i > 0} Δ_αα c_α² / Σ_outputs Σ_{α>0} Δ_αα c_α².
/// Returns the indices and a flag set when the total variance is zero.
pub fn sobol_first_order(
    expansion: &PceExpansion,
    norms: &NormDiagonal,
) -> Result<(DVector<f64>, bool)> {
    let set = &expansion.index_set;
    if norms.values.len() != set.len() {
        return Err(RomError::DimensionMismatch(
            "norm diagonal does not match the index set".into(),
        ));
    }
    let m = set.m();
    let mut per_input = DVector::zeros(m);
    let mut total = 0.0;
    for (k, alpha) in set.iter().enumerate().skip(1) {
        let mut col_var = 0.0;
        for r in 0..expansion.n_outputs() {
            let c = expansion.coefficients[(r, k)];
            col_var += norms.values[k] * c * c;
        }
        total += col_var;
        let mut nonzero = alpha.iter().enumerate().filter(|(_, &a)| a > 0);
        if let Some((i, _)) = nonzero.next() {
            if nonzero.next().is_none() {
                // univariate term: contributes to the first-order index of i
                per_input[i] += col_var;
            }
        }
    }
    if total == 0.0 {
        return Ok((DVector::zeros(m), true));
    }
    Ok((per_input / total, false))
}

/// Linear forward-map estimate with per-output regression residual
/// variances (the part of the response the linear map cannot explain).
#[derive(Debug, Clone)]
pub struct LinearMapEstimate {
    pub h: DMatrix<f64>,
    pub residual_variance: DVector<f64>,
}

/// Estimates the linear map H: q ↦ y from samples by sparse Bayesian
/// regression of each output on the centered parameter samples.
pub fn estimate_linear_map(
    q_samples: &DMatrix<f64>,
    y_samples: &DMatrix<f64>,
    config: &RvmConfig,
) -> Result<LinearMapEstimate> {
    let z = q_samples.nrows();
    if z != y_samples.nrows() {
        return Err(RomError::DimensionMismatch(
            "sample counts disagree".into(),
        ));
    }
    if z < 2 {
        return Err(RomError::InvalidArgument(
            "linear map estimation needs at least 2 samples".into(),
        ));
    }
    let s = q_samples.ncols();
    let m_y = y_samples.ncols();

    let center = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = m.clone();
        for j in 0..m.ncols() {
            let mean = m.column(j).sum() / z as f64;
            for i in 0..z {
                out[(i, j)] -= mean;
            }
        }
        out
    };
    let qc = center(q_samples);
    let yc = center(y_samples);

    let mut h = DMatrix::zeros(m_y, s);
    let mut residual_variance = DVector::zeros(m_y);
    for r in 0..m_y {
        let fit = rvm_fit(&qc, &yc.column(r).into_owned(), config)?;
        h.row_mut(r).copy_from(&fit.weights.transpose());
        residual_variance[r] = fit.sigma2;
    }
    Ok(LinearMapEstimate {
        h,
        residual_variance,
    })
}

/// K_imp = C_q Hᵀ (H C_q Hᵀ + C_ε)†, with C_q = diag of the prior's
/// effective variances (known exactly, unlike the statistical estimate).
pub fn improved_kalman_gain(
    h: &DMatrix<f64>,
    prior: &GaussianPrior,
    c_eps: &DVector<f64>,
    rel_cutoff: f64,
) -> Result<DMatrix<f64>> {
    let (m_y, s) = h.shape();
    if s != prior.len() || c_eps.len() != m_y {
        return Err(RomError::DimensionMismatch(
            "improved gain operand shapes disagree".into(),
        ));
    }
    let q_var = prior.effective_variance();
    // H C_q (s is large, C_q diagonal: scale columns of H)
    let mut h_cq = h.clone();
    for (j, mut col) in h_cq.column_iter_mut().enumerate() {
        col *= q_var[j];
    }
    let mut c_y = &h_cq * h.transpose();
    for j in 0..m_y {
        c_y[(j, j)] += c_eps[j];
    }
    let (pinv, _rank) = linalg::sym_pseudo_inverse(&c_y, rel_cutoff);
    Ok(h_cq.transpose() * pinv)
}

/// Posterior marginal variances implied by the improved gain:
/// diag(C_q − K (H C_q Hᵀ + C_ε) Kᵀ), clamped at zero.
pub fn improved_posterior_variance(
    h: &DMatrix<f64>,
    prior: &GaussianPrior,
    c_eps: &DVector<f64>,
    rel_cutoff: f64,
) -> Result<DVector<f64>> {
    let (m_y, _) = h.shape();
    let q_var = prior.effective_variance();
    let gain = improved_kalman_gain(h, prior, c_eps, rel_cutoff)?;
    let mut h_cq = h.clone();
    for (j, mut col) in h_cq.column_iter_mut().enumerate() {
        col *= q_var[j];
    }
    let mut c_y = &h_cq * h.transpose();
    for j in 0..m_y {
        c_y[(j, j)] += c_eps[j];
    }
    let kc = &gain * &c_y; // s × m_y
    let var = DVector::from_fn(prior.len(), |k, _| {
        let reduction = kc.row(k).dot(&gain.row(k));
        (q_var[k] - reduction).max(0.0)
    });
    Ok(var)
}

/// Retains parameters whose variance ratio fell below the threshold; an
/// empty selection keeps everything and warns.
pub fn screen_variables(
    ratios: &DVector<f64>,
    threshold: f64,
) -> Result<(Vec<usize>, Vec<String>)> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(RomError::InvalidArgument(format!(
            "screening threshold must be in (0, 1), got {threshold}"
        )));
    }
    let active: Vec<usize> = (0..ratios.len()).filter(|&k| ratios[k] < threshold).collect();
    if active.is_empty() {
        return Ok((
            (0..ratios.len()).collect(),
            vec!["screening retained nothing; proceeding with all variables".into()],
        ));
    }
    Ok((active, Vec::new()))
}
