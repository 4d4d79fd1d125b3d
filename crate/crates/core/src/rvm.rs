//! Sparse Bayesian regression (relevance vector machine).
//!
//! Each coefficient v_α carries a Gaussian prior N(0, ϖ_α⁻¹) whose precision
//! is set by type-II maximum likelihood: iterate
//!
//! ```text
//!   Σ = (σ⁻² ΨᵀΨ + diag ϖ)⁻¹,   μ = σ⁻² Σ Ψᵀ w,
//!   γ_α = 1 − ϖ_α Σ_αα,          ϖ_α ← γ_α / μ_α²,
//!   σ² ← ‖w − Ψμ‖² / (N − Σ_α γ_α),
//! ```
//!
//! pruning coefficients whose precision exceeds the threshold, until the
//! log evidence stalls. In the undersampled regime (more active columns
//! than samples) the iteration works with the N × N matrix
//! B = σ²I + Ψ diag(ϖ)⁻¹ Ψᵀ instead, which carries the same evidence.
//! A hyperparameter step that would lower the evidence is not accepted;
//! the iteration stops at the previous state instead.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Result, RomError};
use crate::pce::{evaluate_basis, MultiIndexSet, PceExpansion};

#[derive(Debug, Clone, Copy)]
pub struct RvmConfig {
    pub max_iter: usize,
    /// Relative log-evidence change below which the iteration stops.
    pub tol: f64,
    /// Coefficients with precision above this are pruned (weight exactly 0).
    pub prune_threshold: f64,
    /// Fix the regression noise variance instead of estimating it.
    pub fixed_sigma2: Option<f64>,
    /// Lower bound for the estimated noise variance.
    pub sigma2_floor: f64,
}

impl Default for RvmConfig {
    fn default() -> Self {
        RvmConfig {
            max_iter: 500,
            tol: 1e-6,
            prune_threshold: 1e12,
            fixed_sigma2: None,
            sigma2_floor: 1e-14,
        }
    }
}

/// Fit result; pruned coefficients have weight exactly zero and infinite
/// precision.
#[derive(Debug, Clone)]
pub struct RvmResult {
    /// Posterior mean over all P columns.
    pub weights: DVector<f64>,
    /// Per-column precisions (∞ on pruned columns).
    pub precisions: DVector<f64>,
    pub sigma2: f64,
    /// Columns with finite precision, ascending.
    pub active_set: Vec<usize>,
    /// Posterior covariance over the active set; empty when the active set
    /// exceeds the materialization limit.
    pub posterior_covariance: DMatrix<f64>,
    /// Posterior variances over the active set (same order).
    pub posterior_variance: DVector<f64>,
    /// Accepted log marginal likelihood values, non-decreasing.
    pub evidence_trace: Vec<f64>,
    /// True when everything was pruned (or the targets were identically
    /// zero) and the zero model is returned.
    pub zero_model: bool,
}

/// Full posterior covariance matrices above this active-set size are not
/// materialized.
const POSTERIOR_COV_LIMIT: usize = 2000;

struct StepQuantities {
    mu: DVector<f64>,
    sigma_diag: DVector<f64>,
    gamma: DVector<f64>,
    evidence: f64,
    residual2: f64,
}

fn compute_step(
    design: &DMatrix<f64>,
    targets: &DVector<f64>,
    active: &[usize],
    prec: &[f64],
    sigma2: f64,
) -> Result<StepQuantities> {
    let n = design.nrows();
    let p_act = active.len();
    let psi = design.select_columns(active.iter());
    let w = targets;

    let (mu, sigma_diag, ln_det_b, w_b_w);
    if p_act <= n {
        // Direct P' × P' formulation.
        let gram = psi.transpose() * &psi;
        let mut prec_mat = gram / sigma2;
        for (k, &pk) in prec.iter().enumerate() {
            prec_mat[(k, k)] += pk;
        }
        let chol = Cholesky::new(prec_mat).ok_or_else(|| {
            RomError::IterationFailure("posterior precision not positive definite".into())
        })?;
        let ln_det_prec = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        let sigma = chol.inverse();
        let rhs = psi.transpose() * w / sigma2;
        let mu_v = &sigma * rhs;
        let s_diag = sigma.diagonal();
        // det B = σ^{2N} det(Σ⁻¹) / det(diag ϖ)
        let ln_prec_sum: f64 = prec.iter().map(|v| v.ln()).sum();
        ln_det_b = n as f64 * sigma2.ln() + ln_det_prec - ln_prec_sum;
        w_b_w = (w.dot(w) - w.dot(&(&psi * &mu_v))) / sigma2;
        mu = mu_v;
        sigma_diag = s_diag;
    } else {
        // Woodbury: B = σ²I + Ψ diag(1/ϖ) Ψᵀ is N × N.
        let mut scaled = psi.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col /= prec[k].sqrt();
        }
        let mut b = &scaled * scaled.transpose();
        for i in 0..n {
            b[(i, i)] += sigma2;
        }
        let chol = Cholesky::new(b).ok_or_else(|| {
            RomError::IterationFailure("marginal covariance not positive definite".into())
        })?;
        ln_det_b = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        let z = chol.solve(w);
        w_b_w = w.dot(&z);
        let mu_v = DVector::from_fn(p_act, |k, _| psi.column(k).dot(&z) / prec[k]);
        // Σ_αα = 1/ϖ_α − (1/ϖ_α²) ‖L⁻¹ ψ_α‖²
        let t = chol
            .l_dirty()
            .solve_lower_triangular(&psi)
            .ok_or_else(|| RomError::IterationFailure("triangular solve failed".into()))?;
        let s_diag = DVector::from_fn(p_act, |k, _| {
            let q = t.column(k).norm_squared();
            1.0 / prec[k] - q / (prec[k] * prec[k])
        });
        mu = mu_v;
        sigma_diag = s_diag;
    }

    let gamma = DVector::from_fn(p_act, |k, _| {
        (1.0 - prec[k] * sigma_diag[k]).clamp(0.0, 1.0)
    });
    let evidence = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det_b + w_b_w);
    let residual = w - &psi * &mu;
    Ok(StepQuantities {
        mu,
        sigma_diag,
        gamma,
        evidence,
        residual2: residual.norm_squared(),
    })
}

fn zero_model(p_total: usize, sigma2: f64, trace: Vec<f64>) -> RvmResult {
    RvmResult {
        weights: DVector::zeros(p_total),
        precisions: DVector::from_element(p_total, f64::INFINITY),
        sigma2,
        active_set: Vec::new(),
        posterior_covariance: DMatrix::zeros(0, 0),
        posterior_variance: DVector::zeros(0),
        evidence_trace: trace,
        zero_model: true,
    }
}

/// Fits `targets ≈ design · v` with per-coefficient sparsity-promoting
/// priors; N ≤ P (undersampled) is explicitly supported.
pub fn rvm_fit(
    design: &DMatrix<f64>,
    targets: &DVector<f64>,
    config: &RvmConfig,
) -> Result<RvmResult> {
    let n = design.nrows();
    let p_total = design.ncols();
    if n == 0 || p_total == 0 {
        return Err(RomError::InvalidArgument(
            "rvm_fit needs a non-empty design matrix".into(),
        ));
    }
    if targets.len() != n {
        return Err(RomError::DimensionMismatch(format!(
            "{} targets for {} design rows",
            targets.len(),
            n
        )));
    }
    if design.iter().any(|v| !v.is_finite()) || targets.iter().any(|v| !v.is_finite()) {
        return Err(RomError::InvalidArgument(
            "design and targets must be finite".into(),
        ));
    }

    let target_var = {
        let mean = targets.sum() / n as f64;
        targets.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
    };
    if targets.iter().all(|v| *v == 0.0) {
        return Ok(zero_model(p_total, 0.0, Vec::new()));
    }

    let mut active: Vec<usize> = (0..p_total).collect();
    let mut prec: Vec<f64> = vec![1.0; p_total];
    let mut sigma2 = config
        .fixed_sigma2
        .unwrap_or_else(|| (0.1 * target_var).max(config.sigma2_floor).max(1e-12));

    let mut trace: Vec<f64> = Vec::new();
    let mut accepted: Option<(Vec<usize>, Vec<f64>, f64, StepQuantities)> = None;

    for _iter in 0..config.max_iter.max(1) {
        let q = compute_step(design, targets, &active, &prec, sigma2)?;
        if !q.evidence.is_finite() {
            return Err(RomError::IterationFailure(format!(
                "log evidence became non-finite ({})",
                q.evidence
            )));
        }
        if let Some(last) = trace.last() {
            if q.evidence < last - 1e-8 * last.abs().max(1.0) {
                // The previous hyperparameter step lowered the evidence; keep
                // the last accepted state and stop.
                break;
            }
        }
        let converged = trace
            .last()
            .map(|last| (q.evidence - last).abs() <= config.tol * q.evidence.abs().max(1.0))
            .unwrap_or(false);
        trace.push(q.evidence);

        // Re-estimation from the accepted step.
        let mut new_active = Vec::with_capacity(active.len());
        let mut new_prec = Vec::with_capacity(active.len());
        for (k, &col) in active.iter().enumerate() {
            let mu2 = q.mu[k] * q.mu[k];
            let cand = if mu2 > 0.0 {
                q.gamma[k] / mu2
            } else {
                f64::INFINITY
            };
            if cand.is_finite() && cand <= config.prune_threshold {
                new_active.push(col);
                new_prec.push(cand.max(1e-30));
            }
        }
        let gamma_sum: f64 = q.gamma.sum();
        // With N or more active columns the residual can vanish identically
        // and the noise estimate collapses toward the interpolating model;
        // sigma2 is only re-estimated once pruning has cut the set below N.
        let new_sigma2 = match config.fixed_sigma2 {
            Some(s) => s,
            None if new_active.len() < n => {
                let denom = n as f64 - gamma_sum;
                if denom > 1e-3 {
                    (q.residual2 / denom).max(config.sigma2_floor)
                } else {
                    sigma2
                }
            }
            None => sigma2,
        };

        accepted = Some((active.clone(), prec.clone(), sigma2, q));

        if converged {
            break;
        }
        if new_active.is_empty() {
            // Everything pruned: fall back to the zero model.
            return Ok(zero_model(p_total, target_var, trace));
        }
        active = new_active;
        prec = new_prec;
        sigma2 = new_sigma2;
    }

    let (active, prec, sigma2, q) = match accepted {
        Some(a) => a,
        None => return Ok(zero_model(p_total, target_var, trace)),
    };

    let mut weights = DVector::zeros(p_total);
    let mut precisions = DVector::from_element(p_total, f64::INFINITY);
    for (k, &col) in active.iter().enumerate() {
        weights[col] = q.mu[k];
        precisions[col] = prec[k];
    }

    // Full posterior covariance over the active set, when small enough.
    let posterior_covariance = if active.len() <= POSTERIOR_COV_LIMIT {
        let psi = design.select_columns(active.iter());
        let gram = psi.transpose() * &psi;
        let mut prec_mat = gram / sigma2.max(1e-300);
        for (k, &pk) in prec.iter().enumerate() {
            prec_mat[(k, k)] += pk;
        }
        Cholesky::new(prec_mat)
            .map(|c| c.inverse())
            .unwrap_or_else(|| DMatrix::zeros(0, 0))
    } else {
        DMatrix::zeros(0, 0)
    };

    Ok(RvmResult {
        weights,
        precisions,
        sigma2,
        active_set: active,
        posterior_covariance,
        posterior_variance: q.sigma_diag.clone(),
        evidence_trace: trace,
        zero_model: false,
    })
}

/// Row of the per-output sparsity report.
#[derive(Debug, Clone)]
pub struct SparsityRow {
    pub output_index: usize,
    pub n_active: usize,
    pub p_total: usize,
    pub sigma2: f64,
}

/// Fits one expansion per output dimension against a shared Hermite design
/// matrix; pruned coefficients are exactly zero.
pub fn fit_forecast_pce(
    xi_samples: &DMatrix<f64>,
    forecast_values: &DMatrix<f64>,
    index_set: &MultiIndexSet,
    config: &RvmConfig,
) -> Result<(PceExpansion, Vec<SparsityRow>)> {
    if xi_samples.nrows() != forecast_values.nrows() {
        return Err(RomError::DimensionMismatch(format!(
            "{} germ samples vs {} forecast rows",
            xi_samples.nrows(),
            forecast_values.nrows()
        )));
    }
    let design = evaluate_basis(index_set, xi_samples)?;
    let d = forecast_values.ncols();
    let p_total = index_set.len();
    let mut coefficients = DMatrix::zeros(d, p_total);
    let mut report = Vec::with_capacity(d);
    for j in 0..d {
        let fit = rvm_fit(&design, &forecast_values.column(j).into_owned(), config)?;
        coefficients.row_mut(j).copy_from(&fit.weights.transpose());
        report.push(SparsityRow {
            output_index: j,
            n_active: fit.active_set.len(),
            p_total,
            sigma2: fit.sigma2,
        });
    }
    Ok((PceExpansion::new(index_set.clone(), coefficients)?, report))
}
