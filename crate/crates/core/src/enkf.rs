//! Sampling (ensemble) form of the linear Gauss-Markov-Kalman update.
//!
//! The whole training window is assimilated in one smoother update:
//! every member's correction vector is propagated through the ROM, the
//! forecast observations collect the modelling error, the gain is built
//! from statistical covariances and applied member-wise,
//!
//! ```text
//!   q_a(ω_i) = q_f(ω_i) + K (y − y_f(ω_i)),    K = C_{q,y} (C_y)†.
//! ```
//!
//! Observation noise is realized inside y_f; no perturbed-observation
//! duplicate is added on the data side.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, RomError};
use crate::linalg;
use crate::prior::NoiseModel;
use crate::rng::{derive_rng, stream};
use crate::rom::{integrate_rom, CorrectionVector, ReducedSystem};

/// Percentage of diverged members above which the forecast is abandoned.
const MAX_DIVERGED_PERCENT: u8 = 10;

/// Z × s matrix of correction-parameter samples plus its seed lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: DMatrix<f64>,
    pub seed: u64,
}

impl Ensemble {
    pub fn size(&self) -> usize {
        self.members.nrows()
    }

    pub fn param_len(&self) -> usize {
        self.members.ncols()
    }

    /// Column means.
    pub fn mean(&self) -> DVector<f64> {
        column_means(&self.members)
    }

    /// Unbiased column variances.
    pub fn variance(&self) -> DVector<f64> {
        let z = self.size();
        let mean = self.mean();
        DVector::from_fn(self.param_len(), |k, _| {
            self.members
                .column(k)
                .iter()
                .map(|v| (v - mean[k]) * (v - mean[k]))
                .sum::<f64>()
                / (z - 1) as f64
        })
    }
}

/// Forecast observations y_f(ω_i) for each member, flattened time-major,
/// mode-minor. Members whose integration diverged are flagged in `ok` and
/// excluded from covariance estimation and from the posterior.
#[derive(Debug, Clone)]
pub struct ForecastSet {
    pub predictions: DMatrix<f64>,
    pub obs_times: Vec<f64>,
    pub noise_applied: bool,
    pub ok: Vec<bool>,
}

impl ForecastSet {
    pub fn n_ok(&self) -> usize {
        self.ok.iter().filter(|b| **b).count()
    }
}

/// Inserts `substeps - 1` uniform interior points into every gap of the
/// anchor sequence. Returns the refined grid and the index of each anchor.
pub fn refine_times(anchors: &[f64], substeps: usize) -> (Vec<f64>, Vec<usize>) {
    let sub = substeps.max(1);
    let mut grid = Vec::with_capacity((anchors.len() - 1) * sub + 1);
    let mut anchor_idx = Vec::with_capacity(anchors.len());
    grid.push(anchors[0]);
    anchor_idx.push(0);
    for w in anchors.windows(2) {
        let (a, b) = (w[0], w[1]);
        for j in 1..=sub {
            let frac = j as f64 / sub as f64;
            grid.push(if j == sub { b } else { a + frac * (b - a) });
        }
        anchor_idx.push(grid.len() - 1);
    }
    (grid, anchor_idx)
}

/// Propagates every ensemble member through the ROM from `(a0_time, a0)`,
/// samples the trajectory at `obs_times` (each gap refined into `substeps`
/// integrator steps) and adds independent Gaussian observation noise per
/// member, time and mode.
#[allow(clippy::too_many_arguments)]
pub fn forecast_ensemble(
    ensemble: &Ensemble,
    system: &ReducedSystem,
    a0_time: f64,
    a0: &DVector<f64>,
    obs_times: &[f64],
    substeps: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<ForecastSet> {
    let n = system.n_modes();
    if ensemble.param_len() != CorrectionVector::param_len(n) {
        return Err(RomError::DimensionMismatch(format!(
            "ensemble columns {} do not match s = {} for {} modes",
            ensemble.param_len(),
            CorrectionVector::param_len(n),
            n
        )));
    }
    if obs_times.is_empty() || obs_times[0] <= a0_time {
        return Err(RomError::InvalidArgument(
            "obs_times must be non-empty and start after the initial time".into(),
        ));
    }
    if noise.std_per_mode.len() != n {
        return Err(RomError::DimensionMismatch(
            "noise model mode count differs from the system".into(),
        ));
    }

    let mut anchors = Vec::with_capacity(obs_times.len() + 1);
    anchors.push(a0_time);
    anchors.extend_from_slice(obs_times);
    let (grid, anchor_idx) = refine_times(&anchors, substeps);

    let z = ensemble.size();
    let m_y = obs_times.len() * n;
    let mut predictions = DMatrix::zeros(z, m_y);
    let mut ok = vec![true; z];
    let mut diverged = 0usize;

    for i in 0..z {
        let q = CorrectionVector::from_values(n, ensemble.members.row(i).transpose())?;
        match integrate_rom(system, &q, a0, &grid) {
            Ok(traj) => {
                let mut rng = derive_rng(seed, stream::FORECAST_NOISE, i as u64);
                let mut col = 0;
                for &gi in anchor_idx.iter().skip(1) {
                    for j in 0..n {
                        let eps: f64 = rng.sample(StandardNormal);
                        predictions[(i, col)] =
                            traj.states[(gi, j)] + noise.std_per_mode[j] * eps;
                        col += 1;
                    }
                }
            }
            Err(RomError::Divergence { .. }) | Err(RomError::NewtonFailure { .. }) => {
                ok[i] = false;
                diverged += 1;
            }
            Err(e) => return Err(e),
        }
    }

    if diverged * 100 > z * MAX_DIVERGED_PERCENT as usize {
        return Err(RomError::EnsembleDegenerate {
            diverged,
            total: z,
            percent: MAX_DIVERGED_PERCENT,
        });
    }

    Ok(ForecastSet {
        predictions,
        obs_times: obs_times.to_vec(),
        noise_applied: true,
        ok,
    })
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let z = m.nrows() as f64;
    DVector::from_fn(m.ncols(), |k, _| m.column(k).sum() / z)
}

/// Unbiased statistical cross-covariance of two sample sets (rows are
/// samples): C = X̃ᵀ Ỹ / (Z − 1) with column means removed.
pub fn statistical_covariance(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let z = x.nrows();
    if y.nrows() != z {
        return Err(RomError::DimensionMismatch(
            "covariance operands need equal sample counts".into(),
        ));
    }
    if z < 2 {
        return Err(RomError::InvalidArgument(
            "covariance needs at least 2 samples".into(),
        ));
    }
    let xm = column_means(x);
    let ym = column_means(y);
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= xm.transpose();
    }
    let mut yc = y.clone();
    for mut row in yc.row_iter_mut() {
        row -= ym.transpose();
    }
    Ok(xc.transpose() * yc / (z - 1) as f64)
}

/// K = C_{q,y} (C_y)†, with the pseudo-inverse truncated at `rel_cutoff`
/// times the largest eigenvalue of the symmetrized C_y.
/// Returns the gain and the effective rank used.
pub fn kalman_gain(
    c_qy: &DMatrix<f64>,
    c_y: &DMatrix<f64>,
    rel_cutoff: f64,
) -> Result<(DMatrix<f64>, usize)> {
    if c_qy.ncols() != c_y.nrows() || c_y.nrows() != c_y.ncols() {
        return Err(RomError::DimensionMismatch(
            "kalman gain operand shapes disagree".into(),
        ));
    }
    let (pinv, rank) = linalg::sym_pseudo_inverse(c_y, rel_cutoff);
    Ok((c_qy * pinv, rank))
}

#[derive(Debug, Clone, Copy)]
pub struct GainInfo {
    /// Effective rank used in the pseudo-inverse of C_y.
    pub rank: usize,
    /// Members that entered covariance estimation and the posterior.
    pub n_used: usize,
}

/// Member-wise smoother update with the statistically estimated gain.
/// Diverged members are dropped; the posterior contains the survivors.
pub fn enkf_update(
    ensemble: &Ensemble,
    forecasts: &ForecastSet,
    y: &DVector<f64>,
    rel_cutoff: f64,
) -> Result<(Ensemble, GainInfo)> {
    if !forecasts.noise_applied {
        return Err(RomError::InvalidArgument(
            "forecasts must carry the observation noise".into(),
        ));
    }
    let z = ensemble.size();
    if forecasts.predictions.nrows() != z || forecasts.ok.len() != z {
        return Err(RomError::DimensionMismatch(
            "forecast set does not match the ensemble".into(),
        ));
    }
    if y.len() != forecasts.predictions.ncols() {
        return Err(RomError::DimensionMismatch(format!(
            "data length {} does not match forecast length {}",
            y.len(),
            forecasts.predictions.ncols()
        )));
    }

    let keep: Vec<usize> = (0..z).filter(|&i| forecasts.ok[i]).collect();
    let n_used = keep.len();
    if n_used < 2 {
        return Err(RomError::EnsembleDegenerate {
            diverged: z - n_used,
            total: z,
            percent: MAX_DIVERGED_PERCENT,
        });
    }
    let q = ensemble.members.select_rows(keep.iter());
    let yf = forecasts.predictions.select_rows(keep.iter());

    let c_qy = statistical_covariance(&q, &yf)?;
    let c_y = statistical_covariance(&yf, &yf)?;
    let (gain, rank) = kalman_gain(&c_qy, &c_y, rel_cutoff)?;

    // Zero gain: the posterior is the (surviving) prior, bit for bit.
    let posterior = if rank == 0 {
        q
    } else {
        let mut post = q.clone();
        for (r, _) in keep.iter().enumerate() {
            let innov = y - yf.row(r).transpose();
            let delta = &gain * innov;
            for k in 0..post.ncols() {
                post[(r, k)] += delta[k];
            }
        }
        post
    };

    Ok((
        Ensemble {
            members: posterior,
            seed: ensemble.seed,
        },
        GainInfo { rank, n_used },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{sample_prior, GaussianPrior};
    use crate::tensor::Tensor3;

    fn scalar_prior(std: f64) -> GaussianPrior {
        GaussianPrior {
            mean: DVector::zeros(1),
            std: DVector::from_element(1, std),
            active_mask: vec![true],
        }
    }

    /// Linear-Gaussian reference problem: q ~ N(0,1), y = q + e, e ~ N(0,1).
    /// Posterior given y: N(y/2, 1/2).
    fn scalar_conjugate_forecast(z: usize, seed: u64) -> (Ensemble, ForecastSet) {
        let ens = sample_prior(&scalar_prior(1.0), z, seed).unwrap();
        let mut predictions = DMatrix::zeros(z, 1);
        for i in 0..z {
            let mut rng = derive_rng(seed, stream::FORECAST_NOISE, i as u64);
            let eps: f64 = rng.sample(StandardNormal);
            predictions[(i, 0)] = ens.members[(i, 0)] + eps;
        }
        let fc = ForecastSet {
            predictions,
            obs_times: vec![1.0],
            noise_applied: true,
            ok: vec![true; z],
        };
        (ens, fc)
    }

    #[test]
    fn two_point_variance_is_half() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let c = statistical_covariance(&x, &x).unwrap();
        assert!((c[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn covariance_of_constant_is_zero() {
        let x = DMatrix::from_fn(6, 2, |i, j| (i + j) as f64);
        let y = DMatrix::from_element(6, 3, 4.2);
        let c = statistical_covariance(&x, &y).unwrap();
        assert!(c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn covariance_transpose_symmetry() {
        let x = DMatrix::from_fn(9, 3, |i, j| ((i * 5 + j * 3) % 7) as f64 - 3.0);
        let y = DMatrix::from_fn(9, 2, |i, j| ((i * 2 + j) % 5) as f64);
        let cxy = statistical_covariance(&x, &y).unwrap();
        let cyx = statistical_covariance(&y, &x).unwrap();
        assert_eq!(cxy, cyx.transpose());
    }

    #[test]
    fn scalar_gain() {
        let c_qy = DMatrix::from_element(1, 1, 1.0);
        let c_y = DMatrix::from_element(1, 1, 2.0);
        let (k, rank) = kalman_gain(&c_qy, &c_y, 1e-10).unwrap();
        assert!((k[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(rank, 1);

        let (k0, rank0) = kalman_gain(&c_qy, &DMatrix::zeros(1, 1), 1e-10).unwrap();
        assert_eq!(k0[(0, 0)], 0.0);
        assert_eq!(rank0, 0);
    }

    #[test]
    fn conjugate_gain_approaches_half() {
        let (ens, fc) = scalar_conjugate_forecast(10_000, 11);
        let c_qy = statistical_covariance(&ens.members, &fc.predictions).unwrap();
        let c_y = statistical_covariance(&fc.predictions, &fc.predictions).unwrap();
        let (k, _) = kalman_gain(&c_qy, &c_y, 1e-10).unwrap();
        assert!(
            (k[(0, 0)] - 0.5).abs() < 0.05,
            "gain {} should be near 0.5",
            k[(0, 0)]
        );
    }

    #[test]
    fn conjugate_posterior_moments() {
        let (ens, fc) = scalar_conjugate_forecast(10_000, 5);
        let y = DVector::from_element(1, 1.0);
        let (post, info) = enkf_update(&ens, &fc, &y, 1e-10).unwrap();
        assert_eq!(info.n_used, 10_000);
        let mean = post.mean()[0];
        let var = post.variance()[0];
        assert!((mean - 0.5).abs() < 0.05, "posterior mean {mean}");
        assert!((var - 0.5).abs() < 0.05, "posterior variance {var}");
        // Posterior variance must not exceed the prior's (within noise).
        assert!(var <= ens.variance()[0] + 0.02);
    }

    #[test]
    fn zero_gain_returns_prior_bitwise() {
        let ens = sample_prior(&scalar_prior(1.0), 32, 3).unwrap();
        // Forecast completely uncorrelated with q: constant predictions.
        let fc = ForecastSet {
            predictions: DMatrix::from_element(32, 2, 7.0),
            obs_times: vec![0.5, 1.0],
            noise_applied: true,
            ok: vec![true; 32],
        };
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let (post, info) = enkf_update(&ens, &fc, &y, 1e-10).unwrap();
        assert_eq!(info.rank, 0);
        assert_eq!(post.members, ens.members);
    }

    #[test]
    fn noiseless_consistency_on_linear_map() {
        // Identity forward map, noiseless forecasts, y in the span:
        // every posterior member reproduces y exactly.
        let prior = GaussianPrior {
            mean: DVector::zeros(2),
            std: DVector::from_vec(vec![1.0, 2.0]),
            active_mask: vec![true; 2],
        };
        let ens = sample_prior(&prior, 200, 17).unwrap();
        let fc = ForecastSet {
            predictions: ens.members.clone(),
            obs_times: vec![1.0, 2.0],
            noise_applied: true,
            ok: vec![true; 200],
        };
        let y = DVector::from_vec(vec![0.3, -0.7]);
        let (post, _) = enkf_update(&ens, &fc, &y, 1e-12).unwrap();
        for i in 0..200 {
            assert!((post.members[(i, 0)] - y[0]).abs() < 1e-9);
            assert!((post.members[(i, 1)] - y[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_equivariance_of_update() {
        let (ens, fc) = scalar_conjugate_forecast(500, 23);
        let y = DVector::from_element(1, 0.8);
        let (post, _) = enkf_update(&ens, &fc, &y, 1e-10).unwrap();

        let c = 3.7;
        let fc_scaled = ForecastSet {
            predictions: &fc.predictions * c,
            obs_times: fc.obs_times.clone(),
            noise_applied: true,
            ok: fc.ok.clone(),
        };
        let (post_scaled, _) = enkf_update(&ens, &fc_scaled, &(&y * c), 1e-10).unwrap();
        let rel = (&post.members - &post_scaled.members).norm() / post.members.norm();
        assert!(rel <= 1e-10, "update is not scale invariant: {rel}");
    }

    #[test]
    fn update_is_deterministic() {
        let (ens, fc) = scalar_conjugate_forecast(300, 77);
        let y = DVector::from_element(1, -0.4);
        let (p1, _) = enkf_update(&ens, &fc, &y, 1e-10).unwrap();
        let (p2, _) = enkf_update(&ens, &fc, &y, 1e-10).unwrap();
        assert_eq!(p1.members, p2.members);
    }

    #[test]
    fn forecast_identical_members_yield_identical_rows() {
        // All members carry the true correction, zero noise: every forecast
        // row equals the synthetic-truth observation.
        let n = 2;
        let system = ReducedSystem {
            gram: DMatrix::identity(n, n),
            diffusion: -DMatrix::identity(n, n),
            convection: Tensor3::zeros(n),
            viscosity: 1.0,
        };
        let q_true = CorrectionVector::sparse(n, &[(0, 0.5)]).unwrap(); // Ã_00 = 0.5
        let z = 4;
        let mut members = DMatrix::zeros(z, q_true.len());
        for i in 0..z {
            members.row_mut(i).copy_from(&q_true.values().transpose());
        }
        let ens = Ensemble { members, seed: 0 };
        let a0 = DVector::from_vec(vec![1.0, -1.0]);
        let obs_times = vec![0.25, 0.5, 0.75, 1.0];
        let fc = forecast_ensemble(
            &ens,
            &system,
            0.0,
            &a0,
            &obs_times,
            4,
            &NoiseModel::zero(n),
            9,
        )
        .unwrap();
        assert!(fc.noise_applied);
        assert_eq!(fc.n_ok(), z);

        let (grid, idx) = refine_times(&[0.0, 0.25, 0.5, 0.75, 1.0], 4);
        let truth = integrate_rom(&system, &q_true, &a0, &grid).unwrap();
        for i in 0..z {
            let mut col = 0;
            for &gi in idx.iter().skip(1) {
                for j in 0..n {
                    assert_eq!(fc.predictions[(i, col)], truth.states[(gi, j)]);
                    col += 1;
                }
            }
        }
        // Zero-variance prior, zero noise: all rows identical.
        for i in 1..z {
            assert_eq!(fc.predictions.row(i), fc.predictions.row(0));
        }
    }

    #[test]
    fn forecast_noise_std_matches_model() {
        let n = 1;
        let system = ReducedSystem {
            gram: DMatrix::identity(n, n),
            diffusion: DMatrix::zeros(n, n),
            convection: Tensor3::zeros(n),
            viscosity: 1.0,
        };
        // Frozen (zero-variance) corrections so prediction spread is pure noise.
        let z = 10_000;
        let ens = Ensemble {
            members: DMatrix::zeros(z, CorrectionVector::param_len(n)),
            seed: 0,
        };
        let a0 = DVector::from_element(1, 2.0);
        let sigma = 0.35;
        let noise = NoiseModel {
            std_per_mode: DVector::from_element(1, sigma),
        };
        let fc = forecast_ensemble(&ens, &system, 0.0, &a0, &[1.0, 2.0], 2, &noise, 31).unwrap();
        for col in 0..2 {
            let mean = fc.predictions.column(col).sum() / z as f64;
            let std = (fc
                .predictions
                .column(col)
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / (z - 1) as f64)
                .sqrt();
            assert!(
                (std - sigma).abs() / sigma < 0.05,
                "column {col}: sample noise std {std} vs {sigma}"
            );
        }
    }

    #[test]
    fn diverging_members_fail_the_forecast() {
        // a' = a^2 blows up for a0 = 1 before t = 1.5; every member carries
        // the blow-up so the 10% threshold trips.
        let system = ReducedSystem {
            gram: DMatrix::identity(1, 1),
            diffusion: DMatrix::zeros(1, 1),
            convection: Tensor3::from_vec(1, vec![-1.0]),
            viscosity: 1.0,
        };
        let z = 10;
        let ens = Ensemble {
            members: DMatrix::zeros(z, 2),
            seed: 0,
        };
        let res = forecast_ensemble(
            &ens,
            &system,
            0.0,
            &DVector::from_element(1, 1.0),
            &[1.5],
            300,
            &NoiseModel::zero(1),
            0,
        );
        match res {
            Err(RomError::EnsembleDegenerate { diverged, total, .. }) => {
                assert_eq!(total, z);
                assert!(diverged > 0);
            }
            other => panic!("expected degenerate ensemble, got {other:?}"),
        }
    }

    #[test]
    fn posterior_mean_error_decays_like_sqrt_z() {
        // Conjugate scalar problem across Z in {1e2, 1e3, 1e4}, averaged
        // over repeats: log-log slope of the posterior-mean error vs Z
        // should be -0.5 +- 0.15.
        let sizes = [100usize, 1000, 10_000];
        let repeats = 16;
        let y = DVector::from_element(1, 1.0);
        let mut mean_errs = Vec::new();
        for (si, &z) in sizes.iter().enumerate() {
            let mut acc = 0.0;
            for r in 0..repeats {
                let seed = 1000 + (si * repeats + r) as u64;
                let (ens, fc) = scalar_conjugate_forecast(z, seed);
                let (post, _) = enkf_update(&ens, &fc, &y, 1e-10).unwrap();
                acc += (post.mean()[0] - 0.5).abs();
            }
            mean_errs.push(acc / repeats as f64);
        }
        let slope = (mean_errs[2].ln() - mean_errs[0].ln())
            / ((sizes[2] as f64).ln() - (sizes[0] as f64).ln());
        assert!(
            (slope + 0.5).abs() <= 0.15,
            "convergence slope {slope}, errors {mean_errs:?}"
        );
    }
}
