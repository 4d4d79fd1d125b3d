//! Gaussian prior over the correction vector and the observation-noise
//! model.
//!
//! The prior is zero-mean with a per-block standard deviation derived from
//! the magnitude of the projected operators (a configurable fraction of the
//! mean absolute entry of A_r for the Ã block and of C_r for the C̃ block).
//! The noise model is diagonal, scaled per mode from the peak measurement
//! amplitude.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::enkf::Ensemble;
use crate::error::{Result, RomError};
use crate::pod::MeasurementSet;
use crate::rng::{derive_rng, stream};
use crate::rom::{CorrectionVector, ReducedSystem};

/// Independent Gaussian prior on the flattened correction parameters.
/// `active_mask` marks coordinates the smoothers are allowed to update;
/// inactive coordinates stay frozen at their mean.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
    pub active_mask: Vec<bool>,
}

impl GaussianPrior {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.len() == 0
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.active_mask[k]).collect()
    }

    /// Marginal variance actually carried by each coordinate: std² on
    /// active entries, zero on frozen ones.
    pub fn effective_variance(&self) -> DVector<f64> {
        DVector::from_fn(self.len(), |k, _| {
            if self.active_mask[k] {
                self.std[k] * self.std[k]
            } else {
                0.0
            }
        })
    }

    pub fn with_mask(&self, active: &[usize]) -> GaussianPrior {
        let mut mask = vec![false; self.len()];
        for &k in active {
            mask[k] = true;
        }
        GaussianPrior {
            mean: self.mean.clone(),
            std: self.std.clone(),
            active_mask: mask,
        }
    }
}

/// Diagonal observation-noise model, one standard deviation per mode.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub std_per_mode: DVector<f64>,
}

impl NoiseModel {
    pub fn zero(n_modes: usize) -> Self {
        NoiseModel {
            std_per_mode: DVector::zeros(n_modes),
        }
    }

    /// Variance diagonal for observations flattened time-major, mode-minor.
    pub fn flatten_variance(&self, n_times: usize) -> DVector<f64> {
        let n_r = self.std_per_mode.len();
        DVector::from_fn(n_times * n_r, |i, _| {
            let s = self.std_per_mode[i % n_r];
            s * s
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PriorOptions {
    pub relative_scale: f64,
    /// Reinterpret `relative_scale * mean|block|` as a variance instead of a
    /// standard deviation.
    pub scale_is_variance: bool,
    /// Std floor for degenerate (near-zero) operator blocks.
    pub floor: f64,
}

impl Default for PriorOptions {
    fn default() -> Self {
        PriorOptions {
            relative_scale: 0.01,
            scale_is_variance: false,
            floor: 1e-6,
        }
    }
}

/// Builds the zero-mean Gaussian prior for the correction vector of
/// `system`, one scale per operator block.
pub fn build_prior(
    system: &ReducedSystem,
    opts: &PriorOptions,
) -> Result<(GaussianPrior, Vec<String>)> {
    if opts.relative_scale <= 0.0 || !opts.relative_scale.is_finite() {
        return Err(RomError::InvalidArgument(
            "prior relative_scale must be positive".into(),
        ));
    }
    let n = system.n_modes();
    let s = CorrectionVector::param_len(n);
    let mut warnings = Vec::new();

    let mean_abs = |it: &mut dyn Iterator<Item = f64>| -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for v in it {
            sum += v.abs();
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };
    let a_mean = mean_abs(&mut system.diffusion.iter().cloned());
    let c_mean = mean_abs(&mut system.convection.iter());

    let block_std = |block_mean: f64, name: &str, warnings: &mut Vec<String>| -> f64 {
        if block_mean < 1e-14 {
            warnings.push(format!(
                "{name} operator block is degenerate (mean |entry| = {block_mean:e}); prior std floored at {:e}",
                opts.floor
            ));
            opts.floor
        } else {
            let base = opts.relative_scale * block_mean;
            if opts.scale_is_variance {
                base.sqrt()
            } else {
                base
            }
        }
    };
    let a_std = block_std(a_mean, "diffusion", &mut warnings);
    let c_std = block_std(c_mean, "convection", &mut warnings);

    let std = DVector::from_fn(s, |k, _| if k < n * n { a_std } else { c_std });
    Ok((
        GaussianPrior {
            mean: DVector::zeros(s),
            std,
            active_mask: vec![true; s],
        },
        warnings,
    ))
}

/// Per-mode observation noise: `relative_scale` times the peak |coefficient|
/// of each mode. A relative scale of zero is allowed but flagged, since the
/// Kalman gain conditioning degrades without noise.
pub fn default_noise(
    measurements: &MeasurementSet,
    relative_scale: f64,
    floor: f64,
) -> Result<(NoiseModel, Vec<String>)> {
    if measurements.n_times() == 0 {
        return Err(RomError::InvalidArgument(
            "noise model needs a non-empty measurement set".into(),
        ));
    }
    if relative_scale < 0.0 || !relative_scale.is_finite() {
        return Err(RomError::InvalidArgument(
            "noise relative_scale must be non-negative".into(),
        ));
    }
    let mut warnings = Vec::new();
    if relative_scale == 0.0 {
        warnings.push(
            "noise scale is zero: the forecast covariance may be ill-conditioned".to_string(),
        );
        return Ok((NoiseModel::zero(measurements.n_modes()), warnings));
    }
    let mut std = DVector::zeros(measurements.n_modes());
    for j in 0..measurements.n_modes() {
        let peak = measurements
            .coefficients
            .column(j)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            warnings.push(format!("mode {j} is identically zero; noise std floored"));
            std[j] = floor;
        } else {
            std[j] = relative_scale * peak;
        }
    }
    Ok((NoiseModel { std_per_mode: std }, warnings))
}

/// Draws `count` i.i.d. samples of the prior. Member `i`'s draws depend only
/// on `(seed, i)`; inactive coordinates are fixed at their mean.
pub fn sample_prior(prior: &GaussianPrior, count: usize, seed: u64) -> Result<Ensemble> {
    if count < 2 {
        return Err(RomError::InvalidArgument(
            "ensemble covariance needs at least 2 members".into(),
        ));
    }
    let s = prior.len();
    let mut members = DMatrix::zeros(count, s);
    for i in 0..count {
        let mut rng = derive_rng(seed, stream::PRIOR_SAMPLES, i as u64);
        for k in 0..s {
            // Draw unconditionally so the mask does not reshuffle the stream.
            let z: f64 = rng.sample(StandardNormal);
            members[(i, k)] = if prior.active_mask[k] {
                prior.mean[k] + prior.std[k] * z
            } else {
                prior.mean[k]
            };
        }
    }
    Ok(Ensemble { members, seed })
}
