//! Pipeline configuration: a single TOML file with nested sections.
//! Unknown keys are hard errors, so typos in tolerance names fail fast.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every random stream in the pipeline derives from it.
    #[serde(default)]
    pub seed: u64,
    /// Default output directory; the CLI `--output` flag overrides it.
    #[serde(default)]
    pub output_dir: Option<String>,
    pub fom: FomConfig,
    pub pod: PodConfig,
    #[serde(default)]
    pub rom: RomConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
    pub smoother: SmootherConfig,
    #[serde(default)]
    pub sensitivity: SensitivityConfig,
    #[serde(default)]
    pub quantiles: QuantilesConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FomConfig {
    /// 1D viscous Burgers snapshot generator.
    Burgers {
        n_cells: usize,
        x_min: f64,
        x_max: f64,
        viscosity: f64,
        initial: InitialCondition,
        boundary: [f64; 2],
        t_end: f64,
        dt: f64,
        save_every: usize,
        #[serde(default)]
        discard_before: Option<f64>,
    },
    /// Synthetic quadratic ODE with a known sparse correction.
    QuadraticTruth {
        dim: usize,
        viscosity: f64,
        /// Seed for the reproducible base system (independent of the
        /// pipeline's sampling seed).
        system_seed: u64,
        /// Diagonal decay rate of the base diffusion operator (-decay * I).
        linear_decay: f64,
        /// Per-mode increment of the decay rate: mode k decays at
        /// linear_decay * (1 + decay_spread * k).
        #[serde(default)]
        decay_spread: f64,
        /// Antisymmetric base coupling of mode pairs (2p, 2p+1) with rate
        /// base_rotation * (p + 1), mimicking oscillatory wake modes.
        #[serde(default)]
        base_rotation: f64,
        /// Magnitude of the energy-neutral random convection tensor.
        convection_scale: f64,
        /// Non-zero entries of the true correction, by flat index.
        #[serde(default)]
        corrections: Vec<CorrectionEntry>,
        a0: Vec<f64>,
        t_end: f64,
        /// Spacing of the saved "measurement" trajectory.
        dt_save: f64,
        #[serde(default)]
        discard_before: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionEntry {
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// amplitude * sin(pi * periods * (x - x_min)/(x_max - x_min))
    Sin { amplitude: f64, periods: f64 },
    Gaussian {
        amplitude: f64,
        center: f64,
        width: f64,
    },
    Constant { value: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodConfig {
    pub n_modes: usize,
    #[serde(default)]
    pub mean_center: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RomConfig {
    /// Integrator steps per observation interval.
    pub substeps: usize,
}

impl Default for RomConfig {
    fn default() -> Self {
        RomConfig { substeps: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub relative_scale: f64,
    pub scale_is_variance: bool,
    pub floor: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            relative_scale: 0.01,
            scale_is_variance: false,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub relative_scale: f64,
    pub floor: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            relative_scale: 0.001,
            floor: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Fraction of the observed horizon used for training when explicit
    /// times are not given.
    pub fraction: f64,
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            fraction: 0.2,
            t_start: None,
            t_end: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmootherKind {
    Enkf,
    Pce,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmootherConfig {
    pub kind: SmootherKind,
    /// EnKF ensemble size Z.
    pub ensemble_size: usize,
    /// Total polynomial degree of the PCE smoother.
    #[serde(default = "default_pce_order")]
    pub pce_order: usize,
    /// Monte Carlo sample count for the non-intrusive PCE regression;
    /// defaults to the ensemble size (and is forced to it in `both` mode so
    /// the two smoothers see identical prior samples).
    #[serde(default)]
    pub pce_samples: Option<usize>,
    /// Relative eigenvalue cutoff of the pseudo-inverse in the gain.
    #[serde(default = "default_gain_cutoff")]
    pub gain_cutoff: f64,
    #[serde(default)]
    pub rvm: RvmSection,
}

fn default_pce_order() -> usize {
    2
}

fn default_gain_cutoff() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RvmSection {
    pub max_iter: usize,
    pub tol: f64,
    pub prune_threshold: f64,
    pub fixed_sigma2: Option<f64>,
    pub sigma2_floor: f64,
}

impl Default for RvmSection {
    fn default() -> Self {
        RvmSection {
            max_iter: 500,
            tol: 1e-6,
            prune_threshold: 1e12,
            fixed_sigma2: None,
            sigma2_floor: 1e-14,
        }
    }
}

impl RvmSection {
    pub fn to_config(&self) -> crate::rvm::RvmConfig {
        crate::rvm::RvmConfig {
            max_iter: self.max_iter,
            tol: self.tol,
            prune_threshold: self.prune_threshold,
            fixed_sigma2: self.fixed_sigma2,
            sigma2_floor: self.sigma2_floor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityConfig {
    pub enabled: bool,
    /// Pilot ensemble size for the screening pass.
    pub pilot_size: usize,
    /// Variance-ratio threshold: parameters with J_k below it stay active.
    pub threshold: f64,
    /// Build the screening gain from a sparsely regressed linear map
    /// instead of raw ensemble statistics.
    pub use_improved_gain: bool,
    /// Iteration cap for the per-output linear-map regressions.
    pub rvm_max_iter: usize,
    /// The pilot assimilates every `obs_stride`-th observation time; a
    /// coarse pilot keeps the informed subspace low-dimensional and the
    /// screening sharp.
    pub obs_stride: usize,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            enabled: true,
            pilot_size: 200,
            threshold: 0.95,
            use_improved_gain: true,
            rvm_max_iter: 30,
            obs_stride: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantilesConfig {
    pub enabled: bool,
    /// Trajectory samples for the bands (ensemble members or germ draws).
    pub samples: usize,
    pub lower: f64,
    pub upper: f64,
}

impl Default for QuantilesConfig {
    fn default() -> Self {
        QuantilesConfig {
            enabled: true,
            samples: 1000,
            lower: 0.005,
            upper: 0.995,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RomError::io(path.display().to_string(), e))?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| RomError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.fom {
            FomConfig::Burgers {
                n_cells,
                t_end,
                dt,
                save_every,
                viscosity,
                ..
            } => {
                if *n_cells == 0 || *t_end <= 0.0 || *dt <= 0.0 || *save_every == 0 {
                    return Err(RomError::Config(
                        "burgers fom needs positive n_cells, t_end, dt, save_every".into(),
                    ));
                }
                if *viscosity < 0.0 {
                    return Err(RomError::Config("viscosity must be non-negative".into()));
                }
            }
            FomConfig::QuadraticTruth {
                dim,
                a0,
                t_end,
                dt_save,
                ..
            } => {
                if *dim == 0 || a0.len() != *dim {
                    return Err(RomError::Config(format!(
                        "quadratic truth needs a0 with dim = {dim} entries"
                    )));
                }
                if *t_end <= 0.0 || *dt_save <= 0.0 {
                    return Err(RomError::Config(
                        "quadratic truth needs positive t_end and dt_save".into(),
                    ));
                }
            }
        }
        if self.pod.n_modes == 0 {
            return Err(RomError::Config("pod.n_modes must be positive".into()));
        }
        if self.rom.substeps == 0 {
            return Err(RomError::Config("rom.substeps must be positive".into()));
        }
        if !(self.train.fraction > 0.0 && self.train.fraction <= 1.0) {
            return Err(RomError::Config(
                "train.fraction must be in (0, 1]".into(),
            ));
        }
        if self.smoother.ensemble_size < 2 {
            return Err(RomError::Config(
                "smoother.ensemble_size must be at least 2".into(),
            ));
        }
        if !(self.quantiles.lower < self.quantiles.upper
            && self.quantiles.lower > 0.0
            && self.quantiles.upper < 1.0)
        {
            return Err(RomError::Config(
                "quantile levels must satisfy 0 < lower < upper < 1".into(),
            ));
        }
        if self.sensitivity.enabled && !(0.0 < self.sensitivity.threshold && self.sensitivity.threshold < 1.0)
        {
            return Err(RomError::Config(
                "sensitivity.threshold must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Stable content hash of the full configuration (with the effective
    /// seed), used to content-address stage artifacts.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(canonical.as_bytes()))
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7

[fom]
kind = "quadratic_truth"
dim = 3
viscosity = 1.0
system_seed = 1
linear_decay = 0.5
convection_scale = 0.3
a0 = [1.0, 0.5, -0.25]
t_end = 10.0
dt_save = 0.1
corrections = [{ index = 0, value = 0.2 }]

[pod]
n_modes = 3

[smoother]
kind = "enkf"
ensemble_size = 100
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        config.validate().unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.prior.relative_scale, 0.01);
        assert_eq!(config.noise.relative_scale, 0.001);
        assert_eq!(config.train.fraction, 0.2);
        assert_eq!(config.smoother.pce_order, 2);
        assert!(config.sensitivity.enabled);
        assert_eq!(config.quantiles.lower, 0.005);
    }

    #[test]
    fn unknown_keys_fail_fast() {
        let bad = MINIMAL.replace("[pod]\nn_modes = 3", "[pod]\nn_modes = 3\nn_modez = 4");
        let err = toml::from_str::<PipelineConfig>(&bad).unwrap_err();
        assert!(err.to_string().contains("n_modez"), "{err}");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        let b: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let mut c: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        c.seed = 8;
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn invalid_windows_are_rejected() {
        let mut config: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        config.quantiles.lower = 0.99;
        config.quantiles.upper = 0.5;
        assert!(config.validate().is_err());
    }
}
