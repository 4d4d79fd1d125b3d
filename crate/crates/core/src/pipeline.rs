//! Config-driven orchestration of the full workflow:
//! simulate → POD → assemble → prior → screen → identify → validate → report.
//!
//! Every stage writes its artifacts into the output directory and records a
//! content hash (derived from the effective configuration) in
//! `stage_hashes.json`; re-running a stage whose hash and files are intact
//! loads the artifacts back instead of recomputing. All randomness derives
//! from the config seed, so a run is reproducible byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{fnv1a64, FomConfig, InitialCondition, PipelineConfig, SmootherKind};
use crate::enkf::{enkf_update, forecast_ensemble, refine_times, Ensemble};
use crate::error::{Result, RomError};
use crate::fom::{simulate_burgers, simulate_quadratic_truth, BurgersRun, Grid1D, QuadraticTruth, SnapshotMatrix};
use crate::io;
use crate::pce::{build_multiindex, pce_moments, gmk_pce_update, PceExpansion};
use crate::pod::{compute_pod, project_snapshots, reconstruct, MeasurementSet, PodBasis};
use crate::prior::{build_prior, default_noise, sample_prior, GaussianPrior, NoiseModel, PriorOptions};
use crate::rng::{derive_rng, stream};
use crate::rom::{
    assemble_reduced_operators, integrate_rom, integrate_rom_lenient, CorrectionVector,
    ReducedSystem,
};
use crate::rvm::{fit_forecast_pce, SparsityRow};
use crate::sensitivity::{
    estimate_linear_map, improved_posterior_variance, screen_variables, sobol_first_order,
    variance_ratio, SensitivityReport,
};
use crate::tensor::Tensor3;

/// Quantile bands of one amplitude mode over time.
#[derive(Debug, Clone)]
pub struct ModeBands {
    pub mode: usize,
    pub times: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Posterior representation the quantile bands are sampled from.
pub enum Posterior<'a> {
    Ensemble(&'a DMatrix<f64>),
    Pce(&'a PceExpansion),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub hash: String,
    /// "computed" or "cached"
    pub status: String,
}

/// Everything the pipeline produced, for programmatic consumers; the CSV and
/// JSON artifacts carry the same content on disk.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub times: Vec<f64>,
    pub eps_uncorrected: Vec<f64>,
    pub eps_projection: Vec<f64>,
    pub eps_enkf: Option<Vec<f64>>,
    pub eps_pce: Option<Vec<f64>>,
    pub train_window: (f64, f64),
    pub validate_window: (f64, f64),
    pub sensitivity: Option<SensitivityReport>,
    pub sparsity: Option<Vec<SparsityRow>>,
    pub bands: Option<Vec<ModeBands>>,
    pub correction_enkf: Option<CorrectionVector>,
    pub correction_pce: Option<CorrectionVector>,
    pub posterior_variance_enkf: Option<DVector<f64>>,
    pub posterior_variance_pce: Option<DVector<f64>>,
    pub stages: Vec<StageRecord>,
    pub config_hash: String,
    pub warnings: Vec<String>,
}

impl RunReport {
    fn window_mean(times: &[f64], values: &[f64], window: (f64, f64)) -> Option<f64> {
        let vals: Vec<f64> = times
            .iter()
            .zip(values.iter())
            .filter(|(t, v)| **t >= window.0 && **t <= window.1 && v.is_finite())
            .map(|(_, v)| *v)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Mean of a series over the validation window; NaN entries (diverged
    /// tail, undefined norms) are excluded.
    pub fn validation_mean(&self, series: &[f64]) -> Option<f64> {
        Self::window_mean(&self.times, series, self.validate_window)
    }
}

// ---------------------------------------------------------------------------
// pipeline driver

pub struct Pipeline {
    config: PipelineConfig,
    out_dir: PathBuf,
    config_hash: String,
    manifest: BTreeMap<String, String>,
    stages: Vec<StageRecord>,
    warnings: Vec<String>,
}

/// Stages in execution order.
pub const STAGE_NAMES: &[&str] = &[
    "simulate",
    "pod",
    "rom",
    "sensitivity",
    "identify",
    "validate",
    "report",
];

impl Pipeline {
    pub fn new(config: PipelineConfig, out_dir: &Path) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(out_dir)
            .map_err(|e| RomError::io(out_dir.display().to_string(), e))?;
        let manifest_path = out_dir.join("stage_hashes.json");
        let manifest = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path)
                .map_err(|e| RomError::io(manifest_path.display().to_string(), e))?;
            serde_json::from_str(&text).unwrap_or_default()
        } else {
            BTreeMap::new()
        };
        let config_hash = config.content_hash();
        Ok(Pipeline {
            config,
            out_dir: out_dir.to_path_buf(),
            config_hash,
            manifest,
            stages: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    fn stage_hash(&self, name: &str) -> String {
        format!(
            "{:016x}",
            fnv1a64(format!("{}:{name}", self.config_hash).as_bytes())
        )
    }

    fn stage_is_current(&self, name: &str, files: &[&str]) -> bool {
        self.manifest.get(name) == Some(&self.stage_hash(name))
            && files.iter().all(|f| self.out_dir.join(f).exists())
    }

    fn record_stage(&mut self, name: &str, cached: bool) {
        let hash = self.stage_hash(name);
        self.manifest.insert(name.to_string(), hash.clone());
        self.stages.push(StageRecord {
            name: name.to_string(),
            hash,
            status: if cached { "cached" } else { "computed" }.to_string(),
        });
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.out_dir.join("stage_hashes.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| RomError::io(path.display().to_string(), e))
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }

    // -- simulate ------------------------------------------------------------

    pub fn stage_simulate(&mut self) -> Result<SnapshotMatrix> {
        let name = "simulate";
        if self.stage_is_current(name, &["snapshots.txt"]) {
            let snaps = io::read_snapshots(&self.path("snapshots.txt"))?;
            self.record_stage(name, true);
            return Ok(snaps);
        }
        let snaps = generate_snapshots(&self.config)?;
        io::write_snapshots(&self.path("snapshots.txt"), &snaps)?;
        self.record_stage(name, false);
        self.save_manifest()?;
        Ok(snaps)
    }

    // -- pod -----------------------------------------------------------------

    pub fn stage_pod(&mut self) -> Result<(SnapshotMatrix, PodBasis, MeasurementSet)> {
        let snaps = self.stage_simulate()?;
        let name = "pod";
        if self.stage_is_current(name, &["basis.txt", "coefficients.txt"]) {
            let basis = io::read_basis(&self.path("basis.txt"))?;
            let coeff_snaps = io::read_snapshots(&self.path("coefficients.txt"))?;
            let measurements = MeasurementSet {
                coefficients: coeff_snaps.values.transpose(),
                times: coeff_snaps.times.clone(),
                noise_std: DVector::zeros(basis.n_modes()),
            };
            self.record_stage(name, true);
            return Ok((snaps, basis, measurements));
        }
        let (basis, measurements) = build_basis_and_measurements(&self.config, &snaps)?;
        io::write_basis(&self.path("basis.txt"), &basis)?;
        // Projected coefficients in the snapshot format: modes as rows.
        let coeff_snaps = SnapshotMatrix::new(
            measurements.coefficients.transpose(),
            measurements.times.clone(),
            DVector::from_element(basis.n_modes(), 1.0),
        )?;
        io::write_snapshots(&self.path("coefficients.txt"), &coeff_snaps)?;
        self.record_stage(name, false);
        self.save_manifest()?;
        Ok((snaps, basis, measurements))
    }

    // -- rom -----------------------------------------------------------------

    pub fn stage_rom(&mut self) -> Result<RomStage> {
        let (snaps, basis, measurements) = self.stage_pod()?;
        let name = "rom";
        if self.stage_is_current(name, &["rom.txt"]) {
            let system = io::read_reduced_system(&self.path("rom.txt"))?;
            self.record_stage(name, true);
            return Ok(RomStage {
                snaps,
                basis,
                measurements,
                system,
            });
        }
        let system = assemble_system(&self.config, &basis)?;
        io::write_reduced_system(&self.path("rom.txt"), &system)?;
        self.record_stage(name, false);
        self.save_manifest()?;
        Ok(RomStage {
            snaps,
            basis,
            measurements,
            system,
        })
    }

    // -- sensitivity ----------------------------------------------------------

    pub fn stage_sensitivity(&mut self) -> Result<SensitivityStage> {
        let rom = self.stage_rom()?;
        let setup = IdentifySetup::prepare(&self.config, &rom, &mut self.warnings)?;

        if !self.config.sensitivity.enabled {
            let all: Vec<usize> = (0..setup.prior.len()).collect();
            return Ok(SensitivityStage {
                rom,
                setup,
                report: None,
                active: all,
            });
        }

        let name = "sensitivity";
        if self.stage_is_current(name, &["screening.json", "sensitivity.csv"]) {
            let text = std::fs::read_to_string(self.path("screening.json"))
                .map_err(|e| RomError::io("screening.json", e))?;
            let stored: StoredScreening = serde_json::from_str(&text)
                .map_err(|e| RomError::Config(format!("screening.json: {e}")))?;
            self.record_stage(name, true);
            let report = stored.into_report(self.config.sensitivity.threshold);
            let active = report.active_set.clone();
            return Ok(SensitivityStage {
                rom,
                setup,
                report: Some(report),
                active,
            });
        }

        let report = run_screening(&self.config, &rom, &setup, &mut self.warnings)?;
        let stored = StoredScreening::from_report(&report);
        let text = serde_json::to_string_pretty(&stored).expect("screening serializes");
        std::fs::write(self.path("screening.json"), text)
            .map_err(|e| RomError::io("screening.json", e))?;
        write_sensitivity_csv(&self.path("sensitivity.csv"), &report)?;
        self.record_stage(name, false);
        self.save_manifest()?;
        let active = report.active_set.clone();
        Ok(SensitivityStage {
            rom,
            setup,
            report: Some(report),
            active,
        })
    }

    // -- identify ---------------------------------------------------------------

    pub fn stage_identify(&mut self) -> Result<IdentifyStage> {
        let sens = self.stage_sensitivity()?;
        let kind = self.config.smoother.kind;
        let name = "identify";

        let mut files: Vec<&str> = Vec::new();
        if matches!(kind, SmootherKind::Enkf | SmootherKind::Both) {
            files.extend(["posterior_ensemble.txt", "correction_enkf.txt", "identify_enkf.json"]);
        }
        if matches!(kind, SmootherKind::Pce | SmootherKind::Both) {
            files.extend([
                "posterior_pce.txt",
                "correction_pce.txt",
                "identify_pce.json",
                "sparsity.csv",
            ]);
        }

        if self.stage_is_current(name, &files) {
            let enkf = if matches!(kind, SmootherKind::Enkf | SmootherKind::Both) {
                let members = io::read_ensemble(&self.path("posterior_ensemble.txt"))?;
                let correction = io::read_correction(&self.path("correction_enkf.txt"))?;
                let text = std::fs::read_to_string(self.path("identify_enkf.json"))
                    .map_err(|e| RomError::io("identify_enkf.json", e))?;
                let meta: SmootherMeta = serde_json::from_str(&text)
                    .map_err(|e| RomError::Config(format!("identify_enkf.json: {e}")))?;
                Some(EnkfOutcome {
                    posterior: Ensemble {
                        members,
                        seed: self.config.seed,
                    },
                    correction,
                    posterior_variance: DVector::from_vec(meta.posterior_variance),
                    gain_rank: meta.gain_rank,
                    n_used: meta.n_used,
                })
            } else {
                None
            };
            let pce = if matches!(kind, SmootherKind::Pce | SmootherKind::Both) {
                let expansion = io::read_pce(&self.path("posterior_pce.txt"))?;
                let correction = io::read_correction(&self.path("correction_pce.txt"))?;
                let text = std::fs::read_to_string(self.path("identify_pce.json"))
                    .map_err(|e| RomError::io("identify_pce.json", e))?;
                let meta: SmootherMeta = serde_json::from_str(&text)
                    .map_err(|e| RomError::Config(format!("identify_pce.json: {e}")))?;
                let sparsity = read_sparsity_csv(&self.path("sparsity.csv"))?;
                Some(PceOutcome {
                    posterior: expansion,
                    correction,
                    posterior_variance: DVector::from_vec(meta.posterior_variance),
                    gain_rank: meta.gain_rank,
                    sparsity,
                    forecast_sobol: meta.forecast_sobol.map(DVector::from_vec),
                })
            } else {
                None
            };
            self.record_stage(name, true);
            return Ok(IdentifyStage { sens, enkf, pce });
        }

        let (enkf, pce) = run_identification(&self.config, &sens, &mut self.warnings)?;
        if let Some(out) = &enkf {
            io::write_ensemble(&self.path("posterior_ensemble.txt"), &out.posterior.members)?;
            io::write_correction(&self.path("correction_enkf.txt"), &out.correction)?;
            let meta = SmootherMeta {
                posterior_variance: out.posterior_variance.iter().cloned().collect(),
                gain_rank: out.gain_rank,
                n_used: out.n_used,
                forecast_sobol: None,
            };
            std::fs::write(
                self.path("identify_enkf.json"),
                serde_json::to_string_pretty(&meta).expect("meta serializes"),
            )
            .map_err(|e| RomError::io("identify_enkf.json", e))?;
        }
        if let Some(out) = &pce {
            io::write_pce(&self.path("posterior_pce.txt"), &out.posterior)?;
            io::write_correction(&self.path("correction_pce.txt"), &out.correction)?;
            let meta = SmootherMeta {
                posterior_variance: out.posterior_variance.iter().cloned().collect(),
                gain_rank: out.gain_rank,
                n_used: 0,
                forecast_sobol: out
                    .forecast_sobol
                    .as_ref()
                    .map(|v| v.iter().cloned().collect()),
            };
            std::fs::write(
                self.path("identify_pce.json"),
                serde_json::to_string_pretty(&meta).expect("meta serializes"),
            )
            .map_err(|e| RomError::io("identify_pce.json", e))?;
            write_sparsity_csv(&self.path("sparsity.csv"), &out.sparsity)?;
        }
        self.record_stage(name, false);
        self.save_manifest()?;
        Ok(IdentifyStage { sens, enkf, pce })
    }

    // -- validate -----------------------------------------------------------

    pub fn stage_validate(&mut self) -> Result<ValidateStage> {
        let identify = self.stage_identify()?;
        let name = "validate";
        if self.stage_is_current(name, &["errors.csv"]) {
            let table = read_errors_csv(&self.path("errors.csv"))?;
            self.record_stage(name, true);
            return Ok(ValidateStage { identify, table });
        }
        let table = run_validation(&self.config, &identify, &mut self.warnings)?;
        write_errors_csv(&self.path("errors.csv"), &table)?;
        self.record_stage(name, false);
        self.save_manifest()?;
        Ok(ValidateStage { identify, table })
    }

    // -- report (quantiles + report.json) -------------------------------------

    pub fn stage_report(&mut self) -> Result<RunReport> {
        let validate = self.stage_validate()?;
        let name = "report";

        let bands = if self.config.quantiles.enabled {
            Some(self.quantile_bands(&validate)?)
        } else {
            None
        };
        if let Some(bands) = &bands {
            for b in bands {
                write_band_csv(&self.path(&format!("quantiles_mode{}.csv", b.mode)), b)?;
            }
        }

        let report = self.assemble_report(&validate, bands)?;
        let json = report_json(&self.config, &report);
        std::fs::write(
            self.path("report.json"),
            serde_json::to_string_pretty(&json).expect("report serializes"),
        )
        .map_err(|e| RomError::io("report.json", e))?;
        std::fs::write(self.path("plot_report.py"), PLOT_STUB)
            .map_err(|e| RomError::io("plot_report.py", e))?;
        self.record_stage(name, false);
        self.save_manifest()?;
        Ok(report)
    }

    fn quantile_bands(&mut self, validate: &ValidateStage) -> Result<Vec<ModeBands>> {
        let identify = &validate.identify;
        let setup = &identify.sens.setup;
        let system = &identify.sens.rom.system;
        let q = &self.config.quantiles;
        let window = &setup.window_times;
        if let Some(enkf) = &identify.enkf {
            compute_quantile_bands(
                Posterior::Ensemble(&enkf.posterior.members),
                system,
                setup.a0_time,
                &setup.a0,
                window,
                self.config.rom.substeps,
                (q.lower, q.upper),
                q.samples,
                self.config.seed,
            )
        } else if let Some(pce) = &identify.pce {
            compute_quantile_bands(
                Posterior::Pce(&pce.posterior),
                system,
                setup.a0_time,
                &setup.a0,
                window,
                self.config.rom.substeps,
                (q.lower, q.upper),
                q.samples,
                self.config.seed,
            )
        } else {
            Ok(Vec::new())
        }
    }

    fn assemble_report(
        &self,
        validate: &ValidateStage,
        bands: Option<Vec<ModeBands>>,
    ) -> Result<RunReport> {
        let identify = &validate.identify;
        let setup = &identify.sens.setup;
        let mut sensitivity = identify.sens.report.clone();
        if let (Some(report), Some(pce)) = (&mut sensitivity, &identify.pce) {
            if report.sobol_first.is_none() {
                report.sobol_first = pce.forecast_sobol.clone();
            }
        }
        Ok(RunReport {
            times: validate.table.times.clone(),
            eps_uncorrected: validate.table.uncorrected.clone(),
            eps_projection: validate.table.projection.clone(),
            eps_enkf: validate.table.enkf.clone(),
            eps_pce: validate.table.pce.clone(),
            train_window: setup.train_window,
            validate_window: setup.validate_window,
            sensitivity,
            sparsity: identify.pce.as_ref().map(|p| p.sparsity.clone()),
            bands,
            correction_enkf: identify.enkf.as_ref().map(|e| e.correction.clone()),
            correction_pce: identify.pce.as_ref().map(|p| p.correction.clone()),
            posterior_variance_enkf: identify.enkf.as_ref().map(|e| e.posterior_variance.clone()),
            posterior_variance_pce: identify.pce.as_ref().map(|p| p.posterior_variance.clone()),
            stages: self.stages.clone(),
            config_hash: self.config_hash.clone(),
            warnings: self.warnings.clone(),
        })
    }
}

/// Runs every stage and emits all artifacts.
pub fn run_pipeline(
    config: PipelineConfig,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<RunReport> {
    let mut config = config;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    let mut pipeline = Pipeline::new(config, out_dir)?;
    pipeline.stage_report()
}

// ---------------------------------------------------------------------------
// stage bodies

pub struct RomStage {
    pub snaps: SnapshotMatrix,
    pub basis: PodBasis,
    pub measurements: MeasurementSet,
    pub system: ReducedSystem,
}

pub struct SensitivityStage {
    pub rom: RomStage,
    pub setup: IdentifySetup,
    pub report: Option<SensitivityReport>,
    pub active: Vec<usize>,
}

pub struct EnkfOutcome {
    pub posterior: Ensemble,
    pub correction: CorrectionVector,
    pub posterior_variance: DVector<f64>,
    pub gain_rank: usize,
    pub n_used: usize,
}

pub struct PceOutcome {
    pub posterior: PceExpansion,
    pub correction: CorrectionVector,
    pub posterior_variance: DVector<f64>,
    pub gain_rank: usize,
    pub sparsity: Vec<SparsityRow>,
    /// First-order Sobol indices of the forecast expansion, scattered onto
    /// the full parameter vector (zero on screened-out coordinates).
    pub forecast_sobol: Option<DVector<f64>>,
}

pub struct IdentifyStage {
    pub sens: SensitivityStage,
    pub enkf: Option<EnkfOutcome>,
    pub pce: Option<PceOutcome>,
}

pub struct ValidateStage {
    pub identify: IdentifyStage,
    pub table: ErrorTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SmootherMeta {
    posterior_variance: Vec<f64>,
    gain_rank: usize,
    n_used: usize,
    #[serde(default)]
    forecast_sobol: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredScreening {
    ratio: Vec<f64>,
    sobol_first: Option<Vec<f64>>,
    active_set: Vec<usize>,
    warnings: Vec<String>,
}

impl StoredScreening {
    fn from_report(report: &SensitivityReport) -> Self {
        StoredScreening {
            ratio: report.ratio.iter().cloned().collect(),
            sobol_first: report
                .sobol_first
                .as_ref()
                .map(|v| v.iter().cloned().collect()),
            active_set: report.active_set.clone(),
            warnings: report.warnings.clone(),
        }
    }

    fn into_report(self, threshold: f64) -> SensitivityReport {
        SensitivityReport {
            ratio: DVector::from_vec(self.ratio),
            sobol_first: self.sobol_first.map(DVector::from_vec),
            active_set: self.active_set,
            threshold,
            warnings: self.warnings,
        }
    }
}

fn generate_snapshots(config: &PipelineConfig) -> Result<SnapshotMatrix> {
    match &config.fom {
        FomConfig::Burgers {
            n_cells,
            x_min,
            x_max,
            viscosity,
            initial,
            boundary,
            t_end,
            dt,
            save_every,
            discard_before,
        } => {
            let grid = Grid1D::new(*n_cells, *x_min, *x_max)?;
            let init = initial_profile(&grid, initial);
            let snaps = simulate_burgers(
                &grid,
                *viscosity,
                &init,
                (boundary[0], boundary[1]),
                BurgersRun {
                    t_end: *t_end,
                    dt: *dt,
                    save_every: *save_every,
                },
            )?;
            match discard_before {
                Some(t) => snaps.discard_before(*t),
                None => Ok(snaps),
            }
        }
        FomConfig::QuadraticTruth {
            a0,
            t_end,
            dt_save,
            discard_before,
            ..
        } => {
            let truth = build_truth(config)?;
            let n_save = (*t_end / *dt_save).round().max(1.0) as usize;
            let save_times: Vec<f64> = (0..=n_save)
                .map(|i| i as f64 * (*t_end / n_save as f64))
                .collect();
            let (grid_times, anchors) = refine_times(&save_times, config.rom.substeps);
            let traj = simulate_quadratic_truth(
                &truth,
                &DVector::from_vec(a0.clone()),
                &grid_times,
            )?;
            let dim = truth.dim;
            let values = DMatrix::from_fn(dim, save_times.len(), |r, c| {
                traj.states[(anchors[c], r)]
            });
            let snaps = SnapshotMatrix::new(
                values,
                save_times,
                DVector::from_element(dim, 1.0),
            )?;
            match discard_before {
                Some(t) => snaps.discard_before(*t),
                None => Ok(snaps),
            }
        }
    }
}

fn initial_profile(grid: &Grid1D, initial: &InitialCondition) -> DVector<f64> {
    let xs = grid.cell_centers();
    let span = xs.last().unwrap() - xs.first().unwrap();
    DVector::from_vec(
        xs.iter()
            .map(|x| match initial {
                InitialCondition::Sin { amplitude, periods } => {
                    let t = (x - xs[0]) / span;
                    amplitude * (std::f64::consts::PI * periods * t).sin()
                }
                InitialCondition::Gaussian {
                    amplitude,
                    center,
                    width,
                } => amplitude * (-((x - center) / width).powi(2)).exp(),
                InitialCondition::Constant { value } => *value,
            })
            .collect(),
    )
}

/// Reproducible quadratic ground truth from the config: diagonal decay plus
/// an energy-neutral random convection tensor (antisymmetric under i ↔ k, so
/// the quadratic term never feeds or drains total energy).
pub fn build_truth(config: &PipelineConfig) -> Result<QuadraticTruth> {
    let FomConfig::QuadraticTruth {
        dim,
        viscosity,
        system_seed,
        linear_decay,
        decay_spread,
        base_rotation,
        convection_scale,
        corrections,
        ..
    } = &config.fom
    else {
        return Err(RomError::Config(
            "build_truth needs a quadratic_truth fom".into(),
        ));
    };
    let n = *dim;
    let mut rng = derive_rng(*system_seed, stream::TEST + 1, 0);
    let raw = Tensor3::from_fn(n, |_, _, _| {
        convection_scale * (2.0 * rng.random::<f64>() - 1.0)
    });
    let convection = Tensor3::from_fn(n, |i, j, k| 0.5 * (raw[(i, j, k)] - raw[(k, j, i)]));
    let entries: Vec<(usize, f64)> = corrections.iter().map(|c| (c.index, c.value)).collect();
    // Per-mode decay plus antisymmetric rotation of mode pairs: distinct,
    // oscillatory modal responses keep the correction entries identifiable.
    let mut diffusion = DMatrix::zeros(n, n);
    for k in 0..n {
        diffusion[(k, k)] = -linear_decay * (1.0 + decay_spread * k as f64);
    }
    for p in 0..n / 2 {
        let (i, j) = (2 * p, 2 * p + 1);
        diffusion[(i, j)] += base_rotation * (p as f64 + 1.0);
        diffusion[(j, i)] -= base_rotation * (p as f64 + 1.0);
    }
    let truth = QuadraticTruth {
        dim: n,
        gram: DMatrix::identity(n, n),
        diffusion,
        convection,
        true_correction: CorrectionVector::sparse(n, &entries)?,
        viscosity: *viscosity,
    };
    truth.validate()?;
    Ok(truth)
}

fn build_basis_and_measurements(
    config: &PipelineConfig,
    snaps: &SnapshotMatrix,
) -> Result<(PodBasis, MeasurementSet)> {
    match &config.fom {
        FomConfig::Burgers { .. } => {
            let pod_input = if config.pod.mean_center {
                let mut centered = snaps.clone();
                for c in 0..centered.n_cells() {
                    let mean: f64 =
                        centered.values.row(c).iter().sum::<f64>() / centered.n_times() as f64;
                    for t in 0..centered.n_times() {
                        centered.values[(c, t)] -= mean;
                    }
                }
                centered
            } else {
                snaps.clone()
            };
            let basis = compute_pod(&pod_input, config.pod.n_modes)?;
            let measurements = project_snapshots(snaps, &basis)?;
            Ok((basis, measurements))
        }
        FomConfig::QuadraticTruth { dim, .. } => {
            // Coefficient space is the full-order space: identity basis.
            if config.pod.n_modes != *dim {
                return Err(RomError::Config(format!(
                    "quadratic truth runs need pod.n_modes = dim (= {dim})"
                )));
            }
            let basis = PodBasis {
                modes: DMatrix::identity(*dim, *dim),
                singular_values: DVector::from_element(*dim, 1.0),
                weights: DVector::from_element(*dim, 1.0),
                total_energy: *dim as f64,
            };
            let measurements = project_snapshots(snaps, &basis)?;
            Ok((basis, measurements))
        }
    }
}

fn assemble_system(config: &PipelineConfig, basis: &PodBasis) -> Result<ReducedSystem> {
    match &config.fom {
        FomConfig::Burgers {
            n_cells,
            x_min,
            x_max,
            viscosity,
            ..
        } => {
            let grid = Grid1D::new(*n_cells, *x_min, *x_max)?;
            assemble_reduced_operators(basis, &grid, *viscosity)
        }
        FomConfig::QuadraticTruth { .. } => Ok(build_truth(config)?.base_system()),
    }
}

/// Everything the smoothers need: windows, observation rows, data vector,
/// prior and noise model.
pub struct IdentifySetup {
    pub prior: GaussianPrior,
    pub noise: NoiseModel,
    pub a0_time: f64,
    pub a0: DVector<f64>,
    pub obs_times: Vec<f64>,
    pub obs_rows: Vec<usize>,
    pub y: DVector<f64>,
    pub train_window: (f64, f64),
    pub validate_window: (f64, f64),
    /// Snapshot times from the anchor on (the validation/report grid).
    pub window_times: Vec<f64>,
    pub anchor_row: usize,
}

impl IdentifySetup {
    fn prepare(
        config: &PipelineConfig,
        rom: &RomStage,
        warnings: &mut Vec<String>,
    ) -> Result<IdentifySetup> {
        let times = &rom.measurements.times;
        let t0 = times[0];
        let t_last = *times.last().unwrap();
        let train_start = config.train.t_start.unwrap_or(t0);
        let train_end = config
            .train
            .t_end
            .unwrap_or(train_start + config.train.fraction * (t_last - train_start));
        if train_end <= train_start || train_end > t_last + 1e-12 {
            return Err(RomError::Config(format!(
                "train window [{train_start}, {train_end}] outside horizon [{t0}, {t_last}]"
            )));
        }
        let anchor_row = times
            .iter()
            .position(|&t| t >= train_start - 1e-12)
            .ok_or_else(|| RomError::Config("train window has no snapshots".into()))?;
        let a0_time = times[anchor_row];
        let obs_rows: Vec<usize> = (anchor_row + 1..times.len())
            .filter(|&i| times[i] <= train_end + 1e-12)
            .collect();
        if obs_rows.is_empty() {
            return Err(RomError::Config(
                "train window contains no observations after the anchor".into(),
            ));
        }
        let obs_times: Vec<f64> = obs_rows.iter().map(|&i| times[i]).collect();

        let validate_start = config.validate.t_start.unwrap_or(train_end);
        let validate_end = config.validate.t_end.unwrap_or(t_last);
        if validate_end < validate_start {
            return Err(RomError::Config("empty validation window".into()));
        }

        let n_r = rom.system.n_modes();
        let (prior, mut prior_warnings) = build_prior(
            &rom.system,
            &PriorOptions {
                relative_scale: config.prior.relative_scale,
                scale_is_variance: config.prior.scale_is_variance,
                floor: config.prior.floor,
            },
        )?;
        warnings.append(&mut prior_warnings);
        let (noise, mut noise_warnings) = default_noise(
            &rom.measurements,
            config.noise.relative_scale,
            config.noise.floor,
        )?;
        warnings.append(&mut noise_warnings);

        let mut y = DVector::zeros(obs_rows.len() * n_r);
        for (t, &row) in obs_rows.iter().enumerate() {
            for j in 0..n_r {
                y[t * n_r + j] = rom.measurements.coefficients[(row, j)];
            }
        }
        let a0 = rom
            .measurements
            .coefficients
            .row(anchor_row)
            .transpose()
            .into_owned();
        let window_times: Vec<f64> = times[anchor_row..].to_vec();

        Ok(IdentifySetup {
            prior,
            noise,
            a0_time,
            a0,
            obs_times,
            obs_rows,
            y,
            train_window: (a0_time, train_end),
            validate_window: (validate_start, validate_end),
            window_times,
            anchor_row,
        })
    }

}

fn run_screening(
    config: &PipelineConfig,
    rom: &RomStage,
    setup: &IdentifySetup,
    warnings: &mut Vec<String>,
) -> Result<SensitivityReport> {
    let sc = &config.sensitivity;
    if sc.obs_stride == 0 {
        return Err(RomError::Config("sensitivity.obs_stride must be >= 1".into()));
    }
    // The pilot assimilates a strided subset of the observation times.
    let pilot_obs: Vec<f64> = setup
        .obs_times
        .iter()
        .cloned()
        .step_by(sc.obs_stride)
        .collect();
    let pilot = sample_prior(&setup.prior, sc.pilot_size, config.seed ^ 0x5EED_1234)?;
    let forecasts = forecast_ensemble(
        &pilot,
        &rom.system,
        setup.a0_time,
        &setup.a0,
        &pilot_obs,
        config.rom.substeps,
        &setup.noise,
        config.seed ^ 0x5EED_5678,
    )?;
    let keep: Vec<usize> = (0..pilot.size()).filter(|&i| forecasts.ok[i]).collect();
    let q = pilot.members.select_rows(keep.iter());
    let yf = forecasts.predictions.select_rows(keep.iter());

    let posterior_var = if sc.use_improved_gain {
        let rvm = crate::rvm::RvmConfig {
            max_iter: sc.rvm_max_iter,
            ..config.smoother.rvm.to_config()
        };
        let est = estimate_linear_map(&q, &yf, &rvm)?;
        // The observation covariance for screening carries the measurement
        // noise plus the part of the forecast the linear map cannot
        // explain, so unexplained scatter does not masquerade as
        // information.
        let mut c_eps = setup.noise.flatten_variance(pilot_obs.len());
        for (r, v) in c_eps.iter_mut().enumerate() {
            *v = v.max(est.residual_variance[r]);
        }
        improved_posterior_variance(&est.h, &setup.prior, &c_eps, config.smoother.gain_cutoff)?
    } else {
        let ens = Ensemble {
            members: q.clone(),
            seed: pilot.seed,
        };
        let fc = crate::enkf::ForecastSet {
            predictions: yf.clone(),
            obs_times: pilot_obs.clone(),
            noise_applied: true,
            ok: vec![true; keep.len()],
        };
        // y restricted to the strided observation rows.
        let n_r = rom.system.n_modes();
        let mut y_pilot = DVector::zeros(pilot_obs.len() * n_r);
        for (t_new, t_old) in (0..setup.obs_times.len()).step_by(sc.obs_stride).enumerate() {
            for j in 0..n_r {
                y_pilot[t_new * n_r + j] = setup.y[t_old * n_r + j];
            }
        }
        let (post, _) = enkf_update(&ens, &fc, &y_pilot, config.smoother.gain_cutoff)?;
        post.variance()
    };

    let ratio = variance_ratio(&setup.prior, &posterior_var)?;
    let (active_set, mut screen_warnings) = screen_variables(&ratio, sc.threshold)?;
    warnings.append(&mut screen_warnings);
    Ok(SensitivityReport {
        ratio,
        sobol_first: None,
        active_set,
        threshold: sc.threshold,
        warnings: warnings.clone(),
    })
}

fn run_identification(
    config: &PipelineConfig,
    sens: &SensitivityStage,
    warnings: &mut Vec<String>,
) -> Result<(Option<EnkfOutcome>, Option<PceOutcome>)> {
    let setup = &sens.setup;
    let system = &sens.rom.system;
    let prior = setup.prior.with_mask(&sens.active);
    let kind = config.smoother.kind;
    let n_r = system.n_modes();

    let mut enkf_out = None;
    let mut pce_out = None;

    if matches!(kind, SmootherKind::Enkf | SmootherKind::Both) {
        let z = config.smoother.ensemble_size;
        let ensemble = sample_prior(&prior, z, config.seed)?;
        let forecasts = forecast_ensemble(
            &ensemble,
            system,
            setup.a0_time,
            &setup.a0,
            &setup.obs_times,
            config.rom.substeps,
            &setup.noise,
            config.seed,
        )?;
        let (posterior, info) =
            enkf_update(&ensemble, &forecasts, &setup.y, config.smoother.gain_cutoff)?;
        let mean = posterior.mean();
        let correction = CorrectionVector::from_values(n_r, mean)?;
        let posterior_variance = posterior.variance();
        enkf_out = Some(EnkfOutcome {
            posterior,
            correction,
            posterior_variance,
            gain_rank: info.rank,
            n_used: info.n_used,
        });
    }

    if matches!(kind, SmootherKind::Pce | SmootherKind::Both) {
        let active = &sens.active;
        let m_active = active.len();
        let p_order = config.smoother.pce_order;
        let n_samples = match (kind, config.smoother.pce_samples) {
            // Both mode shares the prior samples with the EnKF: same count,
            // same germ draws.
            (SmootherKind::Both, _) => config.smoother.ensemble_size,
            (_, Some(n)) => n,
            (_, None) => config.smoother.ensemble_size,
        };
        let set = build_multiindex(m_active, p_order)?;
        let norms = set.norm_diagonal();
        let s = prior.len();

        // Exact degree-1 prior expansion over the active germs.
        let mut prior_coeff = DMatrix::zeros(s, set.len());
        prior_coeff.column_mut(0).copy_from(&prior.mean);
        for (g, &coord) in active.iter().enumerate() {
            prior_coeff[(coord, 1 + g)] = prior.std[coord];
        }
        let prior_exp = PceExpansion::new(set.clone(), prior_coeff)?;

        // Germ samples and the corresponding parameter samples. The germ
        // draws replay the prior-sampling stream so that `both` mode sees
        // the exact ensemble members drawn above.
        let mut xi = DMatrix::zeros(n_samples, m_active);
        let mut q_samples = DMatrix::zeros(n_samples, s);
        for i in 0..n_samples {
            let mut rng = derive_rng(config.seed, stream::PRIOR_SAMPLES, i as u64);
            let mut g = 0;
            for k in 0..s {
                let z: f64 = rng.sample(StandardNormal);
                let active_coord = prior.active_mask[k];
                q_samples[(i, k)] = if active_coord {
                    prior.mean[k] + prior.std[k] * z
                } else {
                    prior.mean[k]
                };
                if active_coord {
                    xi[(i, g)] = z;
                    g += 1;
                }
            }
        }

        // Noiseless propagation: the observation noise enters the update
        // through its covariance, not through sample realizations.
        let anchors: Vec<f64> = std::iter::once(setup.a0_time)
            .chain(setup.obs_times.iter().cloned())
            .collect();
        let (grid, anchor_idx) = refine_times(&anchors, config.rom.substeps);
        let m_y = setup.obs_times.len() * n_r;
        let mut values = DMatrix::zeros(n_samples, m_y);
        let mut failed = 0usize;
        let mut ok = vec![true; n_samples];
        for i in 0..n_samples {
            let q = CorrectionVector::from_values(n_r, q_samples.row(i).transpose())?;
            match integrate_rom(system, &q, &setup.a0, &grid) {
                Ok(traj) => {
                    let mut col = 0;
                    for &gi in anchor_idx.iter().skip(1) {
                        for j in 0..n_r {
                            values[(i, col)] = traj.states[(gi, j)];
                            col += 1;
                        }
                    }
                }
                Err(RomError::Divergence { .. }) | Err(RomError::NewtonFailure { .. }) => {
                    ok[i] = false;
                    failed += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if failed * 10 > n_samples {
            return Err(RomError::EnsembleDegenerate {
                diverged: failed,
                total: n_samples,
                percent: 10,
            });
        }
        let keep: Vec<usize> = (0..n_samples).filter(|&i| ok[i]).collect();
        if failed > 0 {
            warnings.push(format!(
                "{failed} of {n_samples} regression samples diverged and were dropped"
            ));
        }
        let xi_kept = xi.select_rows(keep.iter());
        let values_kept = values.select_rows(keep.iter());

        let (forecast_exp, sparsity) = fit_forecast_pce(
            &xi_kept,
            &values_kept,
            &set,
            &config.smoother.rvm.to_config(),
        )?;

        let noise_var = setup.noise.flatten_variance(setup.obs_times.len());
        let (posterior, info) = gmk_pce_update(
            &prior_exp,
            &forecast_exp,
            &setup.y,
            &noise_var,
            &norms,
            config.smoother.gain_cutoff,
        )?;
        for w in &info.warnings {
            warnings.push(format!("pce update: {w}"));
        }
        let (mean, cov) = pce_moments(&posterior, &norms)?;
        let correction = CorrectionVector::from_values(n_r, mean)?;
        let posterior_variance = cov.diagonal();

        // First-order Sobol indices of the fitted forecast, scattered back
        // onto the full parameter vector.
        let (sobol_germ, zero_var) = sobol_first_order(&forecast_exp, &norms)?;
        let forecast_sobol = if zero_var {
            None
        } else {
            let mut full = DVector::zeros(prior.len());
            for (g, &coord) in active.iter().enumerate() {
                full[coord] = sobol_germ[g];
            }
            Some(full)
        };

        pce_out = Some(PceOutcome {
            posterior,
            correction,
            posterior_variance,
            gain_rank: info.gain_rank,
            sparsity,
            forecast_sobol,
        });
    }

    Ok((enkf_out, pce_out))
}

/// The error table backing errors.csv.
#[derive(Debug, Clone)]
pub struct ErrorTable {
    pub times: Vec<f64>,
    pub uncorrected: Vec<f64>,
    pub projection: Vec<f64>,
    pub enkf: Option<Vec<f64>>,
    pub pce: Option<Vec<f64>>,
}

fn run_validation(
    config: &PipelineConfig,
    identify: &IdentifyStage,
    warnings: &mut Vec<String>,
) -> Result<ErrorTable> {
    let rom = &identify.sens.rom;
    let setup = &identify.sens.setup;
    let system = &rom.system;
    let n_r = system.n_modes();

    // The reference snapshots from the anchor on.
    let window = snapshot_window(&rom.snaps, setup.anchor_row)?;

    // Projection series: reconstruct(project(FOM)) vs FOM. This is the
    // infimum over all coefficient choices in the basis.
    let coeffs_window = rom
        .measurements
        .coefficients
        .rows(setup.anchor_row, window.n_times())
        .into_owned();
    let projected = reconstruct(&coeffs_window, &window.times, &rom.basis)?;
    let projection = crate::rom::relative_l2_error(&window, &projected)?.values;

    let series_for = |correction: &CorrectionVector,
                      warnings: &mut Vec<String>,
                      label: &str|
     -> Result<Vec<f64>> {
        rom_error_series(
            system,
            correction,
            &rom.basis,
            &window,
            config.rom.substeps,
            &setup.a0,
            warnings,
            label,
        )
    };

    let uncorrected = series_for(
        &CorrectionVector::zeros(n_r),
        warnings,
        "uncorrected",
    )?;
    let enkf = match &identify.enkf {
        Some(out) => Some(series_for(&out.correction, warnings, "enkf")?),
        None => None,
    };
    let pce = match &identify.pce {
        Some(out) => Some(series_for(&out.correction, warnings, "pce")?),
        None => None,
    };

    Ok(ErrorTable {
        times: window.times.clone(),
        uncorrected,
        projection,
        enkf,
        pce,
    })
}

fn snapshot_window(snaps: &SnapshotMatrix, from_row: usize) -> Result<SnapshotMatrix> {
    let n_keep = snaps.n_times() - from_row;
    SnapshotMatrix::new(
        snaps.values.columns(from_row, n_keep).into_owned(),
        snaps.times[from_row..].to_vec(),
        snaps.weights.clone(),
    )
}

/// Integrates the corrected ROM over the window and returns the relative
/// L² error series against the snapshots; a mid-run divergence leaves NaN
/// entries from the failure on.
#[allow(clippy::too_many_arguments)]
fn rom_error_series(
    system: &ReducedSystem,
    correction: &CorrectionVector,
    basis: &PodBasis,
    window: &SnapshotMatrix,
    substeps: usize,
    a0: &DVector<f64>,
    warnings: &mut Vec<String>,
    label: &str,
) -> Result<Vec<f64>> {
    let (grid, anchors) = refine_times(&window.times, substeps);
    let (traj, failure) = integrate_rom_lenient(system, correction, a0, &grid)?;
    let completed_anchors = anchors
        .iter()
        .take_while(|&&g| g < traj.times.len())
        .count();
    if let Some(err) = failure {
        warnings.push(format!(
            "{label} trajectory stopped early ({err}); errors reported as NaN from there"
        ));
    }
    // Coefficients at the completed snapshot times.
    let n_r = system.n_modes();
    let mut coeffs = DMatrix::zeros(completed_anchors, n_r);
    for (row, &g) in anchors.iter().take(completed_anchors).enumerate() {
        for j in 0..n_r {
            coeffs[(row, j)] = traj.states[(g, j)];
        }
    }
    let completed_window = SnapshotMatrix::new(
        window.values.columns(0, completed_anchors).into_owned(),
        window.times[..completed_anchors].to_vec(),
        window.weights.clone(),
    )?;
    let recon = reconstruct(&coeffs, &completed_window.times, basis)?;
    let partial = crate::rom::relative_l2_error(&completed_window, &recon)?;
    let mut values = partial.values;
    values.resize(window.n_times(), f64::NAN);
    Ok(values)
}

// ---------------------------------------------------------------------------
// quantile bands

/// Empirical quantile: the ceil(q Z)-th smallest value (1-based, clamped).
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let z = sorted.len();
    let k = ((q * z as f64).ceil() as usize).clamp(1, z);
    sorted[k - 1]
}

/// Samples posterior trajectories and extracts per-mode quantile bands at
/// the requested levels, plus the sample mean. For ensembles every member
/// is used; for PCE posteriors `n_samples` germ draws are taken.
#[allow(clippy::too_many_arguments)]
pub fn compute_quantile_bands(
    posterior: Posterior<'_>,
    system: &ReducedSystem,
    a0_time: f64,
    a0: &DVector<f64>,
    times: &[f64],
    substeps: usize,
    levels: (f64, f64),
    n_samples: usize,
    seed: u64,
) -> Result<Vec<ModeBands>> {
    if times.is_empty() || times[0] != a0_time {
        return Err(RomError::InvalidArgument(
            "quantile band times must start at the anchor".into(),
        ));
    }
    let n_r = system.n_modes();
    let s = CorrectionVector::param_len(n_r);

    // Correction samples, one per row.
    let samples: DMatrix<f64> = match posterior {
        Posterior::Ensemble(members) => members.clone(),
        Posterior::Pce(expansion) => {
            let m = expansion.index_set.m();
            let mut xi = DMatrix::zeros(n_samples, m);
            for i in 0..n_samples {
                let mut rng = derive_rng(seed, stream::QUANTILE_GERMS, i as u64);
                for g in 0..m {
                    xi[(i, g)] = rng.sample(StandardNormal);
                }
            }
            expansion.evaluate(&xi)?
        }
    };
    if samples.ncols() != s {
        return Err(RomError::DimensionMismatch(format!(
            "posterior samples have {} columns, expected s = {s}",
            samples.ncols()
        )));
    }

    let (grid, anchors) = refine_times(times, substeps);
    let z = samples.nrows();
    let n_t = times.len();
    // per (time, mode): collected values across samples
    let mut collected = vec![Vec::with_capacity(z); n_t * n_r];
    let mut failed = 0usize;
    for i in 0..z {
        let q = CorrectionVector::from_values(n_r, samples.row(i).transpose())?;
        match integrate_rom(system, &q, a0, &grid) {
            Ok(traj) => {
                for (t, &g) in anchors.iter().enumerate() {
                    for j in 0..n_r {
                        collected[t * n_r + j].push(traj.states[(g, j)]);
                    }
                }
            }
            Err(RomError::Divergence { .. }) | Err(RomError::NewtonFailure { .. }) => {
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if failed * 10 > z {
        return Err(RomError::EnsembleDegenerate {
            diverged: failed,
            total: z,
            percent: 10,
        });
    }

    let mut bands = Vec::with_capacity(n_r);
    for j in 0..n_r {
        let mut lower = Vec::with_capacity(n_t);
        let mut upper = Vec::with_capacity(n_t);
        let mut mean = Vec::with_capacity(n_t);
        for t in 0..n_t {
            let mut vals = collected[t * n_r + j].clone();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            lower.push(empirical_quantile(&vals, levels.0));
            upper.push(empirical_quantile(&vals, levels.1));
            mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        bands.push(ModeBands {
            mode: j,
            times: times.to_vec(),
            lower,
            upper,
            mean,
        });
    }
    Ok(bands)
}

// ---------------------------------------------------------------------------
// CSV emission

fn csv_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        io::fmt_g17(v)
    }
}

pub fn write_errors_csv(path: &Path, table: &ErrorTable) -> Result<()> {
    let mut out = String::from("t,eps_uncorrected,eps_projection,eps_enkf,eps_pce\n");
    for (i, t) in table.times.iter().enumerate() {
        let enkf = table
            .enkf
            .as_ref()
            .map(|v| csv_value(v[i]))
            .unwrap_or_default();
        let pce = table
            .pce
            .as_ref()
            .map(|v| csv_value(v[i]))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            io::fmt_g17(*t),
            csv_value(table.uncorrected[i]),
            csv_value(table.projection[i]),
            enkf,
            pce
        );
    }
    std::fs::write(path, out).map_err(|e| RomError::io(path.display().to_string(), e))
}

pub fn read_errors_csv(path: &Path) -> Result<ErrorTable> {
    let text =
        std::fs::read_to_string(path).map_err(|e| RomError::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "t,eps_uncorrected,eps_projection,eps_enkf,eps_pce" {
        return Err(RomError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut times = Vec::new();
    let mut uncorrected = Vec::new();
    let mut projection = Vec::new();
    let mut enkf: Vec<f64> = Vec::new();
    let mut pce: Vec<f64> = Vec::new();
    let mut has_enkf = false;
    let mut has_pce = false;
    for (no, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(RomError::Parse {
                path: path.display().to_string(),
                line: no + 2,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let parse = |tok: &str| -> Result<f64> {
            tok.parse::<f64>().map_err(|e| RomError::Parse {
                path: path.display().to_string(),
                line: no + 2,
                msg: format!("bad float {tok:?}: {e}"),
            })
        };
        times.push(parse(fields[0])?);
        uncorrected.push(parse(fields[1])?);
        projection.push(parse(fields[2])?);
        if !fields[3].is_empty() {
            has_enkf = true;
            enkf.push(parse(fields[3])?);
        }
        if !fields[4].is_empty() {
            has_pce = true;
            pce.push(parse(fields[4])?);
        }
    }
    Ok(ErrorTable {
        times,
        uncorrected,
        projection,
        enkf: has_enkf.then_some(enkf),
        pce: has_pce.then_some(pce),
    })
}

fn write_sensitivity_csv(path: &Path, report: &SensitivityReport) -> Result<()> {
    let mut out = String::from("index,ratio,active\n");
    for k in 0..report.ratio.len() {
        let active = report.active_set.contains(&k) as u8;
        let _ = writeln!(out, "{k},{},{active}", io::fmt_g17(report.ratio[k]));
    }
    std::fs::write(path, out).map_err(|e| RomError::io(path.display().to_string(), e))
}

fn write_sparsity_csv(path: &Path, rows: &[SparsityRow]) -> Result<()> {
    let mut out = String::from("output_index,n_active,P,sigma2\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.output_index,
            r.n_active,
            r.p_total,
            io::fmt_g17(r.sigma2)
        );
    }
    std::fs::write(path, out).map_err(|e| RomError::io(path.display().to_string(), e))
}

fn read_sparsity_csv(path: &Path) -> Result<Vec<SparsityRow>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| RomError::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(RomError::Parse {
                path: path.display().to_string(),
                line: no + 1,
                msg: "expected 4 fields".into(),
            });
        }
        rows.push(SparsityRow {
            output_index: fields[0].parse().map_err(|_| RomError::Parse {
                path: path.display().to_string(),
                line: no + 1,
                msg: "bad output_index".into(),
            })?,
            n_active: fields[1].parse().unwrap_or(0),
            p_total: fields[2].parse().unwrap_or(0),
            sigma2: fields[3].parse().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

fn write_band_csv(path: &Path, band: &ModeBands) -> Result<()> {
    let mut out = String::from("t,q_low,q_high,mean\n");
    for i in 0..band.times.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            io::fmt_g17(band.times[i]),
            io::fmt_g17(band.lower[i]),
            io::fmt_g17(band.upper[i]),
            io::fmt_g17(band.mean[i])
        );
    }
    std::fs::write(path, out).map_err(|e| RomError::io(path.display().to_string(), e))
}

/// Plotting is data-only: the emitted CSV files plus this stub.
const PLOT_STUB: &str = r#"#!/usr/bin/env python3
"""Plots the error series and quantile bands emitted next to this script."""
import csv
import glob
import os.path as p

import matplotlib.pyplot as plt

here = p.dirname(p.abspath(__file__))


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {k: [float(r[k]) if r[k] else float("nan") for r in rows] for k in rows[0]}


err = read_csv(p.join(here, "errors.csv"))
fig, ax = plt.subplots()
for key in ("eps_uncorrected", "eps_projection", "eps_enkf", "eps_pce"):
    if key in err and any(v == v for v in err[key]):
        ax.semilogy(err["t"], err[key], label=key)
ax.set_xlabel("t")
ax.set_ylabel("relative L2 error")
ax.legend()
fig.savefig(p.join(here, "errors.png"), dpi=150)

for path in sorted(glob.glob(p.join(here, "quantiles_mode*.csv"))):
    band = read_csv(path)
    fig, ax = plt.subplots()
    ax.fill_between(band["t"], band["q_low"], band["q_high"], alpha=0.3)
    ax.plot(band["t"], band["mean"])
    ax.set_xlabel("t")
    ax.set_title(p.basename(path))
    fig.savefig(path.replace(".csv", ".png"), dpi=150)
"#;

// ---------------------------------------------------------------------------
// report.json

#[derive(Debug, Serialize)]
struct ReportJson {
    schema: &'static str,
    version: &'static str,
    config_hash: String,
    seed: u64,
    train_window: (f64, f64),
    validate_window: (f64, f64),
    stages: Vec<StageRecord>,
    skipped: Vec<String>,
    series: BTreeMap<String, SeriesSummary>,
    sensitivity: Option<SensitivitySummary>,
    sparsity_mean_active: Option<f64>,
    quantile_files: Vec<String>,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
struct SeriesSummary {
    validation_mean: Option<f64>,
    validation_max: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SensitivitySummary {
    n_active: usize,
    n_total: usize,
    threshold: f64,
}

fn summarize(report: &RunReport, series: &[f64]) -> SeriesSummary {
    let window = report.validate_window;
    let vals: Vec<f64> = report
        .times
        .iter()
        .zip(series.iter())
        .filter(|(t, v)| **t >= window.0 && **t <= window.1 && v.is_finite())
        .map(|(_, v)| *v)
        .collect();
    if vals.is_empty() {
        SeriesSummary {
            validation_mean: None,
            validation_max: None,
        }
    } else {
        SeriesSummary {
            validation_mean: Some(vals.iter().sum::<f64>() / vals.len() as f64),
            validation_max: vals.iter().cloned().reduce(f64::max),
        }
    }
}

fn report_json(config: &PipelineConfig, report: &RunReport) -> ReportJson {
    let mut series = BTreeMap::new();
    series.insert(
        "eps_uncorrected".to_string(),
        summarize(report, &report.eps_uncorrected),
    );
    series.insert(
        "eps_projection".to_string(),
        summarize(report, &report.eps_projection),
    );
    if let Some(s) = &report.eps_enkf {
        series.insert("eps_enkf".to_string(), summarize(report, s));
    }
    if let Some(s) = &report.eps_pce {
        series.insert("eps_pce".to_string(), summarize(report, s));
    }
    let mut skipped: Vec<String> = Vec::new();
    if report.sensitivity.is_none() {
        skipped.push("sensitivity".to_string());
    }
    if report.bands.is_none() {
        skipped.push("quantiles".to_string());
    }
    if report.eps_enkf.is_none() {
        skipped.push("identify_enkf".to_string());
    }
    if report.eps_pce.is_none() {
        skipped.push("identify_pce".to_string());
    }
    ReportJson {
        schema: "rom-bayes/1",
        version: env!("CARGO_PKG_VERSION"),
        config_hash: report.config_hash.clone(),
        seed: config.seed,
        train_window: report.train_window,
        validate_window: report.validate_window,
        stages: report.stages.clone(),
        skipped,
        series,
        sensitivity: report.sensitivity.as_ref().map(|s| SensitivitySummary {
            n_active: s.active_set.len(),
            n_total: s.ratio.len(),
            threshold: s.threshold,
        }),
        sparsity_mean_active: report.sparsity.as_ref().map(|rows| {
            rows.iter().map(|r| r.n_active as f64).sum::<f64>() / rows.len().max(1) as f64
        }),
        quantile_files: report
            .bands
            .as_ref()
            .map(|bands| {
                bands
                    .iter()
                    .map(|b| format!("quantiles_mode{}.csv", b.mode))
                    .collect()
            })
            .unwrap_or_default(),
        warnings: report.warnings.clone(),
    }
}
