//! End-to-end pipeline behavior: stage caching, report emission, quantile
//! bands, smoother variants, and the ensemble-size convergence of the
//! corrected model.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use rom_bayes::config::{PipelineConfig, SmootherKind};
use rom_bayes::pipeline::{
    compute_quantile_bands, read_errors_csv, run_pipeline, Pipeline, Posterior,
};
use rom_bayes::rom::{CorrectionVector, ReducedSystem};
use rom_bayes::tensor::Tensor3;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn quadratic_config() -> PipelineConfig {
    PipelineConfig::load(&config_path("quadratic_truth.toml")).unwrap()
}

#[test]
fn zero_correction_zero_noise_series_coincide() {
    // Nothing to identify: corrected and uncorrected errors agree to the
    // integrator tolerance (and both vanish, since the data are generated
    // by the same integrator).
    let mut config = quadratic_config();
    if let rom_bayes::config::FomConfig::QuadraticTruth { corrections, .. } = &mut config.fom {
        corrections.clear();
    }
    config.smoother.ensemble_size = 100;
    config.sensitivity.enabled = false;
    config.quantiles.enabled = false;
    // keep the prior from moving the posterior anywhere meaningful
    config.prior.relative_scale = 1e-8;
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(config, dir.path(), None).unwrap();
    let unc = report.validation_mean(&report.eps_uncorrected).unwrap();
    let cor = report
        .validation_mean(report.eps_enkf.as_ref().unwrap())
        .unwrap();
    assert!(unc <= 1e-10, "uncorrected eps {unc}");
    assert!(cor <= 1e-6, "corrected eps {cor}");
}

#[test]
fn corrected_error_non_increasing_in_ensemble_size() {
    let mut means = Vec::new();
    for z in [100usize, 1000, 10_000] {
        let mut config = quadratic_config();
        config.smoother.ensemble_size = z;
        config.sensitivity.enabled = false;
        config.quantiles.enabled = false;
        let dir = tempfile::tempdir().unwrap();
        let report = run_pipeline(config, dir.path(), None).unwrap();
        means.push(
            report
                .validation_mean(report.eps_enkf.as_ref().unwrap())
                .unwrap(),
        );
    }
    assert!(
        means[0] >= means[1] && means[1] >= means[2],
        "corrected error not non-increasing in Z: {means:?}"
    );
}

#[test]
fn rerun_in_same_directory_is_cached_noop() {
    let mut config = quadratic_config();
    config.smoother.ensemble_size = 150;
    config.sensitivity.pilot_size = 100;
    config.quantiles.samples = 50;
    let dir = tempfile::tempdir().unwrap();

    let first = run_pipeline(config.clone(), dir.path(), None).unwrap();
    assert!(first.stages.iter().all(|s| s.status == "computed"));
    let bytes_before = std::fs::read(dir.path().join("errors.csv")).unwrap();
    let mtime_before = std::fs::metadata(dir.path().join("snapshots.txt"))
        .unwrap()
        .modified()
        .unwrap();

    let second = run_pipeline(config, dir.path(), None).unwrap();
    let cached = second
        .stages
        .iter()
        .filter(|s| s.status == "cached")
        .count();
    assert!(
        cached >= 5,
        "expected most stages cached on rerun: {:?}",
        second.stages
    );
    let bytes_after = std::fs::read(dir.path().join("errors.csv")).unwrap();
    assert_eq!(bytes_before, bytes_after);
    let mtime_after = std::fs::metadata(dir.path().join("snapshots.txt"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(mtime_before, mtime_after, "cached stage rewrote its artifact");

    // Error series survive the cache round trip bit-exactly.
    let table = read_errors_csv(&dir.path().join("errors.csv")).unwrap();
    assert_eq!(table.times, second.times);
    assert_eq!(table.uncorrected, second.eps_uncorrected);
}

#[test]
fn errors_csv_round_trips_at_17_digits() {
    let mut config = quadratic_config();
    config.smoother.ensemble_size = 120;
    config.sensitivity.enabled = false;
    config.quantiles.enabled = false;
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(config, dir.path(), None).unwrap();
    let table = read_errors_csv(&dir.path().join("errors.csv")).unwrap();
    assert_eq!(table.times, report.times);
    assert_eq!(table.uncorrected, report.eps_uncorrected);
    assert_eq!(table.projection, report.eps_projection);
    assert_eq!(table.enkf.as_ref(), report.eps_enkf.as_ref());
    assert!(table.pce.is_none());
}

#[test]
fn report_lists_skipped_stages() {
    let mut config = quadratic_config();
    config.smoother.ensemble_size = 100;
    config.sensitivity.enabled = false;
    config.quantiles.enabled = false;
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(config, dir.path(), None).unwrap();
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["schema"], "rom-bayes/1");
    let skipped: Vec<String> = json["skipped"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert!(skipped.contains(&"sensitivity".to_string()));
    assert!(skipped.contains(&"quantiles".to_string()));
    assert!(skipped.contains(&"identify_pce".to_string()));
    assert!(!dir.path().join("quantiles_mode0.csv").exists());
    assert!(!dir.path().join("sensitivity.csv").exists());
}

#[test]
fn seed_override_changes_outputs() {
    let mut config = quadratic_config();
    config.smoother.ensemble_size = 100;
    config.sensitivity.enabled = false;
    config.quantiles.enabled = false;
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run_pipeline(config.clone(), dir_a.path(), None).unwrap();
    let b = run_pipeline(config, dir_b.path(), Some(999)).unwrap();
    assert_ne!(a.config_hash, b.config_hash);
    assert_ne!(a.eps_enkf.unwrap(), b.eps_enkf.unwrap());
}

/// `both` mode runs EnKF and PCE on identical prior samples and reports
/// both error series.
#[test]
fn both_mode_produces_both_series() {
    let mut config = quadratic_config();
    config.smoother.kind = SmootherKind::Both;
    config.smoother.ensemble_size = 300;
    config.noise.relative_scale = 0.002;
    // Aggressive screening keeps the PCE germ dimension small.
    config.sensitivity.threshold = 0.5;
    config.quantiles.enabled = false;
    if let rom_bayes::config::FomConfig::QuadraticTruth { dt_save, .. } = &mut config.fom {
        *dt_save = 0.25;
    }
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(config, dir.path(), None).unwrap();

    let enkf = report.eps_enkf.as_ref().expect("enkf series");
    let pce = report.eps_pce.as_ref().expect("pce series");
    assert_eq!(enkf.len(), pce.len());
    let enkf_mean = report.validation_mean(enkf).unwrap();
    let pce_mean = report.validation_mean(pce).unwrap();
    let unc = report.validation_mean(&report.eps_uncorrected).unwrap();
    assert!(enkf_mean < unc, "enkf {enkf_mean} vs uncorrected {unc}");
    assert!(pce_mean < unc, "pce {pce_mean} vs uncorrected {unc}");

    // Both posterior artifacts exist.
    assert!(dir.path().join("posterior_ensemble.txt").exists());
    assert!(dir.path().join("posterior_pce.txt").exists());
    assert!(dir.path().join("sparsity.csv").exists());
    let sparsity = report.sparsity.as_ref().unwrap();
    assert!(!sparsity.is_empty());
    // Sparse fits: the non-zero counts stay well below the cardinality.
    for row in sparsity {
        assert!(row.n_active <= row.p_total);
    }
    // The sensitivity report carries Sobol indices from the forecast fit.
    let sens = report.sensitivity.as_ref().unwrap();
    assert!(sens.sobol_first.is_some());
}

/// PCE-only smoother end to end, including germ-sampled quantile bands.
#[test]
fn pce_smoother_standalone_with_bands() {
    let mut config = quadratic_config();
    config.smoother.kind = SmootherKind::Pce;
    config.smoother.ensemble_size = 250;
    config.noise.relative_scale = 0.002;
    config.sensitivity.threshold = 0.5;
    config.quantiles.samples = 200;
    if let rom_bayes::config::FomConfig::QuadraticTruth { dt_save, .. } = &mut config.fom {
        *dt_save = 0.25;
    }
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(config, dir.path(), None).unwrap();
    assert!(report.eps_enkf.is_none());
    let pce = report.eps_pce.as_ref().expect("pce series");
    let unc = report.validation_mean(&report.eps_uncorrected).unwrap();
    let pce_mean = report.validation_mean(pce).unwrap();
    assert!(pce_mean < unc, "pce {pce_mean} vs uncorrected {unc}");
    // bands were sampled from the posterior expansion
    let bands = report.bands.as_ref().expect("bands");
    assert_eq!(bands.len(), 6);
    for band in bands {
        for i in 0..band.times.len() {
            assert!(band.lower[i] <= band.mean[i] + 1e-12);
            assert!(band.mean[i] <= band.upper[i] + 1e-12);
        }
    }
    assert!(dir.path().join("quantiles_mode5.csv").exists());
}

#[test]
fn quantile_bands_zero_variance_collapse_to_mean() {
    let system = ReducedSystem {
        gram: DMatrix::identity(2, 2),
        diffusion: -DMatrix::identity(2, 2),
        convection: Tensor3::zeros(2),
        viscosity: 1.0,
    };
    let s = CorrectionVector::param_len(2);
    let members = DMatrix::zeros(16, s);
    let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
    let a0 = DVector::from_vec(vec![1.0, -0.5]);
    let bands = compute_quantile_bands(
        Posterior::Ensemble(&members),
        &system,
        0.0,
        &a0,
        &times,
        2,
        (0.005, 0.995),
        16,
        7,
    )
    .unwrap();
    for band in &bands {
        for i in 0..band.times.len() {
            assert_eq!(band.lower[i], band.upper[i]);
            // the mean accumulates float rounding over the members
            assert!((band.lower[i] - band.mean[i]).abs() <= 1e-14 * band.mean[i].abs().max(1.0));
        }
    }
}

#[test]
fn quantile_bands_two_members_are_min_max() {
    let system = ReducedSystem {
        gram: DMatrix::identity(1, 1),
        diffusion: -DMatrix::identity(1, 1),
        convection: Tensor3::zeros(1),
        viscosity: 1.0,
    };
    let s = CorrectionVector::param_len(1);
    let mut members = DMatrix::zeros(2, s);
    members[(0, 0)] = 0.3; // slower decay
    members[(1, 0)] = -0.3; // faster decay
    let times: Vec<f64> = (0..=5).map(|i| i as f64 * 0.2).collect();
    let a0 = DVector::from_element(1, 1.0);
    let bands = compute_quantile_bands(
        Posterior::Ensemble(&members),
        &system,
        0.0,
        &a0,
        &times,
        20,
        (0.005, 0.995),
        2,
        7,
    )
    .unwrap();
    let band = &bands[0];
    for i in 1..band.times.len() {
        assert!(band.lower[i] < band.upper[i]);
        // min/max envelope at Z = 2
        let t = band.times[i];
        let slow = (0.7f64 * -t).exp();
        let fast = (1.3f64 * -t).exp();
        // min/max envelope at Z = 2, up to the integrator truncation error
        assert!((band.upper[i] - slow).abs() < 1e-3, "{} vs {slow}", band.upper[i]);
        assert!((band.lower[i] - fast).abs() < 1e-3, "{} vs {fast}", band.lower[i]);
    }
}

#[test]
fn quantile_bands_match_gaussian_width() {
    // 1-D linear system, correction entry q ~ N(0, sigma^2) scaling the
    // decay rate: at small sigma the response is linear in q, so the band
    // half-width approaches 2.576 sigma(t).
    let system = ReducedSystem {
        gram: DMatrix::identity(1, 1),
        diffusion: -DMatrix::identity(1, 1),
        convection: Tensor3::zeros(1),
        viscosity: 1.0,
    };
    let z = 10_000;
    let sigma = 0.02;
    let s = CorrectionVector::param_len(1);
    let mut members = DMatrix::zeros(z, s);
    for i in 0..z {
        let mut rng = rom_bayes::rng::derive_rng(99, rom_bayes::rng::stream::TEST, i as u64);
        members[(i, 0)] = sigma * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
    }
    let times: Vec<f64> = vec![0.0, 0.5, 1.0];
    let a0 = DVector::from_element(1, 1.0);
    let bands = compute_quantile_bands(
        Posterior::Ensemble(&members),
        &system,
        0.0,
        &a0,
        &times,
        5,
        (0.005, 0.995),
        z,
        7,
    )
    .unwrap();
    let band = &bands[0];
    for (i, &t) in times.iter().enumerate().skip(1) {
        // linearized response std: a0 e^{-t} sigma t
        let sigma_t = (-t as f64).exp() * sigma * t;
        let half_width = 0.5 * (band.upper[i] - band.lower[i]);
        let rel = (half_width - 2.576 * sigma_t).abs() / (2.576 * sigma_t);
        assert!(
            rel <= 0.05,
            "band half-width off by {rel} at t = {t} ({half_width} vs {})",
            2.576 * sigma_t
        );
    }
}

#[test]
fn pipeline_stage_functions_run_individually() {
    let mut config = quadratic_config();
    config.smoother.ensemble_size = 100;
    config.sensitivity.pilot_size = 80;
    config.quantiles.enabled = false;
    let dir = tempfile::tempdir().unwrap();
    let mut pipeline = Pipeline::new(config, dir.path()).unwrap();
    let snaps = pipeline.stage_simulate().unwrap();
    assert!(snaps.n_times() > 100);
    assert!(dir.path().join("snapshots.txt").exists());
    let stage = pipeline.stage_rom().unwrap();
    assert_eq!(stage.system.n_modes(), 6);
    assert!(dir.path().join("rom.txt").exists());
    assert!(dir.path().join("basis.txt").exists());
}
