//! Proper orthogonal decomposition via the method of snapshots.
//!
//! The basis solves the eigenproblem of the N_t × N_t weighted Gram matrix
//! G = 𝓤ᵀ W 𝓤 rather than a full SVD of the N_c × N_t snapshot matrix,
//! since N_t ≪ N_c in the target regime. Modes are orthonormal in the
//! weighted inner product ⟨u, v⟩_W = Σ_c w_c u_c v_c.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RomError};
use crate::fom::SnapshotMatrix;

/// Orthonormal spatial modes with their singular values and the inner-product
/// weights they were built with. `total_energy` is the total squared weighted
/// norm of the snapshot set (the trace of the Gram matrix), kept so that the
/// captured-energy fraction of a truncated basis can be reported.
#[derive(Debug, Clone)]
pub struct PodBasis {
    /// N_c × N_r, columns are modes φ_i.
    pub modes: DMatrix<f64>,
    /// Non-increasing, non-negative.
    pub singular_values: DVector<f64>,
    pub weights: DVector<f64>,
    pub total_energy: f64,
}

impl PodBasis {
    pub fn n_modes(&self) -> usize {
        self.modes.ncols()
    }

    pub fn n_cells(&self) -> usize {
        self.modes.nrows()
    }

    /// Fraction of snapshot energy captured by the retained modes.
    pub fn energy_fraction(&self) -> f64 {
        if self.total_energy <= 0.0 {
            return 1.0;
        }
        self.singular_values.iter().map(|s| s * s).sum::<f64>() / self.total_energy
    }
}

/// FOM snapshots projected onto the basis: the measurement data for the
/// identification problem.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    /// N_t × N_r.
    pub coefficients: DMatrix<f64>,
    pub times: Vec<f64>,
    /// Per-mode observation noise standard deviations; zero until a noise
    /// model assigns them.
    pub noise_std: DVector<f64>,
}

impl MeasurementSet {
    pub fn n_times(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.coefficients.ncols()
    }
}

/// Computes the leading `n_modes` POD modes of the snapshot set.
///
/// Deterministic sign convention: each mode is scaled so that its entry of
/// largest absolute value is positive (ties broken by lowest index).
pub fn compute_pod(snapshots: &SnapshotMatrix, n_modes: usize) -> Result<PodBasis> {
    snapshots.validate()?;
    let n_c = snapshots.n_cells();
    let n_t = snapshots.n_times();
    let bound = n_c.min(n_t);
    if n_modes == 0 || n_modes > bound {
        return Err(RomError::InvalidArgument(format!(
            "n_modes must be in 1..={bound}, got {n_modes}"
        )));
    }

    // G = 𝓤ᵀ W 𝓤
    let mut weighted = snapshots.values.clone();
    for (c, mut row) in weighted.row_iter_mut().enumerate() {
        row *= snapshots.weights[c];
    }
    let gram = snapshots.values.transpose() * &weighted;
    let total_energy = gram.trace();

    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n_t).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let lambda_max = order
        .first()
        .map(|&i| eig.eigenvalues[i].max(0.0))
        .unwrap_or(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > 1e-12 * lambda_max && eig.eigenvalues[i] > 0.0)
        .count();
    if n_modes > rank {
        return Err(RomError::RankDeficient {
            requested: n_modes,
            rank,
        });
    }

    let mut modes = DMatrix::zeros(n_c, n_modes);
    let mut singular_values = DVector::zeros(n_modes);
    for (k, &idx) in order.iter().take(n_modes).enumerate() {
        let sigma = eig.eigenvalues[idx].max(0.0).sqrt();
        singular_values[k] = sigma;
        let v = eig.eigenvectors.column(idx);
        let mut phi = &snapshots.values * v / sigma;
        // Sign convention: largest-magnitude entry positive, first such
        // entry wins on ties.
        let mut best = 0;
        for c in 1..n_c {
            if phi[c].abs() > phi[best].abs() {
                best = c;
            }
        }
        if phi[best] < 0.0 {
            phi = -phi;
        }
        modes.column_mut(k).copy_from(&phi);
    }

    Ok(PodBasis {
        modes,
        singular_values,
        weights: snapshots.weights.clone(),
        total_energy,
    })
}

/// Projects snapshots onto the basis: a_ij = ⟨u(t_i), φ_j⟩_W.
pub fn project_snapshots(snapshots: &SnapshotMatrix, basis: &PodBasis) -> Result<MeasurementSet> {
    if snapshots.weights != basis.weights {
        return Err(RomError::IncompatibleDiscretization(
            "snapshot weights differ from basis weights".into(),
        ));
    }
    if snapshots.n_cells() != basis.n_cells() {
        return Err(RomError::DimensionMismatch(
            "snapshot cell count differs from basis".into(),
        ));
    }
    let mut weighted = snapshots.values.clone();
    for (c, mut row) in weighted.row_iter_mut().enumerate() {
        row *= snapshots.weights[c];
    }
    let coefficients = weighted.transpose() * &basis.modes;
    Ok(MeasurementSet {
        coefficients,
        times: snapshots.times.clone(),
        noise_std: DVector::zeros(basis.n_modes()),
    })
}

/// Reconstructs fields from modal coefficients: u(t_i) = Σ_j a_ij φ_j.
pub fn reconstruct(
    coefficients: &DMatrix<f64>,
    times: &[f64],
    basis: &PodBasis,
) -> Result<SnapshotMatrix> {
    if coefficients.ncols() != basis.n_modes() {
        return Err(RomError::DimensionMismatch(format!(
            "coefficients have {} columns, basis has {} modes",
            coefficients.ncols(),
            basis.n_modes()
        )));
    }
    if coefficients.nrows() != times.len() {
        return Err(RomError::DimensionMismatch(
            "coefficient rows differ from time stamps".into(),
        ));
    }
    let values = &basis.modes * coefficients.transpose();
    SnapshotMatrix::new(values, times.to_vec(), basis.weights.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::Grid1D;

    fn test_grid(n: usize) -> Grid1D {
        Grid1D::new(n, 0.0, 1.0).unwrap()
    }

    // Deterministic full-rank filler.
    fn hash_noise(r: usize, c: usize) -> f64 {
        let mut x = (r as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (c as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
        x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 29;
        (x as f64 / u64::MAX as f64) * 2.0 - 1.0
    }

    fn snapshots_from_profiles(
        grid: &Grid1D,
        profiles: &[DVector<f64>],
        amplitudes: &[Vec<f64>],
    ) -> SnapshotMatrix {
        let n_t = amplitudes[0].len();
        let n_c = grid.n_cells();
        let mut values = DMatrix::zeros(n_c, n_t);
        for (p, amp) in profiles.iter().zip(amplitudes.iter()) {
            for (t, a) in amp.iter().enumerate() {
                for c in 0..n_c {
                    values[(c, t)] += a * p[c];
                }
            }
        }
        let times: Vec<f64> = (0..n_t).map(|i| i as f64).collect();
        SnapshotMatrix::new(values, times, grid.weights()).unwrap()
    }

    #[test]
    fn rank_one_snapshots_recover_the_profile() {
        let grid = test_grid(40);
        let profile = DVector::from_vec(
            grid.cell_centers()
                .iter()
                .map(|x| (2.0 * std::f64::consts::PI * x).cos() + 0.2)
                .collect(),
        );
        let amplitudes = vec![vec![1.0, -0.5, 2.0, 0.7, -1.2]];
        let snaps = snapshots_from_profiles(&grid, &[profile.clone()], &amplitudes);
        let basis = compute_pod(&snaps, 1).unwrap();

        // Mode is proportional to the profile.
        let scale = basis.modes[(0, 0)] / profile[0];
        for c in 0..grid.n_cells() {
            assert!((basis.modes[(c, 0)] - scale * profile[c]).abs() < 1e-10);
        }
        // Rank-1 reconstruction is exact.
        let ms = project_snapshots(&snaps, &basis).unwrap();
        let rec = reconstruct(&ms.coefficients, &snaps.times, &basis).unwrap();
        let rel = (&rec.values - &snaps.values).norm() / snaps.values.norm();
        assert!(rel <= 1e-10, "reconstruction error {rel}");
    }

    #[test]
    fn modes_are_weighted_orthonormal() {
        let grid = test_grid(30);
        let xs = grid.cell_centers();
        let profiles: Vec<DVector<f64>> = (1..=3)
            .map(|k| {
                DVector::from_vec(
                    xs.iter()
                        .map(|x| (k as f64 * std::f64::consts::PI * x).sin())
                        .collect(),
                )
            })
            .collect();
        let amplitudes = vec![
            (0..8).map(|t| (t as f64 * 0.3).cos() * 3.0).collect(),
            (0..8).map(|t| (t as f64 * 0.7).sin() * 1.5).collect(),
            (0..8).map(|t| 0.4 - 0.1 * t as f64).collect(),
        ];
        let snaps = snapshots_from_profiles(&grid, &profiles, &amplitudes);
        let basis = compute_pod(&snaps, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for c in 0..grid.n_cells() {
                    dot += basis.weights[c] * basis.modes[(c, i)] * basis.modes[(c, j)];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "<phi_{i}, phi_{j}>_W = {dot}");
            }
        }
    }

    #[test]
    fn singular_values_match_known_orthogonal_construction() {
        // Profiles orthogonal in W and amplitude series orthogonal in time
        // give singular values sigma_k = |profile_k|_W * |amplitude_k|_2,
        // computable by hand.
        let grid = test_grid(24);
        let n_c = grid.n_cells();
        let mut p1 = DVector::zeros(n_c);
        let mut p2 = DVector::zeros(n_c);
        let mut p3 = DVector::zeros(n_c);
        for c in 0..8 {
            p1[c] = 2.0;
        }
        for c in 8..16 {
            p2[c] = -1.5;
        }
        for c in 16..24 {
            p3[c] = 1.0;
        }
        // Disjoint-support amplitude series (orthogonal in time).
        let amplitudes = vec![
            vec![5.0, 0.0, 0.0, 4.0, 0.0, 0.0],
            vec![0.0, 3.0, 0.0, 0.0, -3.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, -1.0],
        ];
        let snaps = snapshots_from_profiles(&grid, &[p1.clone(), p2.clone(), p3.clone()], &amplitudes);
        let basis = compute_pod(&snaps, 3).unwrap();

        let dx = grid.dx();
        let wnorm = |p: &DVector<f64>| (p.iter().map(|v| dx * v * v).sum::<f64>()).sqrt();
        let anorm = |a: &[f64]| (a.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let mut expected: Vec<f64> = vec![
            wnorm(&p1) * anorm(&amplitudes[0]),
            wnorm(&p2) * anorm(&amplitudes[1]),
            wnorm(&p3) * anorm(&amplitudes[2]),
        ];
        expected.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for k in 0..3 {
            assert!(
                (basis.singular_values[k] - expected[k]).abs() < 1e-8,
                "sigma_{k} = {} vs expected {}",
                basis.singular_values[k],
                expected[k]
            );
        }
    }

    #[test]
    fn projection_matches_least_squares_oracle() {
        let grid = test_grid(20);
        let xs = grid.cell_centers();
        // A full-rank snapshot set that is not in any low-dimensional span.
        let values = DMatrix::from_fn(20, 7, |c, t| {
            ((c as f64 * 1.7 + t as f64 * 0.9).sin() + 0.3 * (t as f64 - 2.0) * xs[c]).cos()
        });
        let times: Vec<f64> = (0..7).map(|i| i as f64 * 0.5).collect();
        let snaps = SnapshotMatrix::new(values, times, grid.weights()).unwrap();
        let basis = compute_pod(&snaps, 3).unwrap();
        let ms = project_snapshots(&snaps, &basis).unwrap();

        // Normal-equations oracle: coefficients minimize the weighted L2
        // distance, so (Φᵀ W Φ) x = Φᵀ W u for every snapshot.
        let mut wphi = basis.modes.clone();
        for (c, mut row) in wphi.row_iter_mut().enumerate() {
            row *= grid.weights()[c];
        }
        let normal = basis.modes.transpose() * &wphi;
        let rhs = wphi.transpose() * &snaps.values;
        let sol = normal.lu().solve(&rhs).unwrap(); // N_r × N_t
        for t in 0..7 {
            for j in 0..3 {
                assert!(
                    (ms.coefficients[(t, j)] - sol[(j, t)]).abs() < 1e-10,
                    "coefficient ({t},{j}) differs from least-squares oracle"
                );
            }
        }
    }

    #[test]
    fn single_mode_snapshot_projects_to_unit_coefficient() {
        let grid = test_grid(16);
        let xs = grid.cell_centers();
        let profiles: Vec<DVector<f64>> = (1..=2)
            .map(|k| {
                DVector::from_vec(
                    xs.iter()
                        .map(|x| (k as f64 * std::f64::consts::PI * x).sin())
                        .collect(),
                )
            })
            .collect();
        let amplitudes = vec![
            (0..6).map(|t| 1.0 + 0.5 * t as f64).collect(),
            (0..6).map(|t| (t as f64).cos()).collect(),
        ];
        let snaps = snapshots_from_profiles(&grid, &profiles, &amplitudes);
        let basis = compute_pod(&snaps, 2).unwrap();

        // Snapshots equal to mode k project to the k-th unit row.
        let mode_snaps = SnapshotMatrix::new(
            basis.modes.clone(),
            vec![0.0, 1.0],
            grid.weights(),
        )
        .unwrap();
        let ms = project_snapshots(&mode_snaps, &basis).unwrap();
        for t in 0..2 {
            for j in 0..2 {
                let expect = if t == j { 1.0 } else { 0.0 };
                assert!((ms.coefficients[(t, j)] - expect).abs() < 1e-12);
            }
        }

        // Zero snapshots project to zero.
        let zero = SnapshotMatrix::new(DMatrix::zeros(16, 3), vec![0.0, 1.0, 2.0], grid.weights())
            .unwrap();
        let zms = project_snapshots(&zero, &basis).unwrap();
        assert!(zms.coefficients.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_is_idempotent() {
        let grid = test_grid(18);
        let values = DMatrix::from_fn(18, 9, |c, t| hash_noise(c, t));
        let times: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let snaps = SnapshotMatrix::new(values, times.clone(), grid.weights()).unwrap();
        let basis = compute_pod(&snaps, 4).unwrap();
        let a = project_snapshots(&snaps, &basis).unwrap();
        let rec = reconstruct(&a.coefficients, &times, &basis).unwrap();
        let a2 = project_snapshots(&rec, &basis).unwrap();
        let diff = (&a.coefficients - &a2.coefficients).norm() / a.coefficients.norm();
        assert!(diff <= 1e-10, "projection not idempotent: {diff}");
    }

    #[test]
    fn reconstruct_identity_rows_reproduce_modes() {
        let grid = test_grid(12);
        let values = DMatrix::from_fn(12, 5, |c, t| hash_noise(c + 31, t));
        let snaps = SnapshotMatrix::new(
            values,
            (0..5).map(|i| i as f64).collect(),
            grid.weights(),
        )
        .unwrap();
        let basis = compute_pod(&snaps, 2).unwrap();
        let eye = DMatrix::identity(2, 2);
        let rec = reconstruct(&eye, &[0.0, 1.0], &basis).unwrap();
        assert!((rec.values.column(0) - basis.modes.column(0)).norm() < 1e-14);
        assert!((rec.values.column(1) - basis.modes.column(1)).norm() < 1e-14);

        let zero_rec = reconstruct(&DMatrix::zeros(2, 2), &[0.0, 1.0], &basis).unwrap();
        assert!(zero_rec.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn weight_mismatch_is_incompatible() {
        let grid = test_grid(12);
        let values = DMatrix::from_fn(12, 5, |c, t| hash_noise(c, t));
        let snaps = SnapshotMatrix::new(
            values,
            (0..5).map(|i| i as f64).collect(),
            grid.weights(),
        )
        .unwrap();
        let basis = compute_pod(&snaps, 2).unwrap();
        let other = SnapshotMatrix::new(
            snaps.values.clone(),
            snaps.times.clone(),
            grid.weights() * 2.0,
        )
        .unwrap();
        match project_snapshots(&other, &basis) {
            Err(RomError::IncompatibleDiscretization(_)) => {}
            other => panic!("expected incompatible discretization, got {other:?}"),
        }
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let grid = test_grid(10);
        let profile = DVector::from_fn(10, |c, _| (c as f64 * 0.4).sin() + 1.0);
        let snaps = snapshots_from_profiles(
            &grid,
            &[profile],
            &[vec![1.0, 2.0, 3.0, 4.0]],
        );
        match compute_pod(&snaps, 3) {
            Err(RomError::RankDeficient { requested, rank }) => {
                assert_eq!(requested, 3);
                assert_eq!(rank, 1);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn pod_is_deterministic_and_energy_ordered() {
        let grid = test_grid(26);
        let values = DMatrix::from_fn(26, 12, |c, t| hash_noise(c, t) + 0.05);
        let snaps = SnapshotMatrix::new(
            values,
            (0..12).map(|i| i as f64 * 0.1).collect(),
            grid.weights(),
        )
        .unwrap();
        let b1 = compute_pod(&snaps, 5).unwrap();
        let b2 = compute_pod(&snaps, 5).unwrap();
        assert_eq!(b1.modes, b2.modes);
        assert_eq!(b1.singular_values, b2.singular_values);
        for k in 1..5 {
            assert!(b1.singular_values[k] <= b1.singular_values[k - 1]);
            assert!(b1.singular_values[k] >= 0.0);
        }
    }
}
