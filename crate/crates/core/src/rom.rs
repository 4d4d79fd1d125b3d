//! Galerkin-reduced operators and time integration of the corrected
//! reduced ODE
//!
//! ```text
//!   M ȧ = ν (A + Ã) a − aᵀ (C + C̃) a
//! ```
//!
//! where (Ã, C̃) is the flattened correction vector. Integration is BDF2
//! (implicit Euler on the first step) with an analytic Newton Jacobian;
//! non-uniform time grids use the variable-step BDF2 weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RomError};
use crate::fom::{strictly_increasing, Grid1D, SnapshotMatrix};
use crate::pod::PodBasis;
use crate::tensor::Tensor3;

/// The Galerkin ROM: Gram matrix, diffusion tensor, convection tensor
/// and the viscosity entering the diffusion term.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub gram: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
    pub convection: Tensor3,
    pub viscosity: f64,
}

impl ReducedSystem {
    pub fn n_modes(&self) -> usize {
        self.diffusion.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_modes();
        if self.gram.nrows() != n || self.gram.ncols() != n || self.diffusion.ncols() != n {
            return Err(RomError::DimensionMismatch(
                "reduced operators disagree on n_modes".into(),
            ));
        }
        if self.convection.dim() != n {
            return Err(RomError::DimensionMismatch(
                "convection tensor dimension mismatch".into(),
            ));
        }
        let finite = self.gram.iter().all(|v| v.is_finite())
            && self.diffusion.iter().all(|v| v.is_finite())
            && self.convection.iter().all(|v| v.is_finite())
            && self.viscosity.is_finite();
        if !finite {
            return Err(RomError::InvalidArgument(
                "reduced system contains non-finite entries".into(),
            ));
        }
        Ok(())
    }
}

/// Flattened correction parameters q of length s = n²(1+n): all Ã entries
/// row-major, then all C̃ entries in (i, j, k) lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionVector {
    n_modes: usize,
    values: DVector<f64>,
}

impl CorrectionVector {
    /// s = n²(1+n)
    pub fn param_len(n_modes: usize) -> usize {
        n_modes * n_modes * (1 + n_modes)
    }

    pub fn zeros(n_modes: usize) -> Self {
        CorrectionVector {
            n_modes,
            values: DVector::zeros(Self::param_len(n_modes)),
        }
    }

    pub fn from_values(n_modes: usize, values: DVector<f64>) -> Result<Self> {
        if values.len() != Self::param_len(n_modes) {
            return Err(RomError::DimensionMismatch(format!(
                "correction vector for {} modes needs length {}, got {}",
                n_modes,
                Self::param_len(n_modes),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RomError::InvalidArgument(
                "correction vector contains non-finite entries".into(),
            ));
        }
        Ok(CorrectionVector { n_modes, values })
    }

    /// Builds a correction that is zero except at the listed flat indices.
    pub fn sparse(n_modes: usize, entries: &[(usize, f64)]) -> Result<Self> {
        let mut values = DVector::zeros(Self::param_len(n_modes));
        for &(idx, v) in entries {
            if idx >= values.len() {
                return Err(RomError::InvalidArgument(format!(
                    "correction index {idx} out of range (s = {})",
                    values.len()
                )));
            }
            values[idx] = v;
        }
        Self::from_values(n_modes, values)
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// Splits into the diffusion correction Ã (n×n) and the convection
    /// correction C̃ (n×n×n).
    pub fn unpack(&self) -> (DMatrix<f64>, Tensor3) {
        let n = self.n_modes;
        let a_tilde = DMatrix::from_fn(n, n, |i, j| self.values[i * n + j]);
        let c_tilde = Tensor3::from_vec(n, self.values.as_slice()[n * n..].to_vec());
        (a_tilde, c_tilde)
    }

    /// Inverse of `unpack`.
    pub fn pack(a_tilde: &DMatrix<f64>, c_tilde: &Tensor3) -> Result<Self> {
        let n = a_tilde.nrows();
        if a_tilde.ncols() != n || c_tilde.dim() != n {
            return Err(RomError::DimensionMismatch(
                "pack: operator dimensions disagree".into(),
            ));
        }
        let mut values = Vec::with_capacity(Self::param_len(n));
        for i in 0..n {
            for j in 0..n {
                values.push(a_tilde[(i, j)]);
            }
        }
        values.extend(c_tilde.iter());
        Self::from_values(n, DVector::from_vec(values))
    }
}

/// Time evolution of the reduced amplitude coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RomTrajectory {
    pub times: Vec<f64>,
    /// N_t × N_r; row i is the state at `times[i]`.
    pub states: DMatrix<f64>,
}

impl RomTrajectory {
    /// Views the trajectory as a snapshot matrix with unit weights
    /// (coefficient space as the "full order" space).
    pub fn to_snapshots(&self) -> Result<SnapshotMatrix> {
        SnapshotMatrix::new(
            self.states.transpose(),
            self.times.clone(),
            DVector::from_element(self.states.ncols(), 1.0),
        )
    }
}

/// Assembles the reduced operators by Galerkin projection of the discrete
/// diffusion and convection operators onto the basis.
///
/// Diffusion is the full order model's linear part: the three-point
/// Laplacian with zero (homogeneous Dirichlet) ghost values, so its
/// boundary closure carries over to the reduced system; on interior cells
/// it annihilates constants. Convection uses the upwind-left bilinear face
/// flux G_{c+1/2} = u_c v_c / 2 with zero ghosts, which is the exact
/// bilinearization of the full order model's Engquist-Osher flux wherever
/// the transported field stays non-negative. Sign changes of the field,
/// boundary-flux details and mode truncation are what the correction term
/// absorbs.
pub fn assemble_reduced_operators(
    basis: &PodBasis,
    grid: &Grid1D,
    viscosity: f64,
) -> Result<ReducedSystem> {
    let n_cells = grid.n_cells();
    if basis.modes.nrows() != n_cells {
        return Err(RomError::IncompatibleDiscretization(format!(
            "basis has {} cells, grid has {}",
            basis.modes.nrows(),
            n_cells
        )));
    }
    let dx = grid.dx();
    if basis
        .weights
        .iter()
        .any(|w| (w - dx).abs() > 1e-12 * dx.abs())
    {
        return Err(RomError::IncompatibleDiscretization(
            "basis weights do not match the grid cell measure".into(),
        ));
    }
    let n_r = basis.modes.ncols();
    let phi = &basis.modes;

    // gram = Φᵀ W Φ
    let mut weighted = phi.clone();
    for mut row in weighted.row_iter_mut() {
        row *= dx;
    }
    let gram = phi.transpose() * &weighted;

    // A_ij = Σ_c dx φ_i[c] (D₀ φ_j)[c] with D₀ the zero-ghost Laplacian.
    let mut diffusion = DMatrix::zeros(n_r, n_r);
    for j in 0..n_r {
        for i in 0..n_r {
            let mut acc = 0.0;
            for c in 0..n_cells {
                let left = if c == 0 { 0.0 } else { phi[(c - 1, j)] };
                let right = if c + 1 == n_cells { 0.0 } else { phi[(c + 1, j)] };
                let lap = (left - 2.0 * phi[(c, j)] + right) / (dx * dx);
                acc += phi[(c, i)] * lap;
            }
            diffusion[(i, j)] = dx * acc;
        }
    }

    // C_ijk = Σ_c dx φ_i[c] K(φ_j, φ_k)[c] with K the upwind bilinear flux
    // divergence.
    let mut convection = Tensor3::zeros(n_r);
    let mut k_buf = vec![0.0; n_cells];
    for j in 0..n_r {
        for k in 0..n_r {
            upwind_flux_divergence(
                phi.column(j).as_slice(),
                phi.column(k).as_slice(),
                dx,
                &mut k_buf,
            );
            for i in 0..n_r {
                let mut acc = 0.0;
                for c in 0..n_cells {
                    acc += phi[(c, i)] * k_buf[c];
                }
                convection[(i, j, k)] = dx * acc;
            }
        }
    }

    let system = ReducedSystem {
        gram,
        diffusion,
        convection,
        viscosity,
    };
    system.validate()?;
    Ok(system)
}

/// K(u, v)[c] = (G_{c+1/2} − G_{c−1/2})/dx with the upwind-left face flux
/// G_{c+1/2} = u_c v_c / 2 and zero ghost values; for u = v ≥ 0 this equals
/// the Engquist-Osher flux divergence of the full order model.
pub(crate) fn upwind_flux_divergence(u: &[f64], v: &[f64], dx: f64, out: &mut [f64]) {
    // face(c) sits between cells c-1 and c; the upwind (left) cell carries it
    let face = |c: usize| -> f64 {
        if c == 0 {
            0.0
        } else {
            0.5 * u[c - 1] * v[c - 1]
        }
    };
    for c in 0..u.len() {
        out[c] = (face(c + 1) - face(c)) / dx;
    }
}

/// Integrates M ȧ = ν (A + Ã) a − aᵀ (C + C̃) a on the given time grid.
/// Each implicit step runs Newton to residual ≤ 1e−12 (2-norm) or 25
/// iterations.
pub fn integrate_rom(
    system: &ReducedSystem,
    correction: &CorrectionVector,
    a0: &DVector<f64>,
    times: &[f64],
) -> Result<RomTrajectory> {
    match integrate_rom_lenient(system, correction, a0, times)? {
        (traj, None) => Ok(traj),
        (_, Some(err)) => Err(err),
    }
}

/// Like `integrate_rom`, but a mid-run divergence or Newton failure returns
/// the trajectory up to the last completed step together with the error,
/// instead of discarding everything.
pub fn integrate_rom_lenient(
    system: &ReducedSystem,
    correction: &CorrectionVector,
    a0: &DVector<f64>,
    times: &[f64],
) -> Result<(RomTrajectory, Option<RomError>)> {
    system.validate()?;
    let n = system.n_modes();
    if correction.n_modes() != n {
        return Err(RomError::DimensionMismatch(format!(
            "correction is for {} modes, system has {}",
            correction.n_modes(),
            n
        )));
    }
    if a0.len() != n {
        return Err(RomError::DimensionMismatch(format!(
            "initial state has {} entries, system has {} modes",
            a0.len(),
            n
        )));
    }
    if a0.iter().any(|v| !v.is_finite()) {
        return Err(RomError::InvalidArgument(
            "initial state must be finite".into(),
        ));
    }
    if times.is_empty() || !strictly_increasing(times) {
        return Err(RomError::InvalidArgument(
            "times must be non-empty and strictly increasing".into(),
        ));
    }

    // Adding an all-zero correction must not perturb the operators, so the
    // uncorrected path shares bits with the corrected one.
    let (a_tot, c_tot);
    if correction.is_zero() {
        a_tot = system.diffusion.clone();
        c_tot = system.convection.clone();
    } else {
        let (a_tilde, c_tilde) = correction.unpack();
        a_tot = &system.diffusion + a_tilde;
        c_tot = system.convection.add(&c_tilde);
    }
    let nu = system.viscosity;

    let rhs = |a: &DVector<f64>| -> DVector<f64> { &a_tot * a * nu - c_tot.quadratic_form(a) };
    let rhs_jac =
        |a: &DVector<f64>| -> DMatrix<f64> { &a_tot * nu - c_tot.quadratic_jacobian(a) };

    let n_t = times.len();
    let mut states = DMatrix::zeros(n_t, n);
    states.row_mut(0).copy_from(&a0.transpose());

    let mut prev = a0.clone();
    let mut prev2: Option<DVector<f64>> = None;
    let mut h_prev = 0.0;
    let mut completed = n_t;
    let mut failure: Option<RomError> = None;

    'steps: for step in 1..n_t {
        let h = times[step] - times[step - 1];
        // Variable-step BDF2 weights for the derivative at the new level;
        // the first step falls back to implicit Euler.
        let (c0, c1, c2) = match &prev2 {
            None => (1.0 / h, -1.0 / h, 0.0),
            Some(_) => {
                let w = h + h_prev;
                (
                    (2.0 * h + h_prev) / (h * w),
                    -w / (h * h_prev),
                    h / (h_prev * w),
                )
            }
        };

        let mut x = match &prev2 {
            Some(p2) => &prev + (&prev - p2) * (h / h_prev),
            None => prev.clone(),
        };

        let gram_norm = system.gram.norm();
        let res_scale = |x: &DVector<f64>, f: &DVector<f64>| -> f64 {
            gram_norm
                * (c0.abs() * x.norm()
                    + c1.abs() * prev.norm()
                    + c2.abs() * prev2.as_ref().map_or(0.0, |p| p.norm()))
                + f.norm()
        };

        let mut converged = false;
        let mut res_norm = f64::INFINITY;
        for _ in 0..25 {
            let f = rhs(&x);
            let mut res = &system.gram * &x * c0 - &f;
            res += &system.gram * &prev * c1;
            if let Some(p2) = &prev2 {
                res += &system.gram * p2 * c2;
            }
            res_norm = res.norm();
            if !res_norm.is_finite() {
                failure = Some(RomError::Divergence {
                    step,
                    time: times[step],
                });
                completed = step;
                break 'steps;
            }
            // Absolute 1e-12 plus the same amount relative to the step terms,
            // which scale like 1/h.
            if res_norm <= 1e-12 * (1.0 + res_scale(&x, &f)) {
                converged = true;
                break;
            }
            let jac = &system.gram * c0 - rhs_jac(&x);
            let delta = match jac.lu().solve(&(-res)) {
                Some(d) => d,
                None => {
                    failure = Some(RomError::NewtonFailure {
                        step,
                        time: times[step],
                        residual: res_norm,
                        iters: 25,
                    });
                    completed = step;
                    break 'steps;
                }
            };
            x += delta;
            if x.iter().any(|v| !v.is_finite()) {
                failure = Some(RomError::Divergence {
                    step,
                    time: times[step],
                });
                completed = step;
                break 'steps;
            }
        }
        if !converged {
            let f = rhs(&x);
            let mut res = &system.gram * &x * c0 - &f;
            res += &system.gram * &prev * c1;
            if let Some(p2) = &prev2 {
                res += &system.gram * p2 * c2;
            }
            if res.norm() > 1e-12 * (1.0 + res_scale(&x, &f)) {
                failure = Some(RomError::NewtonFailure {
                    step,
                    time: times[step],
                    residual: res_norm,
                    iters: 25,
                });
                completed = step;
                break 'steps;
            }
        }

        states.row_mut(step).copy_from(&x.transpose());
        prev2 = Some(std::mem::replace(&mut prev, x));
        h_prev = h;
    }

    let traj = RomTrajectory {
        times: times[..completed].to_vec(),
        states: states.rows(0, completed).into_owned(),
    };
    Ok((traj, failure))
}

/// Per-time relative L² error between two snapshot sets on the same grid.
#[derive(Debug, Clone)]
pub struct ErrorSeries {
    pub times: Vec<f64>,
    /// NaN at indices where the reference norm vanishes.
    pub values: Vec<f64>,
    /// Indices flagged as undefined (zero reference norm).
    pub undefined: Vec<usize>,
}

impl ErrorSeries {
    pub fn max_defined(&self) -> Option<f64> {
        self.values
            .iter()
            .filter(|v| v.is_finite())
            .cloned()
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }

    /// Mean over the defined entries with times inside `[t0, t1]`.
    pub fn mean_in_window(&self, t0: f64, t1: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .times
            .iter()
            .zip(self.values.iter())
            .filter(|(t, v)| **t >= t0 && **t <= t1 && v.is_finite())
            .map(|(_, v)| *v)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// ε(t_i) = ‖reference(t_i) − candidate(t_i)‖_W / ‖reference(t_i)‖_W.
pub fn relative_l2_error(
    reference: &SnapshotMatrix,
    candidate: &SnapshotMatrix,
) -> Result<ErrorSeries> {
    if reference.weights != candidate.weights {
        return Err(RomError::IncompatibleDiscretization(
            "error series needs matching weights".into(),
        ));
    }
    if reference.times != candidate.times {
        return Err(RomError::IncompatibleDiscretization(
            "error series needs matching time stamps".into(),
        ));
    }
    if reference.n_cells() != candidate.n_cells() {
        return Err(RomError::DimensionMismatch(
            "error series needs matching cell counts".into(),
        ));
    }
    let mut values = Vec::with_capacity(reference.n_times());
    let mut undefined = Vec::new();
    for t in 0..reference.n_times() {
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..reference.n_cells() {
            let w = reference.weights[c];
            let d = reference.values[(c, t)] - candidate.values[(c, t)];
            num += w * d * d;
            den += w * reference.values[(c, t)] * reference.values[(c, t)];
        }
        if den == 0.0 {
            undefined.push(t);
            values.push(f64::NAN);
        } else {
            values.push((num / den).sqrt());
        }
    }
    Ok(ErrorSeries {
        times: reference.times.clone(),
        values,
        undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{simulate_burgers, BurgersRun};
    use crate::pod::compute_pod;

    #[test]
    fn packing_round_trip() {
        let n = 3;
        let a = DMatrix::from_fn(n, n, |i, j| (i * n + j) as f64 * 0.1 - 0.3);
        let c = Tensor3::from_fn(n, |i, j, k| ((i + 2 * j + 3 * k) % 7) as f64 - 3.0);
        let q = CorrectionVector::pack(&a, &c).unwrap();
        assert_eq!(q.len(), CorrectionVector::param_len(n));
        let (a2, c2) = q.unpack();
        assert_eq!(a, a2);
        assert_eq!(c, c2);
        let q2 = CorrectionVector::pack(&a2, &c2).unwrap();
        assert_eq!(q, q2);
    }

    #[test]
    fn zero_operators_keep_state() {
        let n = 3;
        let system = ReducedSystem {
            gram: DMatrix::identity(n, n),
            diffusion: DMatrix::zeros(n, n),
            convection: Tensor3::zeros(n),
            viscosity: 1.0,
        };
        let a0 = DVector::from_vec(vec![1.0, 2.0, -0.5]);
        let times = vec![0.0, 0.1, 0.25, 0.5];
        let traj = integrate_rom(&system, &CorrectionVector::zeros(n), &a0, &times).unwrap();
        for r in 0..times.len() {
            for j in 0..n {
                assert_eq!(traj.states[(r, j)], a0[j]);
            }
        }
    }

    #[test]
    fn exponential_decay_matches_analytic() {
        let n = 2;
        let system = ReducedSystem {
            gram: DMatrix::identity(n, n),
            diffusion: -DMatrix::identity(n, n),
            convection: Tensor3::zeros(n),
            viscosity: 1.0,
        };
        let a0 = DVector::from_vec(vec![1.0, -0.7]);
        let times: Vec<f64> = (0..=1000).map(|i| i as f64 * 1e-3).collect();
        let traj = integrate_rom(&system, &CorrectionVector::zeros(n), &a0, &times).unwrap();
        let mut max_rel = 0.0f64;
        for (r, t) in times.iter().enumerate() {
            for j in 0..n {
                let exact = a0[j] * (-t).exp();
                max_rel = max_rel.max((traj.states[(r, j)] - exact).abs() / exact.abs());
            }
        }
        assert!(max_rel <= 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn integration_is_deterministic() {
        let n = 3;
        let system = ReducedSystem {
            gram: DMatrix::identity(n, n),
            diffusion: DMatrix::from_fn(n, n, |i, j| if i == j { -0.6 } else { 0.2 }),
            convection: Tensor3::from_fn(n, |i, j, k| 0.1 * ((i + j) as f64 - k as f64)),
            viscosity: 0.9,
        };
        let q = CorrectionVector::sparse(n, &[(0, 0.05), (n * n + 3, -0.02)]).unwrap();
        let a0 = DVector::from_vec(vec![0.4, -0.2, 0.8]);
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.01).collect();
        let t1 = integrate_rom(&system, &q, &a0, &times).unwrap();
        let t2 = integrate_rom(&system, &q, &a0, &times).unwrap();
        assert_eq!(t1.states, t2.states);
    }

    #[test]
    fn zero_correction_is_bitwise_neutral() {
        let n = 2;
        let system = ReducedSystem {
            gram: DMatrix::identity(n, n),
            diffusion: DMatrix::from_fn(n, n, |i, j| -((i == j) as i32 as f64) + 0.1),
            convection: Tensor3::from_fn(n, |i, j, k| 0.2 * (i as f64 - j as f64 + k as f64)),
            viscosity: 1.3,
        };
        let a0 = DVector::from_vec(vec![0.9, -0.4]);
        let times: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
        let with_zero =
            integrate_rom(&system, &CorrectionVector::zeros(n), &a0, &times).unwrap();
        let with_sparse_zero =
            integrate_rom(&system, &CorrectionVector::sparse(n, &[]).unwrap(), &a0, &times)
                .unwrap();
        assert_eq!(with_zero.states, with_sparse_zero.states);
    }

    #[test]
    fn bdf2_is_second_order() {
        let n = 1;
        let system = ReducedSystem {
            gram: DMatrix::identity(1, 1),
            diffusion: -DMatrix::identity(1, 1),
            convection: Tensor3::zeros(1),
            viscosity: 1.0,
        };
        let a0 = DVector::from_element(1, 1.0);
        let err_at = |dt: f64| {
            let n_steps = (1.0 / dt).round() as usize;
            let times: Vec<f64> = (0..=n_steps).map(|i| i as f64 * dt).collect();
            let traj =
                integrate_rom(&system, &CorrectionVector::zeros(n), &a0, &times).unwrap();
            (traj.states[(n_steps, 0)] - (-1.0f64).exp()).abs()
        };
        let e1 = err_at(0.02);
        let e2 = err_at(0.01);
        let ratio = e1 / e2;
        assert!(
            (ratio - 4.0).abs() <= 0.5,
            "BDF2 error ratio {ratio}, expected 4 ± 0.5"
        );
    }

    #[test]
    fn divergence_is_reported() {
        // ȧ = a² blows up at t = 1 for a(0) = 1.
        let system = ReducedSystem {
            gram: DMatrix::identity(1, 1),
            diffusion: DMatrix::zeros(1, 1),
            convection: Tensor3::from_vec(1, vec![-1.0]),
            viscosity: 1.0,
        };
        let times: Vec<f64> = (0..=300).map(|i| i as f64 * 0.005).collect();
        let res = integrate_rom(
            &system,
            &CorrectionVector::zeros(1),
            &DVector::from_element(1, 1.0),
            &times,
        );
        match res {
            Err(RomError::Divergence { step, .. }) | Err(RomError::NewtonFailure { step, .. }) => {
                assert!(step > 100, "blow-up reported too early (step {step})");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn mode_permutation_equivariance() {
        let n = 3;
        let system = ReducedSystem {
            gram: DMatrix::identity(n, n),
            diffusion: DMatrix::from_fn(n, n, |i, j| -0.4 * ((i == j) as i32 as f64) + 0.07 * (i as f64 - j as f64)),
            convection: Tensor3::from_fn(n, |i, j, k| 0.13 * ((2 * i + j) as f64 - 1.5 * k as f64)),
            viscosity: 0.8,
        };
        let q = CorrectionVector::sparse(n, &[(2, 0.03), (n * n + 5, -0.04)]).unwrap();
        let a0 = DVector::from_vec(vec![0.5, -0.1, 0.7]);
        let times: Vec<f64> = (0..=50).map(|i| i as f64 * 0.02).collect();
        let base = integrate_rom(&system, &q, &a0, &times).unwrap();

        // permutation sigma: new index -> old index
        let sigma = [2usize, 0, 1];
        let perm_mat = DMatrix::from_fn(n, n, |i, j| system.diffusion[(sigma[i], sigma[j])]);
        let perm_conv =
            Tensor3::from_fn(n, |i, j, k| system.convection[(sigma[i], sigma[j], sigma[k])]);
        let (qa, qc) = q.unpack();
        let perm_q = CorrectionVector::pack(
            &DMatrix::from_fn(n, n, |i, j| qa[(sigma[i], sigma[j])]),
            &Tensor3::from_fn(n, |i, j, k| qc[(sigma[i], sigma[j], sigma[k])]),
        )
        .unwrap();
        let perm_system = ReducedSystem {
            gram: DMatrix::identity(n, n),
            diffusion: perm_mat,
            convection: perm_conv,
            viscosity: system.viscosity,
        };
        let perm_a0 = DVector::from_fn(n, |i, _| a0[sigma[i]]);
        let perm = integrate_rom(&perm_system, &perm_q, &perm_a0, &times).unwrap();
        for r in 0..times.len() {
            for i in 0..n {
                let diff = (perm.states[(r, i)] - base.states[(r, sigma[i])]).abs();
                assert!(diff < 1e-9, "permutation equivariance violated by {diff}");
            }
        }
    }

    #[test]
    fn general_gram_is_solved() {
        // M ȧ = -a with M = diag(2) is a(t) = a0 e^{-t/2}.
        let system = ReducedSystem {
            gram: DMatrix::from_element(1, 1, 2.0),
            diffusion: -DMatrix::identity(1, 1),
            convection: Tensor3::zeros(1),
            viscosity: 1.0,
        };
        let times: Vec<f64> = (0..=400).map(|i| i as f64 * 0.0025).collect();
        let traj = integrate_rom(
            &system,
            &CorrectionVector::zeros(1),
            &DVector::from_element(1, 1.0),
            &times,
        )
        .unwrap();
        let exact = (-0.5f64).exp();
        assert!((traj.states[(400, 0)] - exact).abs() < 1e-6);
    }

    #[test]
    fn assembly_matches_direct_summation() {
        // N_r = 2 basis on a 16-cell grid: compare every tensor entry against
        // brute-force weighted inner products.
        let grid = Grid1D::new(16, 0.0, 1.0).unwrap();
        let init = DVector::from_vec(
            grid.cell_centers()
                .iter()
                .map(|x| (std::f64::consts::PI * x).sin() + 0.3 * (2.0 * std::f64::consts::PI * x).sin())
                .collect(),
        );
        let snaps = simulate_burgers(
            &grid,
            0.05,
            &init,
            (0.0, 0.0),
            BurgersRun {
                t_end: 0.5,
                dt: 0.01,
                save_every: 2,
            },
        )
        .unwrap();
        let basis = compute_pod(&snaps, 2).unwrap();
        let system = assemble_reduced_operators(&basis, &grid, 0.05).unwrap();

        // POD modes are W-orthonormal, so the Gram matrix is the identity.
        assert!((&system.gram - DMatrix::identity(2, 2)).norm() < 1e-10);

        let dx = grid.dx();
        let n_c = grid.n_cells();
        let phi = &basis.modes;
        for i in 0..2 {
            for j in 0..2 {
                // gram
                let mut g = 0.0;
                for c in 0..n_c {
                    g += dx * phi[(c, i)] * phi[(c, j)];
                }
                assert!((system.gram[(i, j)] - g).abs() < 1e-12);
                // diffusion: brute-force weighted inner product with the
                // zero-ghost Laplacian
                let mut a = 0.0;
                for c in 0..n_c {
                    let left = if c == 0 { 0.0 } else { phi[(c - 1, j)] };
                    let right = if c + 1 == n_c { 0.0 } else { phi[(c + 1, j)] };
                    a += dx * phi[(c, i)] * (left - 2.0 * phi[(c, j)] + right) / (dx * dx);
                }
                assert!((system.diffusion[(i, j)] - a).abs() < 1e-12);
                for k in 0..2 {
                    // convection: upwind-left bilinear faces, zero ghosts
                    let prod = |c: isize| -> f64 {
                        if c < 0 || c as usize >= n_c {
                            0.0
                        } else {
                            phi[(c as usize, j)] * phi[(c as usize, k)]
                        }
                    };
                    let mut cv = 0.0;
                    for c in 0..n_c as isize {
                        let g_right = 0.5 * prod(c);
                        let g_left = 0.5 * prod(c - 1);
                        cv += dx * phi[(c as usize, i)] * (g_right - g_left) / dx;
                    }
                    assert!(
                        (system.convection[(i, j, k)] - cv).abs() < 1e-12,
                        "convection entry ({i},{j},{k})"
                    );
                }
            }
        }
    }

    #[test]
    fn constant_mode_diffusion_is_boundary_closure_only() {
        // The interior Laplacian stencil annihilates constants; what is
        // left in the assembled entry is exactly the Dirichlet boundary
        // closure -2 c^2 / dx of the two wall cells.
        let grid = Grid1D::new(10, 0.0, 1.0).unwrap();
        let dx = grid.dx();
        let val = 1.0 / (10.0 * dx).sqrt();
        let basis = PodBasis {
            modes: DMatrix::from_element(10, 1, val),
            singular_values: DVector::from_element(1, 1.0),
            weights: grid.weights(),
            total_energy: 1.0,
        };
        let system = assemble_reduced_operators(&basis, &grid, 1.0).unwrap();
        let expect = -2.0 * val * val / dx;
        assert!(
            (system.diffusion[(0, 0)] - expect).abs() < 1e-12,
            "closure entry {} vs {}",
            system.diffusion[(0, 0)],
            expect
        );
        assert!((system.gram[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn error_series_basics() {
        let grid = Grid1D::new(4, 0.0, 1.0).unwrap();
        let times = vec![0.0, 1.0, 2.0];
        let values = DMatrix::from_fn(4, 3, |r, c| (r + 1) as f64 * (c as f64 + 0.5));
        let reference = SnapshotMatrix::new(values.clone(), times.clone(), grid.weights()).unwrap();

        let same = relative_l2_error(&reference, &reference).unwrap();
        assert!(same.values.iter().all(|v| *v == 0.0));

        let zero = SnapshotMatrix::new(DMatrix::zeros(4, 3), times.clone(), grid.weights()).unwrap();
        let ones = relative_l2_error(&reference, &zero).unwrap();
        assert!(ones.values.iter().all(|v| (v - 1.0).abs() < 1e-14));

        let scaled =
            SnapshotMatrix::new(&values * 1.1, times.clone(), grid.weights()).unwrap();
        let tenth = relative_l2_error(&reference, &scaled).unwrap();
        assert!(tenth
            .values
            .iter()
            .all(|v| (v - 0.1).abs() < 1e-14), "{:?}", tenth.values);

        // Zero reference norm at one time index is flagged, not dropped.
        let mut ref2 = reference.clone();
        ref2.values.column_mut(1).fill(0.0);
        let with_undef = relative_l2_error(&ref2, &zero).unwrap();
        assert_eq!(with_undef.undefined, vec![1]);
        assert!(with_undef.values[1].is_nan());
        assert_eq!(with_undef.values.len(), 3);
    }
}
