//! Desk-scale full order models: a 1D viscous Burgers solver and a synthetic
//! quadratic-ODE truth generator with a known correction term.
//!
//! The Burgers solver integrates u_t + (u²/2)_x = ν u_xx on a uniform
//! cell-centered grid with Dirichlet values injected via ghost cells:
//! Engquist-Osher upwind flux for convection, central second-order diffusion,
//! BDF2 in time (backward Euler on the first step). The implicit step is
//! solved by Newton iteration with a tridiagonal Jacobian.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RomError};
use crate::rom::{self, CorrectionVector, ReducedSystem, RomTrajectory};
use crate::tensor::Tensor3;

/// Uniform cell-centered 1D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    n_cells: usize,
    x_min: f64,
    x_max: f64,
}

impl Grid1D {
    pub fn new(n_cells: usize, x_min: f64, x_max: f64) -> Result<Self> {
        if n_cells == 0 {
            return Err(RomError::InvalidArgument("grid needs n_cells >= 1".into()));
        }
        if !(x_max - x_min).is_finite() || x_max <= x_min {
            return Err(RomError::InvalidArgument(format!(
                "grid needs x_max > x_min, got [{x_min}, {x_max}]"
            )));
        }
        Ok(Grid1D {
            n_cells,
            x_min,
            x_max,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.n_cells as f64
    }

    pub fn cell_centers(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n_cells)
            .map(|i| self.x_min + (i as f64 + 0.5) * dx)
            .collect()
    }

    /// Cell measures for the weighted L² inner product.
    pub fn weights(&self) -> DVector<f64> {
        DVector::from_element(self.n_cells, self.dx())
    }
}

/// Full-order state snapshots over time. Columns are states, one per entry
/// of `times`; `weights` carries the cell measures of the discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    pub values: DMatrix<f64>,
    pub times: Vec<f64>,
    pub weights: DVector<f64>,
}

impl SnapshotMatrix {
    pub fn new(values: DMatrix<f64>, times: Vec<f64>, weights: DVector<f64>) -> Result<Self> {
        let s = SnapshotMatrix {
            values,
            times,
            weights,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.ncols() != self.times.len() {
            return Err(RomError::DimensionMismatch(format!(
                "snapshot matrix has {} columns but {} time stamps",
                self.values.ncols(),
                self.times.len()
            )));
        }
        if self.values.nrows() != self.weights.len() {
            return Err(RomError::DimensionMismatch(format!(
                "snapshot matrix has {} rows but {} weights",
                self.values.nrows(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(RomError::InvalidArgument(
                "snapshot weights must be finite and positive".into(),
            ));
        }
        if !strictly_increasing(&self.times) {
            return Err(RomError::InvalidArgument(
                "snapshot times must be strictly increasing".into(),
            ));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(RomError::InvalidArgument(
                "snapshot matrix contains non-finite entries".into(),
            ));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Weighted L² norm of the state at time index `t`.
    pub fn norm_at(&self, t: usize) -> f64 {
        let col = self.values.column(t);
        col.iter()
            .zip(self.weights.iter())
            .map(|(u, w)| w * u * u)
            .sum::<f64>()
            .sqrt()
    }

    /// Keep only snapshots with `time >= t_from`.
    pub fn discard_before(&self, t_from: f64) -> Result<SnapshotMatrix> {
        let keep: Vec<usize> = (0..self.times.len())
            .filter(|&i| self.times[i] >= t_from)
            .collect();
        if keep.is_empty() {
            return Err(RomError::InvalidArgument(format!(
                "discard_before={t_from} removes every snapshot"
            )));
        }
        let values = DMatrix::from_fn(self.n_cells(), keep.len(), |r, c| {
            self.values[(r, keep[c])]
        });
        let times = keep.iter().map(|&i| self.times[i]).collect();
        SnapshotMatrix::new(values, times, self.weights.clone())
    }
}

pub(crate) fn strictly_increasing(times: &[f64]) -> bool {
    times.windows(2).all(|w| w[1] > w[0]) && times.iter().all(|t| t.is_finite())
}

/// Ground-truth quadratic ODE with a known correction, used to verify the
/// identification machinery end to end.
#[derive(Debug, Clone)]
pub struct QuadraticTruth {
    pub dim: usize,
    pub gram: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
    pub convection: Tensor3,
    pub true_correction: CorrectionVector,
    pub viscosity: f64,
}

impl QuadraticTruth {
    pub fn validate(&self) -> Result<()> {
        if self.gram.nrows() != self.dim
            || self.gram.ncols() != self.dim
            || self.diffusion.nrows() != self.dim
            || self.diffusion.ncols() != self.dim
            || self.convection.dim() != self.dim
            || self.true_correction.n_modes() != self.dim
        {
            return Err(RomError::DimensionMismatch(
                "quadratic truth fields disagree on dim".into(),
            ));
        }
        let finite = self.gram.iter().all(|v| v.is_finite())
            && self.diffusion.iter().all(|v| v.is_finite())
            && self.convection.iter().all(|v| v.is_finite())
            && self.viscosity.is_finite();
        if !finite {
            return Err(RomError::InvalidArgument(
                "quadratic truth contains non-finite entries".into(),
            ));
        }
        Ok(())
    }

    /// The base reduced system, i.e. the truth with its correction removed.
    pub fn base_system(&self) -> ReducedSystem {
        ReducedSystem {
            gram: self.gram.clone(),
            diffusion: self.diffusion.clone(),
            convection: self.convection.clone(),
            viscosity: self.viscosity,
        }
    }
}

/// Integrates the corrected quadratic ODE with the true correction fixed.
/// Reuses the ROM integrator verbatim so that integrator mismatch cannot
/// confound identification tests.
pub fn simulate_quadratic_truth(
    truth: &QuadraticTruth,
    a0: &DVector<f64>,
    times: &[f64],
) -> Result<RomTrajectory> {
    truth.validate()?;
    rom::integrate_rom(&truth.base_system(), &truth.true_correction, a0, times)
}

/// Options for `simulate_burgers` beyond the PDE data itself.
#[derive(Debug, Clone, Copy)]
pub struct BurgersRun {
    pub t_end: f64,
    pub dt: f64,
    pub save_every: usize,
}

/// Runs the viscous Burgers FOM and collects snapshots every
/// `save_every`-th step (the initial state is always included).
///
/// The step count is `round(t_end / dt)` and the actual step is
/// `t_end / n_steps`, so the final time is hit exactly.
pub fn simulate_burgers(
    grid: &Grid1D,
    viscosity: f64,
    initial: &DVector<f64>,
    boundary: (f64, f64),
    run: BurgersRun,
) -> Result<SnapshotMatrix> {
    if run.dt <= 0.0 || !run.dt.is_finite() {
        return Err(RomError::InvalidArgument("dt must be positive".into()));
    }
    if run.t_end <= 0.0 || !run.t_end.is_finite() {
        return Err(RomError::InvalidArgument("t_end must be positive".into()));
    }
    if viscosity < 0.0 || !viscosity.is_finite() {
        return Err(RomError::InvalidArgument(
            "viscosity must be non-negative".into(),
        ));
    }
    if run.save_every == 0 {
        return Err(RomError::InvalidArgument("save_every must be >= 1".into()));
    }
    if initial.len() != grid.n_cells() {
        return Err(RomError::DimensionMismatch(format!(
            "initial state has {} cells, grid has {}",
            initial.len(),
            grid.n_cells()
        )));
    }
    if initial.iter().any(|v| !v.is_finite())
        || !boundary.0.is_finite()
        || !boundary.1.is_finite()
    {
        return Err(RomError::InvalidArgument(
            "initial/boundary data must be finite".into(),
        ));
    }

    let n_steps = ((run.t_end / run.dt).round() as usize).max(1);
    let h = run.t_end / n_steps as f64;
    let n = grid.n_cells();
    let dx = grid.dx();

    let mut saved_cols: Vec<DVector<f64>> = vec![initial.clone()];
    let mut saved_times: Vec<f64> = vec![0.0];

    let mut u_prev = initial.clone();
    let mut u_prev2: Option<DVector<f64>> = None;

    let mut rhs_buf = DVector::zeros(n);
    for step in 1..=n_steps {
        let t = step as f64 * h;
        // Derivative weights at the new time level: BDF2 after the first step.
        let (c0, c1, c2) = if u_prev2.is_none() {
            (1.0 / h, -1.0 / h, 0.0)
        } else {
            (1.5 / h, -2.0 / h, 0.5 / h)
        };

        // Predictor: linear extrapolation when history is available.
        let mut x = match &u_prev2 {
            Some(p2) => &u_prev * 2.0 - p2,
            None => u_prev.clone(),
        };

        let mut converged = false;
        let mut residual_norm = f64::INFINITY;
        for _ in 0..25 {
            burgers_rhs(&x, boundary, viscosity, dx, &mut rhs_buf);
            let mut res = DVector::zeros(n);
            for i in 0..n {
                let hist = c2 * u_prev2.as_ref().map_or(0.0, |p| p[i]);
                res[i] = c0 * x[i] + c1 * u_prev[i] + hist - rhs_buf[i];
            }
            residual_norm = res.norm();
            if !residual_norm.is_finite() {
                return Err(RomError::Divergence { step, time: t });
            }
            // 1e-12 relative to the magnitude of the step terms; the absolute
            // scale of the residual grows like 1/h and nu/dx^2.
            let scale = c0.abs() * x.norm()
                + c1.abs() * u_prev.norm()
                + c2.abs() * u_prev2.as_ref().map_or(0.0, |p| p.norm())
                + rhs_buf.norm();
            if residual_norm <= 1e-12 * (1.0 + scale) {
                converged = true;
                break;
            }
            // Tridiagonal Newton system J dx = -res.
            let (mut sub, mut diag, mut sup) = burgers_jacobian_bands(&x, viscosity, dx);
            for d in diag.iter_mut() {
                *d += c0;
            }
            let delta = solve_tridiagonal(&mut sub, &mut diag, &mut sup, -res);
            x += delta;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(RomError::Divergence { step, time: t });
            }
        }
        if !converged {
            // One extra residual evaluation may already be below tolerance.
            burgers_rhs(&x, boundary, viscosity, dx, &mut rhs_buf);
            let mut res_norm2 = 0.0;
            for i in 0..n {
                let hist = c2 * u_prev2.as_ref().map_or(0.0, |p| p[i]);
                let r = c0 * x[i] + c1 * u_prev[i] + hist - rhs_buf[i];
                res_norm2 += r * r;
            }
            let scale = c0.abs() * x.norm()
                + c1.abs() * u_prev.norm()
                + c2.abs() * u_prev2.as_ref().map_or(0.0, |p| p.norm())
                + rhs_buf.norm();
            if res_norm2.sqrt() > 1e-12 * (1.0 + scale) {
                return Err(RomError::NewtonFailure {
                    step,
                    time: t,
                    residual: residual_norm,
                    iters: 25,
                });
            }
        }

        u_prev2 = Some(std::mem::replace(&mut u_prev, x));
        if step % run.save_every == 0 {
            saved_cols.push(u_prev.clone());
            saved_times.push(t);
        }
    }

    let values = DMatrix::from_fn(n, saved_cols.len(), |r, c| saved_cols[c][r]);
    SnapshotMatrix::new(values, saved_times, grid.weights())
}

// Engquist-Osher flux for f(u) = u²/2.
fn eo_flux(u_left: f64, u_right: f64) -> f64 {
    let up = u_left.max(0.0);
    let um = u_right.min(0.0);
    0.5 * (up * up + um * um)
}

fn burgers_rhs(u: &DVector<f64>, bc: (f64, f64), nu: f64, dx: f64, out: &mut DVector<f64>) {
    let n = u.len();
    let at = |i: isize| -> f64 {
        if i < 0 {
            bc.0
        } else if i as usize >= n {
            bc.1
        } else {
            u[i as usize]
        }
    };
    for i in 0..n {
        let ii = i as isize;
        let flux_right = eo_flux(at(ii), at(ii + 1));
        let flux_left = eo_flux(at(ii - 1), at(ii));
        let diff = (at(ii - 1) - 2.0 * u[i] + at(ii + 1)) / (dx * dx);
        out[i] = -(flux_right - flux_left) / dx + nu * diff;
    }
}

// Bands of -d(rhs)/du; the caller adds the time-derivative weight on the diagonal.
fn burgers_jacobian_bands(
    u: &DVector<f64>,
    nu: f64,
    dx: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = u.len();
    let nud = nu / (dx * dx);
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    for i in 0..n {
        diag[i] = u[i].abs() / dx + 2.0 * nud;
        if i > 0 {
            sub[i] = -(u[i - 1].max(0.0) / dx + nud);
        }
        if i + 1 < n {
            sup[i] = u[i + 1].min(0.0) / dx - nud;
        }
    }
    (sub, diag, sup)
}

// Thomas algorithm; relies on the diagonal dominance of the implicit
// upwind/diffusion stencil, so no pivoting.
fn solve_tridiagonal(
    sub: &mut [f64],
    diag: &mut [f64],
    sup: &mut [f64],
    mut rhs: DVector<f64>,
) -> DVector<f64> {
    let n = diag.len();
    for i in 1..n {
        let m = sub[i] / diag[i - 1];
        diag[i] -= m * sup[i - 1];
        let prev = rhs[i - 1];
        rhs[i] -= m * prev;
    }
    rhs[n - 1] /= diag[n - 1];
    for i in (0..n - 1).rev() {
        rhs[i] = (rhs[i] - sup[i] * rhs[i + 1]) / diag[i];
    }
    rhs
}
