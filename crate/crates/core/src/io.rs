//! Text file formats.
//!
//! All formats are line-oriented ASCII with floating point values printed at
//! 17 significant digits, so every value round-trips bit-exactly.
//!
//! * `# snapshot v1 n_cells=<int> n_times=<int>` — one line of times, one
//!   line of weights, then n_cells rows of n_times values.
//! * `# basis v1 n_cells=<int> n_times=<int>` — same layout with singular
//!   values in the times slot and modes as columns.
//! * `# rom v1 n_modes=<int> nu=<float>` — gram, diffusion, then convection
//!   entries in lexicographic order, one value per line.
//! * `# ensemble v1 n_cells=<int> n_times=<int>` — members as columns
//!   (n_cells = parameter length, n_times = ensemble size).
//! * `# pce v1 m=<int> p=<int> d=<int>` — the multi-index list (one index
//!   per line), then the coefficient matrix row-major, one row per line.
//! * `# correction v1 n_modes=<int>` — the flattened correction vector,
//!   one value per line.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RomError};
use crate::fom::SnapshotMatrix;
use crate::pce::{build_multiindex, PceExpansion};
use crate::pod::PodBasis;
use crate::rom::{CorrectionVector, ReducedSystem};
use crate::tensor::Tensor3;

/// Formats a float with 17 significant digits (round-trip exact for f64).
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| RomError::io(path.display().to_string(), e))
}

fn read_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| RomError::io(path.display().to_string(), e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> RomError {
    RomError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line_no: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|e| parse_err(path, line_no, format!("bad float {tok:?}: {e}")))
}

fn parse_usize(path: &Path, line_no: usize, tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|e| parse_err(path, line_no, format!("bad integer {tok:?}: {e}")))
}

// Header form: `# <tag> v1 key=<val> key=<val>`; returns values in key order.
fn parse_header(path: &Path, line: &str, tag: &str, keys: &[&str]) -> Result<Vec<String>> {
    let expect_prefix = format!("# {tag} v1");
    let rest = line
        .strip_prefix(expect_prefix.as_str())
        .ok_or_else(|| parse_err(path, 1, format!("expected header {expect_prefix:?}")))?;
    let mut values = Vec::with_capacity(keys.len());
    let fields: Vec<&str> = rest.split_whitespace().collect();
    for (i, key) in keys.iter().enumerate() {
        let field = fields
            .get(i)
            .ok_or_else(|| parse_err(path, 1, format!("missing header field {key}")))?;
        let value = field
            .strip_prefix(&format!("{key}="))
            .ok_or_else(|| parse_err(path, 1, format!("expected {key}=<value>, got {field:?}")))?;
        values.push(value.to_string());
    }
    Ok(values)
}

fn line_of_floats(values: impl Iterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&fmt_g17(v));
    }
    s
}

fn parse_float_line(path: &Path, line_no: usize, line: &str, expect: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| parse_f64(path, line_no, t))
        .collect::<Result<_>>()?;
    if vals.len() != expect {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {expect} values, found {}", vals.len()),
        ));
    }
    Ok(vals)
}

// Shared body layout of snapshot-style files.
fn write_matrix_file(
    path: &Path,
    tag: &str,
    row_header: &[f64],
    weights: &DVector<f64>,
    values: &DMatrix<f64>,
) -> Result<()> {
    let (n_rows, n_cols) = values.shape();
    let mut out = String::new();
    let _ = writeln!(out, "# {tag} v1 n_cells={n_rows} n_times={n_cols}");
    out.push_str(&line_of_floats(row_header.iter().copied()));
    out.push('\n');
    out.push_str(&line_of_floats(weights.iter().copied()));
    out.push('\n');
    for r in 0..n_rows {
        out.push_str(&line_of_floats(values.row(r).iter().copied()));
        out.push('\n');
    }
    write_string(path, &out)
}

fn read_matrix_file(path: &Path, tag: &str) -> Result<(Vec<f64>, DVector<f64>, DMatrix<f64>)> {
    let content = read_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let vals = parse_header(path, header, tag, &["n_cells", "n_times"])?;
    let n_rows = parse_usize(path, 1, &vals[0])?;
    let n_cols = parse_usize(path, 1, &vals[1])?;

    let (no, line) = lines
        .next()
        .ok_or_else(|| parse_err(path, 2, "missing header-values line"))?;
    let row_header = parse_float_line(path, no + 1, line, n_cols)?;
    let (no, line) = lines
        .next()
        .ok_or_else(|| parse_err(path, 3, "missing weights line"))?;
    let weights = DVector::from_vec(parse_float_line(path, no + 1, line, n_rows)?);

    let mut values = DMatrix::zeros(n_rows, n_cols);
    for r in 0..n_rows {
        let (no, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 4 + r, "missing data row"))?;
        let row = parse_float_line(path, no + 1, line, n_cols)?;
        for c in 0..n_cols {
            values[(r, c)] = row[c];
        }
    }
    Ok((row_header, weights, values))
}

pub fn write_snapshots(path: &Path, snapshots: &SnapshotMatrix) -> Result<()> {
    write_matrix_file(
        path,
        "snapshot",
        &snapshots.times,
        &snapshots.weights,
        &snapshots.values,
    )
}

pub fn read_snapshots(path: &Path) -> Result<SnapshotMatrix> {
    let (times, weights, values) = read_matrix_file(path, "snapshot")?;
    SnapshotMatrix::new(values, times, weights)
}

pub fn write_basis(path: &Path, basis: &PodBasis) -> Result<()> {
    write_matrix_file(
        path,
        "basis",
        basis.singular_values.as_slice(),
        &basis.weights,
        &basis.modes,
    )
}

/// Reads a basis file. The stored format carries no total-energy record, so
/// the loaded basis reports its captured energy as the total.
pub fn read_basis(path: &Path) -> Result<PodBasis> {
    let (singular_values, weights, modes) = read_matrix_file(path, "basis")?;
    let sv = DVector::from_vec(singular_values);
    let total_energy = sv.iter().map(|s| s * s).sum();
    Ok(PodBasis {
        modes,
        singular_values: sv,
        weights,
        total_energy,
    })
}

pub fn write_ensemble(path: &Path, members: &DMatrix<f64>) -> Result<()> {
    let (z, s) = members.shape();
    let indices: Vec<f64> = (0..z).map(|i| i as f64).collect();
    write_matrix_file(
        path,
        "ensemble",
        &indices,
        &DVector::from_element(s, 1.0),
        &members.transpose(),
    )
}

pub fn read_ensemble(path: &Path) -> Result<DMatrix<f64>> {
    let (_indices, _weights, values) = read_matrix_file(path, "ensemble")?;
    Ok(values.transpose())
}

pub fn write_reduced_system(path: &Path, system: &ReducedSystem) -> Result<()> {
    let n = system.n_modes();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# rom v1 n_modes={n} nu={}",
        fmt_g17(system.viscosity)
    );
    for v in system.gram.transpose().iter() {
        // transpose: DMatrix iterates column-major, the format is row-major
        out.push_str(&fmt_g17(*v));
        out.push('\n');
    }
    for v in system.diffusion.transpose().iter() {
        out.push_str(&fmt_g17(*v));
        out.push('\n');
    }
    for v in system.convection.iter() {
        out.push_str(&fmt_g17(v));
        out.push('\n');
    }
    write_string(path, &out)
}

pub fn read_reduced_system(path: &Path) -> Result<ReducedSystem> {
    let content = read_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let vals = parse_header(path, header, "rom", &["n_modes", "nu"])?;
    let n = parse_usize(path, 1, &vals[0])?;
    let viscosity = parse_f64(path, 1, &vals[1])?;

    let mut take = |count: usize, what: &str| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let (no, line) = lines
                .next()
                .ok_or_else(|| parse_err(path, 0, format!("truncated {what} block")))?;
            out.push(parse_f64(path, no + 1, line.trim())?);
        }
        Ok(out)
    };
    let gram_v = take(n * n, "gram")?;
    let diff_v = take(n * n, "diffusion")?;
    let conv_v = take(n * n * n, "convection")?;

    let system = ReducedSystem {
        gram: DMatrix::from_row_slice(n, n, &gram_v),
        diffusion: DMatrix::from_row_slice(n, n, &diff_v),
        convection: Tensor3::from_vec(n, conv_v),
        viscosity,
    };
    system.validate()?;
    Ok(system)
}

pub fn write_correction(path: &Path, correction: &CorrectionVector) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# correction v1 n_modes={}", correction.n_modes());
    for v in correction.values().iter() {
        out.push_str(&fmt_g17(*v));
        out.push('\n');
    }
    write_string(path, &out)
}

pub fn read_correction(path: &Path) -> Result<CorrectionVector> {
    let content = read_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let vals = parse_header(path, header, "correction", &["n_modes"])?;
    let n = parse_usize(path, 1, &vals[0])?;
    let mut values = Vec::with_capacity(CorrectionVector::param_len(n));
    for (no, line) in lines {
        values.push(parse_f64(path, no + 1, line.trim())?);
    }
    CorrectionVector::from_values(n, DVector::from_vec(values))
}

pub fn write_pce(path: &Path, expansion: &PceExpansion) -> Result<()> {
    let set = &expansion.index_set;
    let d = expansion.n_outputs();
    let mut out = String::new();
    let _ = writeln!(out, "# pce v1 m={} p={} d={d}", set.m(), set.p());
    for alpha in set.iter() {
        for (i, a) in alpha.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{a}");
        }
        out.push('\n');
    }
    for r in 0..d {
        out.push_str(&line_of_floats(expansion.coefficients.row(r).iter().copied()));
        out.push('\n');
    }
    write_string(path, &out)
}

pub fn read_pce(path: &Path) -> Result<PceExpansion> {
    let content = read_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let vals = parse_header(path, header, "pce", &["m", "p", "d"])?;
    let m = parse_usize(path, 1, &vals[0])?;
    let p = parse_usize(path, 1, &vals[1])?;
    let d = parse_usize(path, 1, &vals[2])?;

    let set = build_multiindex(m, p)?;
    for k in 0..set.len() {
        let (no, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "truncated multi-index list"))?;
        let idx: Vec<u32> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|e| parse_err(path, no + 1, format!("bad index {t:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if idx.as_slice() != set.index(k) {
            return Err(parse_err(
                path,
                no + 1,
                format!("multi-index {idx:?} does not match graded-lex position {k}"),
            ));
        }
    }
    let mut coefficients = DMatrix::zeros(d, set.len());
    for r in 0..d {
        let (no, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "truncated coefficient block"))?;
        let row = parse_float_line(path, no + 1, line, set.len())?;
        for c in 0..set.len() {
            coefficients[(r, c)] = row[c];
        }
    }
    PceExpansion::new(set, coefficients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::Grid1D;
    use tempfile::tempdir;

    #[test]
    fn g17_round_trips() {
        for &x in &[
            0.0,
            1.0,
            -1.0,
            std::f64::consts::PI,
            1.0 / 3.0,
            6.02e23,
            -2.2250738585072014e-308,
            f64::MAX,
        ] {
            let s = fmt_g17(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x} -> {s} -> {back}");
        }
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("snaps.txt");
        let grid = Grid1D::new(6, 0.0, 2.0).unwrap();
        let values = DMatrix::from_fn(6, 4, |r, c| ((r * 13 + c * 7) as f64 * 0.731).sin() / 3.0);
        let snaps = SnapshotMatrix::new(
            values,
            vec![0.0, 0.1, 0.2, 0.30000000000000004],
            grid.weights(),
        )
        .unwrap();
        write_snapshots(&path, &snaps).unwrap();
        let back = read_snapshots(&path).unwrap();
        assert_eq!(snaps.values, back.values);
        assert_eq!(snaps.times, back.times);
        assert_eq!(snaps.weights, back.weights);
    }

    #[test]
    fn rom_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rom.txt");
        let n = 3;
        let system = ReducedSystem {
            gram: DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.01 * (i + j) as f64 }),
            diffusion: DMatrix::from_fn(n, n, |i, j| -0.5 * (i as f64) + 0.3 * (j as f64) - 0.4),
            convection: Tensor3::from_fn(n, |i, j, k| (i + 2 * j + 3 * k) as f64 * 0.017 - 0.05),
            viscosity: 0.0031,
        };
        write_reduced_system(&path, &system).unwrap();
        let back = read_reduced_system(&path).unwrap();
        assert_eq!(system.gram, back.gram);
        assert_eq!(system.diffusion, back.diffusion);
        assert_eq!(system.convection, back.convection);
        assert_eq!(system.viscosity, back.viscosity);
    }

    #[test]
    fn pce_round_trip_and_index_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("exp.txt");
        let set = build_multiindex(3, 2).unwrap();
        let coeff = DMatrix::from_fn(2, set.len(), |r, c| (r as f64 + 1.0) * (c as f64 - 4.0) * 0.2);
        let exp = PceExpansion::new(set, coeff).unwrap();
        write_pce(&path, &exp).unwrap();
        let back = read_pce(&path).unwrap();
        assert_eq!(exp.coefficients, back.coefficients);
        assert_eq!(exp.index_set, back.index_set);
    }

    #[test]
    fn corrupted_header_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "# wrong v1 n_cells=2 n_times=2\n0 1\n1 1\n").unwrap();
        match read_snapshots(&path) {
            Err(RomError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ensemble_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ens.txt");
        let members = DMatrix::from_fn(5, 3, |i, j| (i as f64 - 2.0) * 0.37 + j as f64);
        write_ensemble(&path, &members).unwrap();
        let back = read_ensemble(&path).unwrap();
        assert_eq!(members, back);
    }

    #[test]
    fn correction_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corr.txt");
        let q = CorrectionVector::sparse(2, &[(0, 0.5), (7, -0.125)]).unwrap();
        write_correction(&path, &q).unwrap();
        let back = read_correction(&path).unwrap();
        assert_eq!(q, back);
    }
}
