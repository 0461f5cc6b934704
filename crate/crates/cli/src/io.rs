//! CSV and JSON files.
//!
//! Matrix files start with a comment naming the orientation, then a header
//! row, then one row per receiving node:
//!
//! ```text
//! # entry (i,j) = arc from node j into node i
//! to\from,node_1,node_2
//! node_1,0,0.5
//! node_2,0,0
//! ```
//!
//! Reals are written with 17 significant digits so they read back exactly.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use netgp::{ElboEstimate, ObservationGrid64, RocCurve, TimeGrid64};

use crate::error::CliError;

pub const MATRIX_COMMENT: &str = "# entry (i,j) = arc from node j into node i";
pub const MATRIX_CORNER: &str = "to\\from";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn bad_input(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {msg}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

/// 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn node_names(n: usize) -> impl Iterator<Item = String> {
    (1..=n).map(|k| format!("node_{k}"))
}

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let n = m.ncols();
    let mut out = String::new();
    out.push_str(MATRIX_COMMENT);
    out.push('\n');
    out.push_str(MATRIX_CORNER);
    for name in node_names(n) {
        out.push(',');
        out.push_str(&name);
    }
    out.push('\n');
    for (i, name) in node_names(m.nrows()).enumerate() {
        out.push_str(&name);
        for j in 0..n {
            out.push(',');
            out.push_str(&fmt_real(m[(i, j)]));
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), CliError> {
    write_text(path, &format_matrix(m))
}

fn csv_records(path: &Path, text: &str) -> Result<Vec<csv::StringRecord>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    reader
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad_input(path, e))
}

fn parse_real(path: &Path, row: usize, cell: &str) -> Result<f64, CliError> {
    if cell.is_empty() {
        return Err(bad_input(path, format!("row {row}: missing value")));
    }
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| bad_input(path, format!("row {row}: `{cell}` is not a finite number")))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let records = csv_records(path, &read_text(path)?)?;
    let (header, rows) = records.split_first().ok_or_else(|| bad_input(path, "empty file"))?;
    let n = header.len().saturating_sub(1);
    if n == 0 || rows.len() != n {
        return Err(bad_input(path, format!("expected a square matrix, got {} rows and {n} columns", rows.len())));
    }
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n + 1 {
            return Err(bad_input(path, format!("row {}: expected {} cells, got {}", i + 1, n + 1, row.len())));
        }
        for j in 0..n {
            m[(i, j)] = parse_real(path, i + 1, &row[j + 1])?;
        }
    }
    Ok(m)
}

pub fn format_observations(obs: &ObservationGrid64) -> String {
    let mut out = String::from("time");
    for name in node_names(obs.n_nodes()) {
        out.push(',');
        out.push_str(&name);
    }
    out.push('\n');
    let y = obs.values();
    for (s, &t) in obs.grid().times().iter().enumerate() {
        out.push_str(&fmt_real(t));
        for i in 0..obs.n_nodes() {
            out.push(',');
            out.push_str(&fmt_real(y[(s, i)]));
        }
        out.push('\n');
    }
    out
}

pub fn read_observations(path: &Path) -> Result<ObservationGrid64, CliError> {
    let records = csv_records(path, &read_text(path)?)?;
    let (header, rows) = records.split_first().ok_or_else(|| bad_input(path, "empty file"))?;
    if header.get(0) != Some("time") || header.len() < 2 {
        return Err(bad_input(path, "header must be `time,node_1,...`"));
    }
    let n = header.len() - 1;
    let mut times = Vec::with_capacity(rows.len());
    let mut values = DMatrix::zeros(rows.len(), n);
    for (s, row) in rows.iter().enumerate() {
        if row.len() != n + 1 {
            return Err(bad_input(path, format!("row {}: expected {} cells, got {}", s + 1, n + 1, row.len())));
        }
        times.push(parse_real(path, s + 1, &row[0])?);
        for i in 0..n {
            values[(s, i)] = parse_real(path, s + 1, &row[i + 1])?;
        }
    }
    let grid = TimeGrid64::new(times).map_err(|e| bad_input(path, e))?;
    ObservationGrid64::new(values, grid).map_err(|e| bad_input(path, e))
}

pub fn format_elbo_trace(trace: &[ElboEstimate<f64>]) -> String {
    let mut out = String::from("iter,elbo,ell,kl\n");
    for (k, e) in trace.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", k + 1, fmt_real(e.elbo), fmt_real(e.ell), fmt_real(e.kl)));
    }
    out
}

pub fn format_roc(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for k in 0..curve.thresholds.len() {
        let t = curve.thresholds[k];
        let t = if t.is_infinite() { "inf".to_string() } else { fmt_real(t) };
        out.push_str(&format!("{t},{},{}\n", fmt_real(curve.fpr[k]), fmt_real(curve.tpr[k])));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip() {
        for x in [0.1, -1.0 / 3.0, 6.02214076e23, 5e-324, 0.0] {
            assert_eq!(fmt_real(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 0.25, -1.5, 1e-9, 0.0, 2.0, 3.0, 4.0, 0.0]);
        write_matrix(&p, &m).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
        let text = read_text(&p).unwrap();
        assert!(text.starts_with(MATRIX_COMMENT));
        assert!(text.lines().nth(1).unwrap().starts_with("to\\from,node_1"));
    }

    #[test]
    fn observations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        let obs = ObservationGrid64::new(
            DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.3, 0.4, 1.0 / 3.0, 7.0]),
            TimeGrid64::new(vec![0.0, 0.5, 2.0]).unwrap(),
        )
        .unwrap();
        write_text(&p, &format_observations(&obs)).unwrap();
        assert_eq!(read_observations(&p).unwrap(), obs);
        assert_eq!(read_text(&p).unwrap().lines().count(), 4);
    }

    #[test]
    fn malformed_observations() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        for text in [
            "time,node_1\n0,1\n0,2\n",
            "time,node_1\n0,1\n1,\n",
            "t,node_1\n0,1\n",
            "time,node_1,node_2\n0,1\n",
            "time,node_1\n0,abc\n",
        ] {
            write_text(&p, text).unwrap();
            assert!(matches!(read_observations(&p), Err(CliError::Config(_))), "{text:?}");
        }
        assert!(matches!(read_observations(&dir.path().join("missing.csv")), Err(CliError::Io(_))));
    }
}
