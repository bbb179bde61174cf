//! Point tables as CSV: header row, `,` separator, `\n` line ends.

use std::path::Path;

use anyhow::{Context, Result};

use ddss::tensorgrad::Tensor;

use crate::FormatError;

pub fn coordinate_header(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))
}

/// Writes `points` (`[n, d]`) with header `x0,...,x{d-1}`.
pub fn write_points(path: &Path, points: &Tensor) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(coordinate_header(points.cols()))?;
    for i in 0..points.rows() {
        w.write_record(points.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes states `x_K, ..., x_0` as `state,index,x0,...`.
pub fn write_trajectory(path: &Path, states: &[Tensor]) -> Result<()> {
    let mut w = writer(path)?;
    let d = states.first().map_or(0, Tensor::cols);
    let mut header = vec!["state".to_string(), "index".to_string()];
    header.extend(coordinate_header(d));
    w.write_record(&header)?;
    let k = states.len().saturating_sub(1);
    for (s, x) in states.iter().enumerate() {
        for i in 0..x.rows() {
            let mut rec = vec![(k - s).to_string(), i.to_string()];
            rec.extend(x.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a point table written by [`write_points`]. Any malformed content is
/// reported as a [`FormatError`].
pub fn read_points(path: &Path) -> Result<Tensor> {
    let bad = |msg: String| FormatError(format!("{}: {msg}", path.display()));
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let width = r.headers().map_err(|e| bad(e.to_string()))?.len();
    if width == 0 {
        return Err(bad("missing header row".into()).into());
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {}: '{field}' is not a number", line + 1)))?;
            if !v.is_finite() {
                return Err(bad(format!("row {}: non-finite value", line + 1)).into());
            }
            data.push(v);
        }
        rows += 1;
    }
    Tensor::new(vec![rows, width], data).map_err(|e| bad(e.to_string()).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.csv");
        let x = Tensor::matrix(3, 2, vec![0.1, -2.5, 1e-17, 3.0, 1.0 / 3.0, 7.0]).unwrap();
        write_points(&p, &x).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("x0,x1\n"));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(read_points(&p).unwrap(), x);
    }

    #[test]
    fn malformed_tables_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in [("ragged", "x0,x1\n1,2\n3\n"), ("text", "x0,x1\n1,abc\n"), ("nan", "x0\nNaN\n")] {
            let p = dir.path().join(name);
            std::fs::write(&p, body).unwrap();
            let err = read_points(&p).unwrap_err();
            assert!(err.downcast_ref::<FormatError>().is_some(), "{name}: {err}");
        }
    }
}
