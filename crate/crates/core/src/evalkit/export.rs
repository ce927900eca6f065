//! Heatmaps as CSV plus binary graymap, and loss curves as CSV.
//!
//! Graymap pixels map `v ↦ round(255·(v − min)/(max − min))`; a constant
//! matrix maps to all zeros.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{EvalError, Result};
use crate::numcore::Matrix;
use crate::storage::write_file_atomically;

const HEATMAP_HEADER: &str = "# heatmap v1";
const CURVE_HEADER: &str = "# curve v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

pub(crate) fn gray_levels(values: &[f64]) -> Vec<u8> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    values
        .iter()
        .map(|v| {
            if range > 0.0 {
                (255.0 * (v - min) / range).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Writes `<stem>.csv` and `<stem>.pgm`.
pub fn export_heatmap(matrix: &Matrix, stem: &Path) -> Result<HeatmapFiles> {
    let (rows, cols) = matrix.shape();
    let mut csv = format!("{HEATMAP_HEADER} rows={rows} cols={cols}\n");
    for r in 0..rows {
        let line: Vec<String> = matrix.row(r).iter().map(|v| v.to_string()).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    let values = matrix.as_slice();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pgm = Vec::new();
    let mut head = String::from("P5\n");
    writeln!(head, "{HEATMAP_HEADER} min={min} max={max}").unwrap();
    writeln!(head, "{cols} {rows}\n255").unwrap();
    pgm.extend_from_slice(head.as_bytes());
    pgm.extend(gray_levels(values));

    let files = HeatmapFiles {
        csv: stem.with_extension("csv"),
        pgm: stem.with_extension("pgm"),
    };
    write_file_atomically(&files.csv, csv.as_bytes())?;
    write_file_atomically(&files.pgm, &pgm)?;
    Ok(files)
}

pub fn read_heatmap_csv(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path)?;
    let bad = |m: &str| EvalError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string()));
    let mut lines = text.lines();
    if !lines.next().is_some_and(|h| h.starts_with(HEATMAP_HEADER)) {
        return Err(bad("missing heatmap header"));
    }
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("unparsable heatmap value"))?;
    Matrix::from_rows(&rows).map_err(|_| bad("ragged heatmap rows"))
}

/// Two-column CSV `step,value`.
pub fn export_curve(series: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut csv = format!("{CURVE_HEADER}\nstep,value\n");
    for (step, value) in series {
        writeln!(csv, "{step},{value}").unwrap();
    }
    write_file_atomically(path, csv.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn pixels(path: &Path) -> Vec<u8> {
        let bytes = fs::read(path).unwrap();
        // header is four lines: magic, comment, size, maxval
        let mut newlines = 0;
        let start = bytes
            .iter()
            .position(|&b| {
                newlines += (b == b'\n') as usize;
                newlines == 4
            })
            .unwrap();
        bytes[start + 1..].to_vec()
    }

    #[test]
    fn scaling_examples() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let files = export_heatmap(&m, &dir.path().join("a")).unwrap();
        assert_eq!(pixels(&files.pgm), vec![0, 85, 170, 255]);
        assert!(fs::read(&files.pgm).unwrap().starts_with(b"P5\n# heatmap v1"));

        let one = export_heatmap(&Matrix::filled(1, 1, 42.0), &dir.path().join("b")).unwrap();
        assert_eq!(pixels(&one.pgm), vec![0]);
        let flat = export_heatmap(&Matrix::filled(2, 3, -1.0), &dir.path().join("c")).unwrap();
        assert_eq!(pixels(&flat.pgm), vec![0; 6]);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_rows(&[vec![0.1, 1.0 / 3.0, 7.0], vec![2e-9, 3.5, 1e12]]).unwrap();
        let files = export_heatmap(&m, &dir.path().join("m")).unwrap();
        assert_eq!(read_heatmap_csv(&files.csv).unwrap(), m);
        let again = export_heatmap(&m, &dir.path().join("m2")).unwrap();
        assert_eq!(fs::read(&files.pgm).unwrap(), fs::read(&again.pgm).unwrap());
    }

    #[test]
    fn curve_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        export_curve(&[(1, 0.5), (2, 0.25)], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "# curve v1\nstep,value\n1,0.5\n2,0.25\n");
    }

    #[test]
    fn unwritable_target_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"").unwrap();
        let stem = file.join("x");
        assert!(matches!(export_heatmap(&Matrix::zeros(1, 1), &stem), Err(EvalError::Io(_))));
    }
}
