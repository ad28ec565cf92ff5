//! Serialization helpers: row-major matrices in JSON and plain CSV output.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Converts a matrix into a list of rows.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Builds a matrix from rows. `cols` fixes the width when there are no rows.
pub fn from_rows(rows: &[Vec<f64>], cols: Option<usize>, what: &str) -> Result<DMatrix<f64>> {
    let c = match (rows.first(), cols) {
        (Some(r), _) => r.len(),
        (None, Some(c)) => c,
        (None, None) => 0,
    };
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::DimensionMismatch(format!("{what}: ragged rows")));
    }
    if let Some(want) = cols {
        if c != want {
            return Err(Error::DimensionMismatch(format!(
                "{what}: expected {want} columns, got {c}"
            )));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

/// Serde adapter so `DMatrix<f64>` fields read and write as `[[row], ...]`.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows, None, "matrix").map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for `DVector<f64>` as a flat list.
pub mod vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Writes a CSV file with a header row. Non-finite values are written as `nan`.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", header.join(","))?;
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .map(|x| {
                if x.is_finite() {
                    format!("{x:.12e}")
                } else {
                    "nan".into()
                }
            })
            .collect();
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a numeric CSV with a header row.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{} is empty", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (n, l) in lines.enumerate() {
        let r: std::result::Result<Vec<f64>, _> = l.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let r = r.map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), n + 2)))?;
        if r.len() != header.len() {
            return Err(Error::Config(format!(
                "{} line {}: expected {} fields",
                path.display(),
                n + 2,
                header.len()
            )));
        }
        rows.push(r);
    }
    Ok((header, rows))
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_csv(&p, &["t".into(), "x".into()], &[vec![0.0, 1.5], vec![0.1, -2.0]]).unwrap();
        let (h, r) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["t", "x"]);
        assert_eq!(r[1], vec![0.1, -2.0]);
    }

    #[test]
    fn empty_rows_take_declared_width() {
        let m = from_rows(&[], Some(3), "x").unwrap();
        assert_eq!(m.shape(), (0, 3));
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]], None, "x").is_err());
    }
}
