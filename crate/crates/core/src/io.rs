//! File formats.
//!
//! Cross-product data as CSV:
//!
//! ```text
//! m,dof
//! 5,99
//! y11,y12,...,y1m
//! ...
//! ym1,ym2,...,ymm
//! ```
//!
//! The first line is the literal header `m,dof`, the second its values, then
//! `m` rows of the matrix in row-major order. The JSON form is
//! `{"m": 5, "dof": 99, "y": [[...], ...]}`.
//!
//! Every float written to CSV uses 17 significant digits so files round-trip
//! bit-exactly.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CrossProductData;

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        // keep the sign of negative zero out of the files
        return "0.0000000000000000e0".to_string();
    }
    format!("{x:.16e}")
}

/// Serde adapter writing a `DMatrix<f64>` as a list of rows.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::matrix_from_rows(&rows).map_err(D::Error::custom)
    }
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Parse("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

#[derive(Serialize, Deserialize)]
struct DataJson {
    m: usize,
    dof: usize,
    #[serde(with = "matrix_rows")]
    y: DMatrix<f64>,
}

impl CrossProductData {
    pub fn to_json(&self) -> Result<String> {
        let doc = DataJson { m: self.m(), dof: self.dof(), y: self.y().clone() };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DataJson = serde_json::from_str(text)?;
        if doc.y.nrows() != doc.m {
            return Err(Error::Parse(format!("m = {} but y has {} rows", doc.m, doc.y.nrows())));
        }
        CrossProductData::new(doc.y, doc.dof)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "m,dof")?;
        writeln!(w, "{},{}", self.m(), self.dof())?;
        for i in 0..self.m() {
            let row: Vec<String> = self.y().row(i).iter().map(|&v| fmt_f64(v)).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let mut next = || -> Result<String> {
            Ok(lines.next().ok_or_else(|| Error::Parse("unexpected end of file".into()))??)
        };
        let header = next()?;
        if header.trim() != "m,dof" {
            return Err(Error::Parse(format!("expected header `m,dof`, found `{}`", header.trim())));
        }
        let dims = next()?;
        let parts: Vec<&str> = dims.trim().split(',').collect();
        if parts.len() != 2 {
            return Err(Error::Parse(format!("bad dimension line `{}`", dims.trim())));
        }
        let parse_usize = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
        let m = parse_usize(parts[0])?;
        let dof = parse_usize(parts[1])?;
        let mut rows = Vec::with_capacity(m);
        for i in 0..m {
            let line = next()?;
            let row = line
                .trim()
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {i}: `{s}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != m {
                return Err(Error::Parse(format!("row {i} has {} entries, expected {m}", row.len())));
            }
            rows.push(row);
        }
        CrossProductData::new(matrix_from_rows(&rows)?, dof)
    }

    /// Reads CSV or JSON, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::read_csv(text.as_bytes()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_data, sample_standard_wishart, ThetaVector};
    use crate::rng::{stream, Purpose};

    fn sample() -> CrossProductData {
        let theta = ThetaVector::from_slice(&[0.2, 0.7, -0.4, 1.3, 0.1, -0.2, 0.0, -0.6]).unwrap();
        let u = sample_standard_wishart(4, 30, &mut stream(1, Purpose::Data, 0, 0)).unwrap();
        generate_data(&u, 30, &theta).unwrap()
    }

    #[test]
    fn csv_layout() {
        let data = sample();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "m,dof");
        assert_eq!(lines[1], "4,30");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[2].split(',').count(), 4);
        assert_eq!(CrossProductData::read_csv(text.as_bytes()).unwrap(), data);
    }

    #[test]
    fn json_round_trip() {
        let data = sample();
        let text = data.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["m"], 4);
        assert_eq!(v["dof"], 30);
        assert_eq!(v["y"].as_array().unwrap().len(), 4);
        assert_eq!(CrossProductData::from_json(&text).unwrap(), data);
    }

    #[test]
    fn rejects_malformed_csv() {
        assert!(CrossProductData::read_csv("m,dof\n3,10\n1,0,0\n0,1\n0,0,1\n".as_bytes()).is_err());
        assert!(CrossProductData::read_csv("3,10\n1,0,0\n0,1,0\n0,0,1\n".as_bytes()).is_err());
        assert!(CrossProductData::read_csv("m,dof\n3,10\n1,0,0\n0,1,0\n".as_bytes()).is_err());
        assert!(CrossProductData::read_csv("m,dof\n3,10\n1,2,0\n0,1,0\n0,0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn float_format_has_17_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.5), "-2.5000000000000000e0");
        for x in [std::f64::consts::PI, 1e-300, -123456.789] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
