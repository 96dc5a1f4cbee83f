//! Serde adapters for dense matrices: `{"shape": [rows, cols], "rows": [[...], ...]}`,
//! entries row-major.

use nalgebra::DMatrix;
use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct RowMajor {
    shape: [usize; 2],
    rows: Vec<Vec<f64>>,
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    RowMajor {
        shape: [m.nrows(), m.ncols()],
        rows: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
    }
    .serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    let raw = RowMajor::deserialize(d)?;
    let [r, c] = raw.shape;
    if raw.rows.len() != r || raw.rows.iter().any(|row| row.len() != c) {
        return Err(D::Error::custom("matrix rows do not match declared shape"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| raw.rows[i][j]))
}
