//! CSV and JSON emission helpers.
//!
//! CSV files carry plain numeric columns (RFC-4180 field rules, '.' as
//! the decimal separator); floats are written with Rust's shortest
//! round-trip formatting so full double precision survives the trip
//! through text.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::bbr::{BlochMoments, CovarianceSet};
use crate::error::Result;

pub const MOMENT_COLUMNS: [&str; 14] = [
    "sx", "sy", "sz", "n", "dxx", "dyy", "dzz", "dxy", "dxz", "dyz", "dxn", "dyn", "dzn", "dnn",
];

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Write a CSV with the given header and rows.
pub fn write_csv<P: AsRef<Path>>(
    path: P,
    header: &[&str],
    rows: impl Iterator<Item = Vec<f64>>,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        let line: Vec<String> = row.into_iter().map(fmt).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()
}

/// Serialize any metadata value as pretty JSON.
pub fn write_json<P: AsRef<Path>, T: Serialize>(path: P, value: &T) -> Result<()> {
    let f = File::create(path).map_err(io_err)?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).map_err(|e| {
        crate::error::Error::NumericalFailure(format!("JSON serialization failed: {e}"))
    })?;
    Ok(())
}

fn io_err(e: std::io::Error) -> crate::error::Error {
    crate::error::Error::NumericalFailure(format!("io error: {e}"))
}

/// One row of the standard moment layout: time, four first moments, ten
/// covariances.
pub fn moment_row(t: f64, m: &BlochMoments, c: &CovarianceSet) -> Vec<f64> {
    let mut row = Vec::with_capacity(15);
    row.push(t);
    row.extend_from_slice(&m.as_array());
    row.extend_from_slice(&c.as_array());
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_full_precision() {
        let dir = std::env::temp_dir().join("bhdimer_output_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        let values = [1.0 / 3.0, 2.0_f64.sqrt(), -1.2345678901234567e-8, 0.1];
        write_csv(
            &path,
            &["a", "b", "c", "d"],
            std::iter::once(values.to_vec()),
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let line = text.lines().nth(1).unwrap();
        for (field, expect) in line.split(',').zip(values) {
            let parsed: f64 = field.parse().unwrap();
            assert_eq!(parsed, expect, "field {field}");
        }
        std::fs::remove_file(&path).ok();
    }
}
