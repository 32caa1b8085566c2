use std::io::{Read, Write};

use super::{EmpiricalMeasure, MeasureError};

fn csv_err(e: impl std::fmt::Display) -> MeasureError {
    MeasureError::Csv(e.to_string())
}

/// Write atoms as CSV: header `x0,...,x{dim-1}`, one atom per row, each
/// coordinate with 17 significant digits so the text round-trips exactly.
pub fn write_cloud_csv<W: Write>(mu: &EmpiricalMeasure, out: W) -> Result<(), MeasureError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record((0..mu.dim()).map(|k| format!("x{k}")))
        .map_err(csv_err)?;
    for atom in mu.atoms() {
        w.write_record(atom.iter().map(|v| format!("{v:.16e}")))
            .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub fn read_cloud_csv<R: Read>(input: R) -> Result<EmpiricalMeasure, MeasureError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    for (k, h) in headers.iter().enumerate() {
        if h.trim() != format!("x{k}") {
            return Err(MeasureError::Csv(format!(
                "header column {k} is `{h}`, expected `x{k}`"
            )));
        }
    }
    let dim = headers.len();
    let mut points = Vec::new();
    for (row, record) in r.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != dim {
            return Err(MeasureError::Ragged {
                row,
                expected: dim,
                found: record.len(),
            });
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| MeasureError::Csv(format!("row {row}: {e}")))?;
            points.push(v);
        }
    }
    EmpiricalMeasure::from_flat(dim, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_precision() {
        let mu = EmpiricalMeasure::from_flat(2, vec![0.1, -2.5, 1.0 / 3.0, 7.0]).unwrap();
        let mut buf = Vec::new();
        write_cloud_csv(&mu, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x0,x1"));
        assert_eq!(lines.next(), Some("1.0000000000000001e-1,-2.5000000000000000e0"));
    }

    #[test]
    fn rejects_bad_header() {
        let err = read_cloud_csv("y0\n1.0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, MeasureError::Csv(_)));
        let err = read_cloud_csv("x0\nnan\n".as_bytes()).unwrap_err();
        assert_eq!(err, MeasureError::NonFinite { row: 0 });
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dim in 1usize..4,
            raw in proptest::collection::vec(-1e12f64..1e12, 1..40),
        ) {
            let n = (raw.len() / dim).max(1);
            let mut pts: Vec<f64> = raw.iter().copied().cycle().take(n * dim).collect();
            pts[0] = pts[0] * 1e-9 + f64::EPSILON;
            let mu = EmpiricalMeasure::from_flat(dim, pts).unwrap();
            let mut buf = Vec::new();
            write_cloud_csv(&mu, &mut buf).unwrap();
            let back = read_cloud_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back.as_flat(), mu.as_flat());
        }
    }
}
