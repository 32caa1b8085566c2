use std::io::Write;

use super::{CramerRow, CurveRow, ProbeRow, TailEstimate};
use crate::functionals::CramerValue;
use crate::measures::MeasureError;
use crate::models::HypothesisReport;

/// Shortest round-trip decimal text for `v`: plain notation for moderate
/// magnitudes, scientific otherwise.
pub fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// In-memory CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MeasureError> {
        let err = |e: csv::Error| MeasureError::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        w.flush().map_err(|e| MeasureError::Csv(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

pub fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

pub const TAIL_HEADER: [&str; 10] = [
    "t",
    "replicas",
    "hits",
    "p_hat",
    "wilson_low",
    "wilson_high",
    "norm_log_tail",
    "saturated",
    "rate8",
    "rate4",
];

/// Tail rows with the two reference rates repeated on every line.
pub fn tail_table(rows: &[TailEstimate], rate8: f64, rate4: f64) -> Table {
    let mut t = Table::new(&TAIL_HEADER);
    for r in rows {
        t.push(vec![
            fmt_num(r.t),
            r.replicas.to_string(),
            r.hits.to_string(),
            fmt_num(r.p_hat),
            fmt_num(r.wilson_low),
            fmt_num(r.wilson_high),
            fmt_num(r.normalized_log_tail),
            flag(r.saturated),
            fmt_num(rate8),
            fmt_num(rate4),
        ]);
    }
    t
}

pub fn report_table(rows: &[(&str, &HypothesisReport)]) -> Table {
    let mut t = Table::new(&["hypothesis", "trials", "worst_margin", "tolerance", "pass", "witness"]);
    for (name, r) in rows {
        t.push(vec![
            name.to_string(),
            r.trials.to_string(),
            fmt_num(r.worst_margin),
            fmt_num(r.tolerance),
            flag(r.pass),
            r.witness.as_ref().map(|w| w.description.clone()).unwrap_or_default(),
        ]);
    }
    t
}

pub fn contraction_table(rows: &[CurveRow]) -> Table {
    let mut t = Table::new(&["t", "observed", "bound", "ratio"]);
    for r in rows {
        t.push(vec![fmt_num(r.t), fmt_num(r.observed), fmt_num(r.bound), fmt_num(r.ratio)]);
    }
    t
}

pub fn probe_table(rows: &[ProbeRow]) -> Table {
    let mut t = Table::new(&["kind", "delta", "T", "log_mean_exp", "saturated"]);
    for r in rows {
        t.push(vec![
            r.kind.to_string(),
            fmt_num(r.delta),
            fmt_num(r.t),
            fmt_num(r.log_mean_exp),
            flag(r.saturated),
        ]);
    }
    t
}

/// Saturated grid points carry the largest exponent in `lambda_hat`.
pub fn cramer_table(rows: &[CramerRow]) -> Table {
    let mut t = Table::new(&["t", "z", "lambda_hat", "saturated"]);
    for r in rows {
        let (v, sat) = match r.value {
            CramerValue::Value(v) => (v, false),
            CramerValue::Saturated { max_exponent } => (max_exponent, true),
        };
        t.push(vec![fmt_num(r.t), fmt_num(r.z), fmt_num(v), flag(sat)]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.0, 1.0, -0.1, 1.0 / 3.0, 1e-20, 6.02e23, 123456.789, -7.5e-6] {
            let s = fmt_num(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt_num(0.5), "0.5");
        assert_eq!(fmt_num(1e-20), "1e-20");
        assert_eq!(fmt_num(f64::NAN), "NaN");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "x,y".into()]);
        assert_eq!(t.to_csv_string(), "a,b\n1,\"x,y\"\n");
    }
}
