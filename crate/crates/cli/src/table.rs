use std::io::Write;

/// Shortest decimal that parses back to the same `f64`; `inf`, `-inf`, `NaN`
/// for non-finite values.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// One CSV file: a header and rows of already formatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(name: &str, header: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.to_string(),
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width in {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Column `name` parsed as numbers.
    pub fn values(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.column(name)?;
        self.rows.iter().map(|r| r[c].parse().ok()).collect()
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("writing to memory");
        for r in &self.rows {
            w.write_record(r).expect("writing to memory");
        }
        let mut bytes = w.into_inner().expect("flushing to memory");
        bytes.flush().expect("flushing to memory");
        bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_text() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, 4.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(2.5e-12), "2.5e-12");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!("inf".parse::<f64>().unwrap(), f64::INFINITY);
    }

    #[test]
    fn csv_has_header_and_terminated_rows() {
        let mut t = Table::new("x.csv", ["a", "b"]);
        t.push(vec!["1".into(), fmt_f64(0.5)]);
        assert_eq!(String::from_utf8(t.to_csv()).unwrap(), "a,b\n1,0.5\n");
        assert_eq!(t.values("b").unwrap(), vec![0.5]);
    }
}
