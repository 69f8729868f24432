//! Minimal CSV emission.
//!
//! Output rules shared by every table the harness writes: a header row,
//! RFC-4180 quoting, '.' as the decimal separator, floats printed with 17
//! significant digits so a rerun is byte-identical and a reader recovers the
//! exact binary value, and empty cells for missing optional values.

use std::borrow::Cow;

/// Formats a float with 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Formats an optional float, using the empty cell for `None`.
pub fn opt(v: Option<f64>) -> String {
    match v {
        Some(v) => num(v),
        None => String::new(),
    }
}

fn escape(field: &str) -> Cow<'_, str> {
    if field.contains(',') || field.contains('"') || field.contains('\n') || field.contains('\r') {
        Cow::Owned(format!("\"{}\"", field.replace('"', "\"\"")))
    } else {
        Cow::Borrowed(field)
    }
}

/// An in-memory CSV document with a fixed column count.
pub struct Csv {
    buf: String,
    cols: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Csv {
        let mut csv = Csv { buf: String::new(), cols: header.len() };
        csv.write_row(header.iter().map(|s| escape(s)));
        csv
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) {
        assert_eq!(fields.len(), self.cols, "row width must match the header");
        self.write_row(fields.iter().map(|s| escape(s.as_ref())));
    }

    fn write_row<'a>(&mut self, fields: impl Iterator<Item = Cow<'a, str>>) {
        let mut first = true;
        for f in fields {
            if !first {
                self.buf.push(',');
            }
            self.buf.push_str(&f);
            first = false;
        }
        self.buf.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf.into_bytes()
    }
}
