//! Output helpers shared by the CSV emitters and reports.

use std::io::{self, Write};

/// Formats with 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a CSV table with a fixed header; every cell goes through [`num`].
pub fn write_csv<W: Write>(w: &mut W, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> io::Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| num(*v)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// A scalar condition with the point where it is tightest.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Check {
    pub pass: bool,
    /// Location of the worst value; `NaN` when the scanned set was empty.
    pub worst_x: f64,
    /// Signed margin at `worst_x`; positive values are violations.
    pub margin: f64,
}

impl Check {
    pub fn vacuous() -> Self {
        Check {
            pass: true,
            worst_x: f64::NAN,
            margin: f64::NEG_INFINITY,
        }
    }

    /// Tracks `margin` at `x`, keeping the largest.
    pub fn observe(&mut self, x: f64, margin: f64) {
        if margin > self.margin || self.worst_x.is_nan() {
            self.margin = margin;
            self.worst_x = x;
        }
    }

    pub fn decide(mut self, tol: f64) -> Self {
        self.pass = !(self.margin > tol);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(-2.0), "-2.0000000000000000e0");
        let v: f64 = num(std::f64::consts::PI).parse().unwrap();
        assert_eq!(v, std::f64::consts::PI);
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        write_csv(&mut out, &["x", "y"], vec![vec![1.0, 2.0]]).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s, "x,y\n1.0000000000000000e0,2.0000000000000000e0\n");
    }

    #[test]
    fn check_keeps_worst() {
        let mut c = Check::vacuous();
        c.observe(1.0, -3.0);
        c.observe(2.0, 0.5);
        c.observe(3.0, 0.1);
        let c = c.decide(1e-9);
        assert!(!c.pass);
        assert_eq!(c.worst_x, 2.0);
    }
}
