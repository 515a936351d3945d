//! Report formatting: floats are written with 17 significant digits so every
//! CSV and JSON value round-trips exactly.

use crate::error::Result;
use serde::Serialize;
use std::path::Path;

/// Full-precision float formatting (17 significant digits).
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes rows of already-formatted fields under a header line.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| crate::error::Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g17_roundtrips() {
        for x in [
            std::f64::consts::PI,
            2.7302778013234311,
            -1.0 / 3.0,
            1e-300,
            0.1 + 0.2,
        ] {
            let s = fmt_g17(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back, x, "{s}");
        }
    }
}
