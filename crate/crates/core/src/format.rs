//! Text formats shared by the command-line tool: labeled comma-separated
//! matrix blocks and 17-significant-digit floats.
//!
//! A block looks like
//!
//! ```text
//! [dqd_next/dq] 2x2
//! 1.0000000000000000e0,0.0000000000000000e0
//! 0.0000000000000000e0,1.0000000000000000e0
//! ```

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Lossless float formatting (17 significant digits).
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn matrix_block(label: &str, m: &DMatrix<f64>) -> String {
    let mut s = format!("[{label}] {}x{}\n", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| float(m[(r, c)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Parses every matrix block in `text`; lines outside blocks are ignored.
pub fn parse_matrix_blocks(text: &str) -> Result<Vec<(String, DMatrix<f64>)>> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((ln, line)) = lines.next() {
        let line = line.trim();
        let Some(rest) = line.strip_prefix('[') else { continue };
        let Some((label, dims)) = rest.split_once(']') else { continue };
        let Some((r, c)) = dims.trim().split_once('x') else { continue };
        let bad = |what: &str| Error::InvalidModel(format!("line {}: {what}", ln + 1));
        let rows: usize = r.parse().map_err(|_| bad("bad row count"))?;
        let cols: usize = c.parse().map_err(|_| bad("bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (l2, row) = lines.next().ok_or_else(|| bad("block truncated"))?;
            let vals: Vec<&str> = if cols == 0 { vec![] } else { row.trim().split(',').collect() };
            if vals.len() != cols {
                return Err(Error::InvalidModel(format!("line {}: expected {cols} values", l2 + 1)));
            }
            for v in vals {
                data.push(v.parse::<f64>().map_err(|_| Error::InvalidModel(format!("line {}: bad number `{v}`", l2 + 1)))?);
            }
        }
        out.push((label.to_string(), DMatrix::from_row_slice(rows, cols, &data)));
    }
    Ok(out)
}
