//! Text format for [`Field2D`]:
//!
//! ```text
//! gsqg-field 1
//! nx ny x1min x1max x2min x2max
//! <ny rows of nx values, row index increasing with x₂>
//! ```
//!
//! Numbers are written with 17 significant digits, which round-trips `f64`
//! exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GsqgError, Result};
use crate::fields::{Field2D, Grid2D};
use crate::real::Real;

const MAGIC: &str = "gsqg-field";
const VERSION: &str = "1";

fn num<T: Real>(x: T) -> String {
    format!("{:.16e}", x.f64())
}

pub fn field_to_string<T: Real>(f: &Field2D<T>) -> String {
    let g = &f.grid;
    let mut s = String::with_capacity(24 * (g.len() + 8));
    let _ = writeln!(s, "{MAGIC} {VERSION}");
    let _ = writeln!(s, "{} {} {} {} {} {}", g.nx, g.ny, num(g.x1min), num(g.x1max), num(g.x2min), num(g.x2max));
    for j in 0..g.ny {
        let row: Vec<String> = (0..g.nx).map(|i| num(f.at(i, j))).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

fn perr(line: usize, msg: impl Into<String>) -> GsqgError {
    GsqgError::Parse { line, msg: msg.into() }
}

fn parse_num<T: Real>(tok: &str, line: usize) -> Result<T> {
    tok.parse::<f64>().map(T::lit).map_err(|_| perr(line, format!("bad number '{tok}'")))
}

pub fn field_from_str<T: Real>(text: &str) -> Result<Field2D<T>> {
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
    let (ln, head) = lines.next().ok_or_else(|| perr(1, "empty input"))?;
    let mut toks = head.split_whitespace();
    match (toks.next(), toks.next(), toks.next()) {
        (Some(MAGIC), Some(VERSION), None) => {}
        (Some(MAGIC), Some(v), None) => return Err(perr(ln, format!("unsupported version '{v}'"))),
        _ => return Err(perr(ln, format!("expected '{MAGIC} {VERSION}', found '{head}'"))),
    }
    let (ln, dims) = lines.next().ok_or_else(|| perr(2, "missing grid line"))?;
    let toks: Vec<&str> = dims.split_whitespace().collect();
    if toks.len() != 6 {
        return Err(perr(ln, format!("grid line needs 6 tokens, found {}", toks.len())));
    }
    let count = |t: &str| t.parse::<usize>().map_err(|_| perr(ln, format!("bad cell count '{t}'")));
    let nx = count(toks[0])?;
    let ny = count(toks[1])?;
    let ext: Vec<T> = toks[2..].iter().map(|t| parse_num(t, ln)).collect::<Result<_>>()?;
    let grid = Grid2D::new(nx, ny, ext[0], ext[1], ext[2], ext[3]).map_err(|e| perr(ln, e.to_string()))?;
    let mut values = Vec::with_capacity(nx * ny);
    for row in 0..ny {
        let (ln, l) = lines.next().ok_or_else(|| perr(3 + row, format!("missing row {row}")))?;
        let before = values.len();
        for tok in l.split_whitespace() {
            values.push(parse_num::<T>(tok, ln)?);
        }
        if values.len() - before != nx {
            return Err(perr(ln, format!("row {row} has {} values, expected {nx}", values.len() - before)));
        }
    }
    if let Some((ln, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(perr(ln, format!("trailing content '{}'", l.trim())));
    }
    Field2D::from_values(grid, values)
}

pub fn write_field<T: Real>(path: &Path, f: &Field2D<T>) -> Result<()> {
    std::fs::write(path, field_to_string(f))?;
    Ok(())
}

pub fn read_field<T: Real>(path: &Path) -> Result<Field2D<T>> {
    field_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Field2D<f64> {
        let g = Grid2D::new(3, 2, 0.1, 0.7, -0.3, 0.3).unwrap();
        Field2D::from_values(g, vec![0.0, 1.0 / 3.0, 2.5e-300, std::f64::consts::PI, 1e20, 7.0]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        let g: Field2D<f64> = field_from_str(&field_to_string(&f)).unwrap();
        assert_eq!(g, f);
    }

    #[test]
    fn rejects_other_versions() {
        let s = field_to_string(&sample()).replacen("gsqg-field 1", "gsqg-field 2", 1);
        let e = field_from_str::<f64>(&s).unwrap_err();
        assert_eq!(e, GsqgError::Parse { line: 1, msg: "unsupported version '2'".into() });
    }

    #[test]
    fn reports_truncated_rows() {
        let s = field_to_string(&sample());
        let cut: Vec<&str> = s.lines().collect();
        let short = format!("{}\n{}\n{}\n1 2\n", cut[0], cut[1], cut[2]);
        match field_from_str::<f64>(&short) {
            Err(GsqgError::Parse { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("row 1"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let missing = format!("{}\n{}\n{}\n", cut[0], cut[1], cut[2]);
        assert!(matches!(field_from_str::<f64>(&missing), Err(GsqgError::Parse { line: 4, .. })));
    }

    #[test]
    fn reports_bad_tokens() {
        let s = "gsqg-field 1\n2 2 0 1 0 x\n";
        match field_from_str::<f64>(s) {
            Err(GsqgError::Parse { line: 2, msg }) => assert!(msg.contains("'x'")),
            other => panic!("{other:?}"),
        }
    }
}
