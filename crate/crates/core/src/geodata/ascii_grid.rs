use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Grid, GridGeometry, DEFAULT_NODATA};
use crate::error::{Error, Result};

pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ascii_grid(&text, path)
}

pub fn write_ascii_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_ascii_grid(grid)).map_err(|e| Error::io(path, e))
}

#[derive(Default)]
struct Header {
    ncols: Option<usize>,
    nrows: Option<usize>,
    xll: Option<f64>,
    yll: Option<f64>,
    center_registered: (bool, bool),
    cellsize: Option<f64>,
    nodata: Option<f64>,
}

/// Parses ESRI ASCII grid text. `origin` only labels error messages.
pub fn parse_ascii_grid(text: &str, origin: &Path) -> Result<Grid> {
    let mut header = Header::default();
    let mut lines = text.lines().enumerate().peekable();

    while let Some(&(idx, line)) = lines.peek() {
        let lineno = idx + 1;
        let mut tokens = line.split_whitespace();
        let Some(key) = tokens.next() else {
            lines.next();
            continue;
        };
        if !key.starts_with(|c: char| c.is_ascii_alphabetic()) {
            break;
        }
        let value = tokens
            .next()
            .ok_or_else(|| Error::parse(origin, lineno, format!("header key {key} has no value")))?;
        if tokens.next().is_some() {
            return Err(Error::parse(origin, lineno, format!("trailing tokens after {key}")));
        }
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::parse(origin, lineno, format!("{key}: expected a positive integer, got {v:?}")))
        };
        let real = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::parse(origin, lineno, format!("{key}: expected a number, got {v:?}")))
        };
        match key.to_ascii_lowercase().as_str() {
            "ncols" => header.ncols = Some(int(value)?),
            "nrows" => header.nrows = Some(int(value)?),
            "xllcorner" => header.xll = Some(real(value)?),
            "yllcorner" => header.yll = Some(real(value)?),
            "xllcenter" => {
                header.xll = Some(real(value)?);
                header.center_registered.0 = true;
            }
            "yllcenter" => {
                header.yll = Some(real(value)?);
                header.center_registered.1 = true;
            }
            "cellsize" => header.cellsize = Some(real(value)?),
            "nodata_value" => header.nodata = Some(real(value)?),
            _ => {
                return Err(Error::parse(origin, lineno, format!("unknown header key {key:?}")));
            }
        }
        lines.next();
    }

    let header_end = lines.peek().map(|&(i, _)| i + 1).unwrap_or(text.lines().count() + 1);
    let missing = |what: &str| Error::parse(origin, header_end, format!("header is missing {what}"));
    let ncols = header.ncols.ok_or_else(|| missing("NCOLS"))?;
    let nrows = header.nrows.ok_or_else(|| missing("NROWS"))?;
    let cellsize = header.cellsize.ok_or_else(|| missing("CELLSIZE"))?;
    let mut xll = header.xll.ok_or_else(|| missing("XLLCORNER"))?;
    let mut yll = header.yll.ok_or_else(|| missing("YLLCORNER"))?;
    if header.center_registered.0 {
        xll -= cellsize / 2.0;
    }
    if header.center_registered.1 {
        yll -= cellsize / 2.0;
    }
    let nodata = header.nodata.unwrap_or(DEFAULT_NODATA);
    let geometry = GridGeometry::new(ncols, nrows, xll, yll, cellsize)
        .map_err(|e| Error::parse(origin, header_end, e.to_string()))?;

    let mut values = Vec::with_capacity(geometry.len());
    let mut row = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        if row > nrows {
            return Err(Error::parse(
                origin,
                lineno,
                format!("more than the declared {nrows} rows"),
            ));
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v = tok.parse::<f64>().map_err(|_| {
                Error::parse(origin, lineno, format!("row {row}: non-numeric value {tok:?}"))
            })?;
            values.push(v);
        }
        let got = values.len() - before;
        if got != ncols {
            return Err(Error::parse(
                origin,
                lineno,
                format!("row {row}: expected {ncols} values, found {got}"),
            ));
        }
    }
    if row != nrows {
        return Err(Error::parse(
            origin,
            text.lines().count(),
            format!("expected {nrows} rows, found {row}"),
        ));
    }
    Grid::from_values(geometry, nodata, values)
}

pub fn format_ascii_grid(grid: &Grid) -> String {
    let g = &grid.geometry;
    let mut out = String::with_capacity(g.len() * 8 + 128);
    let _ = writeln!(out, "ncols {}", g.ncols);
    let _ = writeln!(out, "nrows {}", g.nrows);
    let _ = writeln!(out, "xllcorner {}", g.xll);
    let _ = writeln!(out, "yllcorner {}", g.yll);
    let _ = writeln!(out, "cellsize {}", g.cellsize);
    let _ = writeln!(out, "NODATA_value {}", grid.nodata);
    for row in grid.values().chunks(g.ncols) {
        let mut first = true;
        for &v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            // NaN cells are written as the sentinel.
            let v = if v.is_nan() { grid.nodata } else { v };
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}
