use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleRole {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl SampleRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleRole::Train => "train",
            SampleRole::Test => "test",
            SampleRole::Unassigned => "unassigned",
        }
    }
}

/// A field-surveyed stem position with its species.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPoint {
    pub x: f64,
    pub y: f64,
    pub species_code: String,
    pub role: SampleRole,
}

/// Reads `x,y,species_code[,role]`.
pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthPoint>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::parse(path, 1, "empty ground-truth file"));
    };
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_ascii_lowercase()).collect();
    let pos = |name: &str| cols.iter().position(|c| c == name);
    let (Some(ix), Some(iy), Some(is)) = (pos("x"), pos("y"), pos("species_code")) else {
        return Err(Error::parse(path, 1, "header needs x, y and species_code"));
    };
    let irole = pos("role");

    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::parse(path, lineno, format!("expected {} fields", cols.len())));
        }
        let num = |i: usize| {
            fields[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, lineno, format!("invalid coordinate {:?}", fields[i])))
        };
        let species_code = fields[is].to_string();
        if species_code.is_empty() {
            return Err(Error::parse(path, lineno, "empty species_code"));
        }
        let role = match irole.map(|i| fields[i]) {
            None | Some("") | Some("unassigned") => SampleRole::Unassigned,
            Some("train") => SampleRole::Train,
            Some("test") => SampleRole::Test,
            Some(other) => return Err(Error::parse(path, lineno, format!("unknown role {other:?}"))),
        };
        out.push(GroundTruthPoint {
            x: num(ix)?,
            y: num(iy)?,
            species_code,
            role,
        });
    }
    Ok(out)
}

pub fn write_ground_truth(points: &[GroundTruthPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("x,y,species_code,role\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.x, p.y, p.species_code, p.role.as_str());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
