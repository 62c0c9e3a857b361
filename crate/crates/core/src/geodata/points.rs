use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub height_above_ground: Option<f64>,
    pub return_number: u32,
    pub is_ground: bool,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            height_above_ground: None,
            return_number: 1,
            is_ground: false,
        }
    }

    pub fn with_height(mut self, h: f64) -> Self {
        self.height_above_ground = Some(h);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(min_x, min_y, max_x, max_y)`, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let first = self.points.first()?;
        Some(self.points.iter().fold(
            (first.x, first.y, first.x, first.y),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        ))
    }
}

#[derive(Clone, Copy)]
enum Column {
    X,
    Y,
    Z,
    ReturnNumber,
    IsGround,
    Height,
    Ignored,
}

/// Reads a comma-delimited cloud with header `x,y,z[,return_number][,is_ground]`.
///
/// An optional `height_above_ground` column is also recognized.
pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_point_cloud(&text, path)
}

pub(crate) fn parse_point_cloud(text: &str, origin: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::parse(origin, 1, "empty point file"));
    };
    let columns: Vec<Column> = header
        .split(',')
        .map(|h| match h.trim().to_ascii_lowercase().as_str() {
            "x" => Column::X,
            "y" => Column::Y,
            "z" => Column::Z,
            "return_number" => Column::ReturnNumber,
            "is_ground" => Column::IsGround,
            "height_above_ground" => Column::Height,
            _ => Column::Ignored,
        })
        .collect();
    for (need, name) in [(0, "x"), (1, "y"), (2, "z")] {
        let found = columns.iter().any(|c| {
            matches!(
                (need, c),
                (0, Column::X) | (1, Column::Y) | (2, Column::Z)
            )
        });
        if !found {
            return Err(Error::parse(origin, 1, format!("header lacks column {name}")));
        }
    }

    let mut points = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let mut p = LidarPoint::new(f64::NAN, f64::NAN, f64::NAN);
        let mut n = 0;
        for (field, col) in line.split(',').zip(columns.iter()) {
            n += 1;
            let field = field.trim();
            let num = || {
                field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::parse(origin, lineno, format!("invalid number {field:?}"))
                })
            };
            match col {
                Column::X => p.x = num()?,
                Column::Y => p.y = num()?,
                Column::Z => p.z = num()?,
                Column::Height if field.is_empty() => p.height_above_ground = None,
                Column::Height => p.height_above_ground = Some(num()?),
                Column::ReturnNumber => {
                    p.return_number = field.parse::<u32>().ok().filter(|r| *r >= 1).ok_or_else(|| {
                        Error::parse(origin, lineno, format!("invalid return number {field:?}"))
                    })?;
                }
                Column::IsGround => {
                    p.is_ground = match field.to_ascii_lowercase().as_str() {
                        "1" | "true" => true,
                        "0" | "false" => false,
                        _ => {
                            return Err(Error::parse(
                                origin,
                                lineno,
                                format!("invalid is_ground flag {field:?}"),
                            ))
                        }
                    }
                }
                Column::Ignored => {}
            }
        }
        if n != columns.len() {
            return Err(Error::parse(
                origin,
                lineno,
                format!("expected {} fields, found {n}", columns.len()),
            ));
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::parse(origin, 2, "point file has no data lines"));
    }
    Ok(PointCloud { points })
}

pub fn write_point_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let with_height = cloud.points.iter().any(|p| p.height_above_ground.is_some());
    let mut out = String::with_capacity(cloud.len() * 48 + 64);
    out.push_str("x,y,z,return_number,is_ground");
    if with_height {
        out.push_str(",height_above_ground");
    }
    out.push('\n');
    for p in &cloud.points {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            p.x,
            p.y,
            p.z,
            p.return_number,
            u8::from(p.is_ground)
        );
        if with_height {
            match p.height_above_ground {
                Some(h) => {
                    let _ = write!(out, ",{h}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
