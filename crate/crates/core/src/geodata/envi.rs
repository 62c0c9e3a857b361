//! ENVI-style band-sequential cubes: a text header plus a raw data file.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{GridGeometry, HyperCube};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnviDataType {
    /// Code 4.
    Float32,
    /// Code 12.
    UInt16,
}

impl EnviDataType {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            4 => Some(Self::Float32),
            12 => Some(Self::UInt16),
            _ => None,
        }
    }

    fn code(self) -> u32 {
        match self {
            Self::Float32 => 4,
            Self::UInt16 => 12,
        }
    }

    fn width(self) -> usize {
        match self {
            Self::Float32 => 4,
            Self::UInt16 => 2,
        }
    }
}

/// Splits `key = value` entries; brace-delimited values may span lines.
fn header_entries(text: &str, origin: &Path) -> Result<HashMap<String, (usize, String)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == "ENVI" => {}
        _ => return Err(Error::parse(origin, 1, "header must start with ENVI")),
    }
    let mut entries = HashMap::new();
    while let Some((idx, line)) = lines.next() {
        let lineno = idx + 1;
        if line.trim().is_empty() || line.trim_start().starts_with(';') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(origin, lineno, format!("expected key = value, got {line:?}")));
        };
        let mut value = value.trim().to_string();
        if value.starts_with('{') {
            while !value.contains('}') {
                let Some((_, more)) = lines.next() else {
                    return Err(Error::parse(origin, lineno, "unterminated { in header"));
                };
                value.push(' ');
                value.push_str(more.trim());
            }
            value = value
                .trim_start_matches('{')
                .trim_end()
                .trim_end_matches('}')
                .trim()
                .to_string();
        }
        entries.insert(key.trim().to_ascii_lowercase(), (lineno, value));
    }
    Ok(entries)
}

pub fn read_envi_cube(header_path: impl AsRef<Path>, data_path: impl AsRef<Path>) -> Result<HyperCube> {
    let header_path = header_path.as_ref();
    let data_path = data_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let data = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    decode_envi(&text, header_path, &data)
}

pub(crate) fn decode_envi(text: &str, origin: &Path, data: &[u8]) -> Result<HyperCube> {
    let entries = header_entries(text, origin)?;
    let get = |key: &str| entries.get(key);
    let int = |key: &str| -> Result<usize> {
        let (line, v) = get(key).ok_or_else(|| Error::parse(origin, 1, format!("header lacks `{key}`")))?;
        v.parse::<usize>()
            .map_err(|_| Error::parse(origin, *line, format!("`{key}` is not an integer: {v:?}")))
    };
    let ncols = int("samples")?;
    let nrows = int("lines")?;
    let nbands = int("bands")?;

    let dtype_code = int("data type")? as u32;
    let dtype = EnviDataType::from_code(dtype_code)
        .ok_or_else(|| Error::Unsupported(format!("ENVI data type {dtype_code}")))?;
    let interleave = get("interleave").map(|(_, v)| v.to_ascii_lowercase()).unwrap_or_else(|| "bsq".into());
    if interleave != "bsq" {
        return Err(Error::Unsupported(format!("{interleave} interleave (only bsq)")));
    }
    let big_endian = match get("byte order") {
        None => false,
        Some((line, v)) => match v.as_str() {
            "0" => false,
            "1" => true,
            _ => return Err(Error::parse(origin, *line, format!("invalid byte order {v:?}"))),
        },
    };
    let header_offset = match get("header offset") {
        None => 0,
        Some(_) => int("header offset")?,
    };

    let (mut xll, mut yll, mut cellsize) = (0.0, 0.0, 1.0);
    if let Some((line, v)) = get("map info") {
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::parse(origin, *line, "malformed map info"))
        };
        let (ref_px, ref_py, ref_x, ref_y, px, py) = (num(1)?, num(2)?, num(3)?, num(4)?, num(5)?, num(6)?);
        if (px - py).abs() > 1e-9 * px.abs() {
            return Err(Error::Unsupported("non-square pixels".into()));
        }
        cellsize = px;
        // Reference pixel coordinates are 1-based at the upper-left corner.
        let x_ul = ref_x - (ref_px - 1.0) * px;
        let y_ul = ref_y + (ref_py - 1.0) * py;
        xll = x_ul;
        yll = y_ul - nrows as f64 * py;
    }
    let geometry = GridGeometry::new(ncols, nrows, xll, yll, cellsize)?;

    let wavelengths = match get("wavelength") {
        None => None,
        Some((line, v)) => Some(
            v.split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(origin, *line, "malformed wavelength list"))?,
        ),
    };
    let ignore = match get("data ignore value") {
        None => None,
        Some((line, v)) => Some(
            v.parse::<f64>()
                .map_err(|_| Error::parse(origin, *line, "malformed data ignore value"))?,
        ),
    };

    let count = ncols * nrows * nbands;
    let expected = count * dtype.width();
    let payload = data.get(header_offset..).unwrap_or(&[]);
    if payload.len() != expected {
        return Err(Error::Data(format!(
            "data file holds {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let mut samples: Vec<f64> = match dtype {
        EnviDataType::Float32 => payload
            .chunks_exact(4)
            .map(|b| {
                let b = [b[0], b[1], b[2], b[3]];
                f64::from(if big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) })
            })
            .collect(),
        EnviDataType::UInt16 => payload
            .chunks_exact(2)
            .map(|b| {
                let b = [b[0], b[1]];
                f64::from(if big_endian { u16::from_be_bytes(b) } else { u16::from_le_bytes(b) })
            })
            .collect(),
    };
    if let Some(ignore) = ignore {
        for s in samples.iter_mut().filter(|s| **s == ignore) {
            *s = f64::NAN;
        }
    }
    HyperCube::new(geometry, nbands, wavelengths, samples)
}

/// Writes a little-endian float32 BSQ cube. NaN pixels are kept as NaN.
pub fn write_envi_cube(cube: &HyperCube, header_path: impl AsRef<Path>, data_path: impl AsRef<Path>) -> Result<()> {
    let header_path = header_path.as_ref();
    let data_path = data_path.as_ref();
    fs::write(header_path, envi_header(cube, EnviDataType::Float32)).map_err(|e| Error::io(header_path, e))?;
    let mut bytes = Vec::with_capacity(cube.samples().len() * 4);
    for &s in cube.samples() {
        bytes.extend_from_slice(&(s as f32).to_le_bytes());
    }
    fs::write(data_path, bytes).map_err(|e| Error::io(data_path, e))
}

fn envi_header(cube: &HyperCube, dtype: EnviDataType) -> String {
    let g = &cube.geometry;
    let mut h = String::from("ENVI\n");
    let _ = writeln!(h, "samples = {}", g.ncols);
    let _ = writeln!(h, "lines = {}", g.nrows);
    let _ = writeln!(h, "bands = {}", cube.nbands);
    let _ = writeln!(h, "header offset = 0");
    let _ = writeln!(h, "data type = {}", dtype.code());
    let _ = writeln!(h, "interleave = bsq");
    let _ = writeln!(h, "byte order = 0");
    let _ = writeln!(
        h,
        "map info = {{Arbitrary, 1, 1, {}, {}, {}, {}}}",
        g.xll,
        g.y_max(),
        g.cellsize,
        g.cellsize
    );
    if let Some(w) = &cube.wavelengths {
        let list: Vec<String> = w.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(h, "wavelength units = Micrometers");
        let _ = writeln!(h, "wavelength = {{{}}}", list.join(", "));
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    const HDR: &str = "ENVI\nsamples = 2\nlines = 2\nbands = 3\ndata type = 4\ninterleave = bsq\nbyte order = 0\n";

    #[test]
    fn float_cube_exact_values() {
        let vals: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 1.0).collect();
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let cube = decode_envi(HDR, Path::new("c.hdr"), &bytes).unwrap();
        assert_eq!((cube.geometry.ncols, cube.geometry.nrows, cube.nbands), (2, 2, 3));
        // band 1, pixel 2 is element 4 + 2
        assert_eq!(cube.sample(1, 2), 2.0);
        assert_eq!(cube.samples().len(), 12);
    }

    #[test]
    fn big_endian_u16_matches_hand_decode() {
        let hdr = "ENVI\nsamples = 2\nlines = 1\nbands = 2\ndata type = 12\ninterleave = bsq\nbyte order = 1\n";
        let bytes = [0x01u8, 0x02, 0xff, 0x00, 0x00, 0x10, 0x80, 0x01];
        let cube = decode_envi(hdr, Path::new("c.hdr"), &bytes).unwrap();
        // hand calculation: hi * 256 + lo
        let expected = [258.0, 65280.0, 16.0, 32769.0];
        assert_eq!(cube.samples(), &expected);
    }

    #[test]
    fn rejects_bil_and_unknown_types() {
        let bil = HDR.replace("bsq", "bil");
        assert!(matches!(
            decode_envi(&bil, Path::new("c.hdr"), &[0; 48]),
            Err(Error::Unsupported(_))
        ));
        let dt = HDR.replace("data type = 4", "data type = 5");
        assert!(matches!(
            decode_envi(&dt, Path::new("c.hdr"), &[0; 96]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn data_length_mismatch() {
        assert!(matches!(
            decode_envi(HDR, Path::new("c.hdr"), &[0; 47]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn multiline_wavelengths_and_map_info() {
        let hdr = format!(
            "{HDR}map info = {{UTM, 1, 1, 500.0, 1000.0, 0.5, 0.5, 32, North, WGS-84}}\nwavelength = {{0.4, 0.5,\n 0.6}}\n"
        );
        let cube = decode_envi(&hdr, Path::new("c.hdr"), &[0; 48]).unwrap();
        assert_eq!(cube.wavelengths.as_deref(), Some(&[0.4, 0.5, 0.6][..]));
        assert_eq!(cube.geometry.xll, 500.0);
        assert_eq!(cube.geometry.yll, 999.0);
        assert_eq!(cube.geometry.cellsize, 0.5);
    }

    #[test]
    fn write_read_round_trip() {
        let g = GridGeometry::new(3, 2, 100.0, 50.0, 0.5).unwrap();
        let samples: Vec<f64> = (0..24).map(|i| 0.01 + i as f64 * 0.137).collect();
        let cube = HyperCube::new(g, 4, Some(vec![0.4, 0.5, 0.6, 0.7]), samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (h, d) = (dir.path().join("c.hdr"), dir.path().join("c.bsq"));
        write_envi_cube(&cube, &h, &d).unwrap();
        let back = read_envi_cube(&h, &d).unwrap();
        assert!(back.geometry.same_as(&cube.geometry));
        assert_eq!(back.wavelengths, cube.wavelengths);
        for (a, b) in cube.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1e-6 * a.abs());
        }
    }
}
