//! Georeferenced rasters, point clouds and hyperspectral cubes, with the
//! text/binary formats used to move them on and off disk.
//!
//! All rasters share one planar coordinate system. Row 0 is the northern
//! edge; `(xll, yll)` is the lower-left corner of the lower-left cell.

mod ascii_grid;
mod envi;
mod points;
mod terrain;
mod truth;

pub use ascii_grid::{format_ascii_grid, parse_ascii_grid, read_ascii_grid, write_ascii_grid};
pub use envi::{read_envi_cube, write_envi_cube, EnviDataType};
pub use points::{read_point_cloud, write_point_cloud, LidarPoint, PointCloud};
pub use terrain::{terrain_derivatives, TerrainDerivatives};
pub use truth::{read_ground_truth, write_ground_truth, GroundTruthPoint, SampleRole};

use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;

/// Raster extent and cell size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub ncols: usize,
    pub nrows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
}

impl GridGeometry {
    pub fn new(ncols: usize, nrows: usize, xll: f64, yll: f64, cellsize: f64) -> Result<Self> {
        if ncols == 0 || nrows == 0 {
            return Err(Error::Data(format!(
                "grid dimensions must be positive, got {ncols}x{nrows}"
            )));
        }
        if !(cellsize > 0.0) || !cellsize.is_finite() {
            return Err(Error::Data(format!("cellsize must be > 0, got {cellsize}")));
        }
        if !xll.is_finite() || !yll.is_finite() {
            return Err(Error::Data("grid origin must be finite".into()));
        }
        Ok(Self {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
        })
    }

    /// Smallest geometry snapped to multiples of `cellsize` that covers the box.
    pub fn covering(min_x: f64, min_y: f64, max_x: f64, max_y: f64, cellsize: f64) -> Result<Self> {
        let xll = (min_x / cellsize).floor() * cellsize;
        let yll = (min_y / cellsize).floor() * cellsize;
        let ncols = (((max_x - xll) / cellsize).floor() as usize + 1).max(1);
        let nrows = (((max_y - yll) / cellsize).floor() as usize + 1).max(1);
        Self::new(ncols, nrows, xll, yll, cellsize)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.ncols * self.nrows
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.ncols + col
    }

    #[inline]
    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.ncols, index % self.ncols)
    }

    pub fn x_max(&self) -> f64 {
        self.xll + self.ncols as f64 * self.cellsize
    }

    pub fn y_max(&self) -> f64 {
        self.yll + self.nrows as f64 * self.cellsize
    }

    /// Map coordinates of the center of cell `(row, col)`.
    #[inline]
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.xll + (col as f64 + 0.5) * self.cellsize,
            self.yll + (self.nrows as f64 - row as f64 - 0.5) * self.cellsize,
        )
    }

    /// Cell containing `(x, y)`, or `None` outside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.xll) / self.cellsize).floor();
        let r_from_bottom = ((y - self.yll) / self.cellsize).floor();
        if c < 0.0 || r_from_bottom < 0.0 {
            return None;
        }
        let (c, rb) = (c as usize, r_from_bottom as usize);
        if c >= self.ncols || rb >= self.nrows {
            return None;
        }
        Some((self.nrows - 1 - rb, c))
    }

    /// Fractional column/row coordinates where integer values fall on cell centers.
    #[inline]
    fn continuous_index(&self, x: f64, y: f64) -> (f64, f64) {
        let fc = (x - self.xll) / self.cellsize - 0.5;
        let fr = (self.y_max() - y) / self.cellsize - 0.5;
        (fc, fr)
    }

    pub fn same_as(&self, other: &GridGeometry) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && (self.xll - other.xll).abs() <= 1e-9 * self.cellsize
            && (self.yll - other.yll).abs() <= 1e-9 * self.cellsize
            && (self.cellsize - other.cellsize).abs() <= 1e-12 * self.cellsize
    }
}

/// Single-band georeferenced raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub geometry: GridGeometry,
    pub nodata: f64,
    values: Vec<f64>,
}

impl Grid {
    pub fn from_values(geometry: GridGeometry, nodata: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::Data(format!(
                "grid holds {} values but geometry needs {}",
                values.len(),
                geometry.len()
            )));
        }
        Ok(Self {
            geometry,
            nodata,
            values,
        })
    }

    pub fn filled(geometry: GridGeometry, nodata: f64, value: f64) -> Self {
        Self {
            geometry,
            nodata,
            values: vec![value; geometry.len()],
        }
    }

    pub fn ncols(&self) -> usize {
        self.geometry.ncols
    }

    pub fn nrows(&self) -> usize {
        self.geometry.nrows
    }

    pub fn cellsize(&self) -> f64 {
        self.geometry.cellsize
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.geometry.index(row, col)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let i = self.geometry.index(row, col);
        self.values[i] = value;
    }

    #[inline]
    pub fn is_nodata(&self, value: f64) -> bool {
        value.is_nan() || value == self.nodata
    }

    /// Value at `(row, col)` unless it is the nodata sentinel.
    #[inline]
    pub fn valid(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.get(row, col);
        (!self.is_nodata(v)).then_some(v)
    }

    /// Value of the cell containing `(x, y)`; `None` outside or on nodata.
    pub fn value_at(&self, x: f64, y: f64) -> Option<f64> {
        let (r, c) = self.geometry.cell_of(x, y)?;
        self.valid(r, c)
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|v| !self.is_nodata(*v))
    }

    pub fn map_valid(&self, f: impl Fn(f64) -> f64) -> Grid {
        let values = self
            .values
            .iter()
            .map(|&v| if self.is_nodata(v) { self.nodata } else { f(v) })
            .collect();
        Grid {
            geometry: self.geometry,
            nodata: self.nodata,
            values,
        }
    }
}

/// Bilinear interpolation between the four cell centers surrounding `(x, y)`.
///
/// Returns `Ok(None)` when any contributing neighbor is nodata and an
/// out-of-bounds error when the query lies outside the hull of cell centers.
pub fn bilinear_sample(grid: &Grid, x: f64, y: f64) -> Result<Option<f64>> {
    let g = &grid.geometry;
    let (fc, fr) = g.continuous_index(x, y);
    let max_c = (g.ncols - 1) as f64;
    let max_r = (g.nrows - 1) as f64;
    let tol = 1e-9;
    if !(fc >= -tol && fc <= max_c + tol && fr >= -tol && fr <= max_r + tol) {
        return Err(Error::OutOfBounds(format!(
            "({x}, {y}) is outside the cell-center hull"
        )));
    }
    let fc = fc.clamp(0.0, max_c);
    let fr = fr.clamp(0.0, max_r);
    let c0 = (fc.floor() as usize).min(g.ncols.saturating_sub(2));
    let r0 = (fr.floor() as usize).min(g.nrows.saturating_sub(2));
    let c1 = (c0 + 1).min(g.ncols - 1);
    let r1 = (r0 + 1).min(g.nrows - 1);
    let tx = fc - c0 as f64;
    let ty = fr - r0 as f64;

    let mut acc = 0.0;
    for (r, wr) in [(r0, 1.0 - ty), (r1, ty)] {
        for (c, wc) in [(c0, 1.0 - tx), (c1, tx)] {
            let Some(v) = grid.valid(r, c) else {
                return Ok(None);
            };
            acc += wr * wc * v;
        }
    }
    Ok(Some(acc))
}

/// Georeferenced band-sequential cube. Missing pixels hold NaN in every band.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    pub geometry: GridGeometry,
    pub nbands: usize,
    pub wavelengths: Option<Vec<f64>>,
    samples: Vec<f64>,
}

impl HyperCube {
    pub fn new(
        geometry: GridGeometry,
        nbands: usize,
        wavelengths: Option<Vec<f64>>,
        samples: Vec<f64>,
    ) -> Result<Self> {
        if nbands == 0 {
            return Err(Error::Data("cube needs at least one band".into()));
        }
        if samples.len() != nbands * geometry.len() {
            return Err(Error::Data(format!(
                "cube holds {} samples, expected {} bands x {} pixels",
                samples.len(),
                nbands,
                geometry.len()
            )));
        }
        if let Some(w) = &wavelengths {
            if w.len() != nbands {
                return Err(Error::Data(format!(
                    "{} wavelengths for {} bands",
                    w.len(),
                    nbands
                )));
            }
            if w.windows(2).any(|p| !(p[1] > p[0])) {
                return Err(Error::Data("wavelengths must be strictly increasing".into()));
            }
        }
        Ok(Self {
            geometry,
            nbands,
            wavelengths,
            samples,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn npixels(&self) -> usize {
        self.geometry.len()
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.npixels();
        &self.samples[band * n..(band + 1) * n]
    }

    #[inline]
    pub fn sample(&self, band: usize, pixel: usize) -> f64 {
        self.samples[band * self.npixels() + pixel]
    }

    /// Spectrum of one pixel across all bands.
    pub fn pixel(&self, pixel: usize) -> Vec<f64> {
        (0..self.nbands).map(|b| self.sample(b, pixel)).collect()
    }

    /// Spectrum restricted to `bands`, in the given order.
    pub fn pixel_bands(&self, pixel: usize, bands: &[usize]) -> Vec<f64> {
        bands.iter().map(|&b| self.sample(b, pixel)).collect()
    }

    pub fn pixel_is_nodata(&self, pixel: usize) -> bool {
        (0..self.nbands).any(|b| self.sample(b, pixel).is_nan())
    }
}
