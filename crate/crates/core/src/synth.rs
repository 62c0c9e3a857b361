//! Synthetic forest scenes with known truth.
//!
//! A scene is a planar terrain carrying paraboloid crowns,
//! `h(r) = H (1 - 0.35 (r / R)^2)` for `r <= R`, sampled by a jittered-grid
//! LiDAR survey and imaged by a co-registered hyperspectral cube in which each
//! crown pixel carries its species signature plus Gaussian noise. The crown
//! rim stays above 0.55 H, so a seed-threshold delineation recovers the disc.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::allometry::{agb_jucker, estimate_dbh, volume_double_entry};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evaluate::{write_plots, PlotDefinition, PlotRecord};
use crate::geodata::{
    write_ascii_grid, write_envi_cube, write_ground_truth, write_point_cloud, Grid, GridGeometry, GroundTruthPoint,
    HyperCube, LidarPoint, PointCloud, SampleRole, DEFAULT_NODATA,
};

/// Relative height drop from apex to crown rim.
const CROWN_SHAPE: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTree {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub crown_radius: f64,
    pub species: String,
}

impl SynthTree {
    pub fn canopy_height(&self, x: f64, y: f64) -> Option<f64> {
        let r = (x - self.x).hypot(y - self.y);
        (r <= self.crown_radius).then(|| self.height * (1.0 - CROWN_SHAPE * (r / self.crown_radius).powi(2)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    /// Scene extent, m.
    pub width: f64,
    pub height: f64,
    pub n_trees: usize,
    pub species: Vec<String>,
    /// Bands in the raw cube, before head/tail trimming.
    pub n_bands: usize,
    /// First returns per m².
    pub point_density: f64,
    /// Per-band Gaussian noise on reflectance.
    pub noise_sigma: f64,
    pub min_tree_height: f64,
    pub max_tree_height: f64,
    pub min_crown_radius: f64,
    pub max_crown_radius: f64,
    /// Minimum gap between neighbouring crown rims, m.
    pub crown_gap: f64,
    /// Minimum apex spacing, m.
    pub min_apex_spacing: f64,
    pub n_plots: usize,
    /// Stems are kept at least this far from any plot boundary, m.
    pub plot_edge_clearance: f64,
    pub dtm_cellsize: f64,
    pub cube_resolution: f64,
    pub base_elevation: f64,
    pub slope_x: f64,
    pub slope_y: f64,
    /// Explicit trees; when non-empty they replace random placement.
    pub trees: Vec<SynthTree>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 200.0,
            height: 200.0,
            n_trees: 200,
            species: ["A_alba", "F_sylvatica", "L_decidua", "P_abies", "P_sylvestris"]
                .map(String::from)
                .to_vec(),
            n_bands: 75,
            point_density: 10.0,
            noise_sigma: 0.01,
            min_tree_height: 12.0,
            max_tree_height: 32.0,
            min_crown_radius: 2.0,
            max_crown_radius: 3.5,
            crown_gap: 1.0,
            min_apex_spacing: 5.5,
            n_plots: 10,
            plot_edge_clearance: 1.0,
            dtm_cellsize: 1.0,
            cube_resolution: 0.5,
            base_elevation: 800.0,
            slope_x: 0.05,
            slope_y: -0.03,
            trees: Vec::new(),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("width", self.width),
            ("height", self.height),
            ("point_density", self.point_density),
            ("min_tree_height", self.min_tree_height),
            ("min_crown_radius", self.min_crown_radius),
            ("dtm_cellsize", self.dtm_cellsize),
            ("cube_resolution", self.cube_resolution),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("synth.{name} must be > 0, got {v}")));
            }
        }
        if self.max_tree_height < self.min_tree_height || self.max_crown_radius < self.min_crown_radius {
            return Err(Error::Config("synth height / crown radius ranges are inverted".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.crown_gap >= 0.0) || !(self.plot_edge_clearance >= 0.0) {
            return Err(Error::Config("synth noise_sigma, crown_gap and plot_edge_clearance must be >= 0".into()));
        }
        if self.species.is_empty() || self.n_bands < 2 {
            return Err(Error::Config("synth needs at least one species and two bands".into()));
        }
        Ok(())
    }

    pub fn terrain(&self, x: f64, y: f64) -> f64 {
        self.base_elevation + self.slope_x * x + self.slope_y * y
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        (0..self.n_bands).map(|b| 0.38 + 0.67 * b as f64 / (self.n_bands - 1) as f64).collect()
    }

    /// Plot centres on a regular lattice over the scene.
    pub fn plot_centers(&self) -> Vec<(f64, f64)> {
        if self.n_plots == 0 {
            return Vec::new();
        }
        let cols = ((self.n_plots as f64 * self.width / self.height).sqrt().ceil() as usize).max(1);
        let rows = self.n_plots.div_ceil(cols);
        (0..self.n_plots)
            .map(|k| {
                let (i, j) = (k % cols, k / cols);
                (
                    (i as f64 + 0.5) * self.width / cols as f64,
                    (j as f64 + 0.5) * self.height / rows as f64,
                )
            })
            .collect()
    }
}

/// Vegetation-like reflectance for species `k` of `n`: green peak, red edge,
/// and a species-specific ripple and NIR plateau.
pub fn species_signature(k: usize, n: usize, wavelengths: &[f64]) -> Vec<f64> {
    let nb = wavelengths.len();
    let level = if n > 1 { k as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
    wavelengths
        .iter()
        .enumerate()
        .map(|(b, &l)| {
            let t = b as f64 / (nb - 1) as f64;
            let base = 0.04 + 0.06 * (-((l - 0.55) / 0.03).powi(2)).exp() + 0.40 / (1.0 + (-(l - 0.72) / 0.012).exp());
            let ripple = 0.25 * (std::f64::consts::TAU * 1.5 * (k + 1) as f64 * t + k as f64).sin();
            let plateau = if l > 0.7 { 0.15 * level } else { 0.0 };
            base * (1.0 + ripple + plateau)
        })
        .collect()
}

pub fn background_signature(wavelengths: &[f64]) -> Vec<f64> {
    let nb = wavelengths.len();
    (0..nb).map(|b| 0.12 + 0.08 * b as f64 / (nb - 1) as f64).collect()
}

/// Per-tree truth computed with the configured allometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeTruth {
    pub tree_id: usize,
    pub tree: SynthTree,
    pub dbh: f64,
    pub agb: f64,
    pub volume: f64,
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub trees: Vec<TreeTruth>,
    pub dtm: Grid,
    pub cloud: PointCloud,
    pub cube: HyperCube,
    pub ground_truth: Vec<GroundTruthPoint>,
    pub plots: Vec<PlotRecord>,
    pub signatures: BTreeMap<String, Vec<f64>>,
    pub background: Vec<f64>,
    /// Smallest pairwise RMS signature difference, in units of the noise sigma
    /// (infinite when noise is zero).
    pub separation_sigma: f64,
}

/// Bucketed tree lookup for canopy queries.
struct TreeIndex<'a> {
    trees: &'a [SynthTree],
    cell: f64,
    buckets: BTreeMap<(i64, i64), Vec<usize>>,
}

impl<'a> TreeIndex<'a> {
    fn new(trees: &'a [SynthTree]) -> Self {
        let cell = trees.iter().map(|t| t.crown_radius).fold(1.0, f64::max) * 2.0;
        let mut buckets: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, t) in trees.iter().enumerate() {
            buckets.entry(((t.x / cell).floor() as i64, (t.y / cell).floor() as i64)).or_default().push(i);
        }
        Self { trees, cell, buckets }
    }

    /// Tallest crown surface over `(x, y)` and the tree that supplies it.
    fn canopy(&self, x: f64, y: f64) -> Option<(usize, f64)> {
        let (cx, cy) = ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for &i in self.buckets.get(&(cx + dx, cy + dy)).into_iter().flatten() {
                    if let Some(h) = self.trees[i].canopy_height(x, y) {
                        if best.is_none_or(|(_, b)| h > b) {
                            best = Some((i, h));
                        }
                    }
                }
            }
        }
        best
    }
}

fn place_trees(p: &SynthParams, plot_radius: f64, rng: &mut ChaCha8Rng) -> Result<Vec<SynthTree>> {
    let plots = p.plot_centers();
    let mut trees: Vec<SynthTree> = Vec::with_capacity(p.n_trees);
    let max_attempts = 2000 * p.n_trees.max(1);
    let mut attempts = 0;
    while trees.len() < p.n_trees {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "placed only {} of {} trees; enlarge the scene or reduce crown sizes",
                trees.len(),
                p.n_trees
            )));
        }
        let radius = rng.random_range(p.min_crown_radius..=p.max_crown_radius);
        let margin = radius + 0.5;
        if 2.0 * margin >= p.width.min(p.height) {
            return Err(Error::Config("scene is too small for its crowns".into()));
        }
        let x = rng.random_range(margin..p.width - margin);
        let y = rng.random_range(margin..p.height - margin);
        let height = rng.random_range(p.min_tree_height..=p.max_tree_height);
        let species = p.species[rng.random_range(0..p.species.len())].clone();
        let clear = trees.iter().all(|t| {
            let d = (t.x - x).hypot(t.y - y);
            d >= p.min_apex_spacing && d >= t.crown_radius + radius + p.crown_gap
        });
        let off_edge = plots
            .iter()
            .all(|(px, py)| ((x - px).hypot(y - py) - plot_radius).abs() >= p.plot_edge_clearance);
        if clear && off_edge {
            trees.push(SynthTree { x, y, height, crown_radius: radius, species });
        }
    }
    Ok(trees)
}

/// Generates the scene described by `cfg.synth`, seeded by `cfg.seed`.
pub fn generate_scene(cfg: &PipelineConfig) -> Result<SynthScene> {
    let p = &cfg.synth;
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let trees = if p.trees.is_empty() {
        place_trees(p, cfg.evaluate.plot_radius, &mut rng)?
    } else {
        for t in &p.trees {
            let inside = t.x - t.crown_radius >= 0.0
                && t.y - t.crown_radius >= 0.0
                && t.x + t.crown_radius <= p.width
                && t.y + t.crown_radius <= p.height;
            if !inside || !(t.height > 0.0 && t.crown_radius > 0.0) {
                return Err(Error::Config(format!("tree at ({}, {}) does not fit the scene", t.x, t.y)));
            }
        }
        p.trees.clone()
    };
    let index = TreeIndex::new(&trees);

    // Terrain, padded by two cells so every return has interpolation support.
    let cs = p.dtm_cellsize;
    let pad = 2.0 * cs;
    let dtm_geom = GridGeometry::new(
        ((p.width + 2.0 * pad) / cs).ceil() as usize,
        ((p.height + 2.0 * pad) / cs).ceil() as usize,
        -pad,
        -pad,
        cs,
    )?;
    let mut dtm = Grid::filled(dtm_geom, DEFAULT_NODATA, 0.0);
    for r in 0..dtm_geom.nrows {
        for c in 0..dtm_geom.ncols {
            let (x, y) = dtm_geom.cell_center(r, c);
            dtm.set(r, c, p.terrain(x, y));
        }
    }

    // Jittered-grid first returns.
    let nx = ((p.width * p.point_density.sqrt()).round() as usize).max(1);
    let ny = ((p.height * p.point_density.sqrt()).round() as usize).max(1);
    let (sx, sy) = (p.width / nx as f64, p.height / ny as f64);
    let mut points = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + rng.random::<f64>()) * sx;
            let y = (j as f64 + rng.random::<f64>()) * sy;
            let canopy = index.canopy(x, y).map_or(0.0, |(_, h)| h);
            let mut pt = LidarPoint::new(x, y, p.terrain(x, y) + canopy);
            pt.is_ground = canopy == 0.0;
            points.push(pt);
        }
    }
    let cloud = PointCloud::new(points);

    // Cube.
    let wl = p.wavelengths();
    let signatures: BTreeMap<String, Vec<f64>> = p
        .species
        .iter()
        .enumerate()
        .map(|(k, s)| (s.clone(), species_signature(k, p.species.len(), &wl)))
        .collect();
    let background = background_signature(&wl);
    let res = p.cube_resolution;
    let cube_geom = GridGeometry::new((p.width / res).ceil() as usize, (p.height / res).ceil() as usize, 0.0, 0.0, res)?;
    let npix = cube_geom.len();
    let mut samples = vec![0.0; npix * p.n_bands];
    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    for pix in 0..npix {
        let (r, c) = cube_geom.row_col(pix);
        let (x, y) = cube_geom.cell_center(r, c);
        let sig = match index.canopy(x, y) {
            Some((i, _)) => &signatures[&trees[i].species],
            None => &background,
        };
        for (b, v) in sig.iter().enumerate() {
            let e = if p.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            samples[b * npix + pix] = v + e;
        }
    }
    let cube = HyperCube::new(cube_geom, p.n_bands, Some(wl), samples)?;

    let separation_sigma = {
        let sigs: Vec<&Vec<f64>> = signatures.values().collect();
        let mut min_rms = f64::INFINITY;
        for i in 0..sigs.len() {
            for j in i + 1..sigs.len() {
                let ms = sigs[i].iter().zip(sigs[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.n_bands as f64;
                min_rms = min_rms.min(ms.sqrt());
            }
        }
        if p.noise_sigma > 0.0 { min_rms / p.noise_sigma } else { f64::INFINITY }
    };

    // Truth tables.
    let registry = cfg.allometry.registry();
    let mut truth = Vec::with_capacity(trees.len());
    for (i, t) in trees.iter().enumerate() {
        let info = registry
            .get(&t.species)
            .ok_or_else(|| Error::Config(format!("synthetic species {} is not in the registry", t.species)))?;
        let cd = 2.0 * t.crown_radius;
        let dbh = estimate_dbh(t.height, cd, &cfg.allometry.dbh)?;
        let params = registry.volume_params(&t.species)?.1;
        truth.push(TreeTruth {
            tree_id: i + 1,
            tree: t.clone(),
            dbh,
            agb: agb_jucker(t.height, cd, info.group)?,
            volume: volume_double_entry(dbh, t.height, &params)?.volume,
        });
    }
    let ground_truth = trees
        .iter()
        .map(|t| GroundTruthPoint { x: t.x, y: t.y, species_code: t.species.clone(), role: SampleRole::Unassigned })
        .collect();
    let plots = p
        .plot_centers()
        .into_iter()
        .enumerate()
        .map(|(k, (x, y))| {
            let mut plot = PlotDefinition::new(format!("{}", k + 1), x, y);
            plot.radius = cfg.evaluate.plot_radius;
            plot.dbh_min = cfg.evaluate.dbh_min;
            let members = truth
                .iter()
                .filter(|t| (t.tree.x - x).hypot(t.tree.y - y) <= plot.radius && t.dbh > plot.dbh_min);
            let (v, a) = members.fold((0.0, 0.0), |(v, a), t| (v + t.volume, a + t.agb / 1000.0));
            PlotRecord { plot, observed_volume_m3: Some(v), observed_agb_mg: Some(a) }
        })
        .collect();

    Ok(SynthScene {
        trees: truth,
        dtm,
        cloud,
        cube,
        ground_truth,
        plots,
        signatures,
        background,
        separation_sigma,
    })
}

pub fn format_tree_table(trees: &[TreeTruth]) -> String {
    let mut out = String::from("tree_id,x,y,species_code,height,crown_radius,crown_diameter,dbh,agb,volume\n");
    for t in trees {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            t.tree_id,
            t.tree.x,
            t.tree.y,
            t.tree.species,
            t.tree.height,
            t.tree.crown_radius,
            2.0 * t.tree.crown_radius,
            t.dbh,
            t.agb,
            t.volume
        );
    }
    out
}

/// Writes the scene files and a config pointing at them; returns the config path.
pub fn write_scene(scene: &SynthScene, cfg: &PipelineConfig, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ascii_grid(&scene.dtm, dir.join("dtm.asc"))?;
    write_point_cloud(&scene.cloud, dir.join("points.csv"))?;
    write_envi_cube(&scene.cube, dir.join("cube.hdr"), dir.join("cube.bsq"))?;
    write_ground_truth(&scene.ground_truth, dir.join("ground_truth.csv"))?;
    write_plots(&scene.plots, dir.join("plots.csv"))?;
    let trees = dir.join("trees.csv");
    fs::write(&trees, format_tree_table(&scene.trees)).map_err(|e| Error::io(&trees, e))?;

    let mut out = cfg.clone();
    out.inputs.dtm = Some("dtm.asc".into());
    out.inputs.points = Some("points.csv".into());
    out.inputs.cube_header = Some("cube.hdr".into());
    out.inputs.cube_data = Some("cube.bsq".into());
    out.inputs.ground_truth = Some("ground_truth.csv".into());
    out.inputs.plots = Some("plots.csv".into());
    out.output_dir = "output".into();
    let path = dir.join("config.toml");
    fs::write(&path, out.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// A raster of non-overlapping cone crowns, `h(r) = H (1 - r / R)`.
#[derive(Debug, Clone)]
pub struct ConeScene {
    pub chm: Grid,
    /// `(x, y, height, radius)` per cone.
    pub cones: Vec<(f64, f64, f64, f64)>,
}

/// Random cone scene with apexes at least `min_spacing` apart.
pub fn cone_scene(
    seed: u64,
    n_cones: usize,
    extent: f64,
    resolution: f64,
    min_spacing: f64,
    radius: (f64, f64),
    height: (f64, f64),
) -> Result<ConeScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cones: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(n_cones);
    let mut attempts = 0;
    while cones.len() < n_cones {
        attempts += 1;
        if attempts > 5000 * n_cones.max(1) {
            return Err(Error::Config(format!("placed only {} of {n_cones} cones", cones.len())));
        }
        let r = rng.random_range(radius.0..=radius.1);
        let x = rng.random_range(r..extent - r);
        let y = rng.random_range(r..extent - r);
        let h = rng.random_range(height.0..=height.1);
        if cones.iter().all(|c| (c.0 - x).hypot(c.1 - y) > min_spacing.max(c.3 + r)) {
            cones.push((x, y, h, r));
        }
    }
    let n = (extent / resolution).round() as usize;
    let geom = GridGeometry::new(n, n, 0.0, 0.0, resolution)?;
    let mut chm = Grid::filled(geom, DEFAULT_NODATA, 0.0);
    for &(x, y, h, r) in &cones {
        let (c0, c1) = (((x - r) / resolution).floor().max(0.0) as usize, (((x + r) / resolution).ceil() as usize).min(n - 1));
        let (yr0, yr1) = (((y - r) / resolution).floor().max(0.0) as usize, (((y + r) / resolution).ceil() as usize).min(n - 1));
        for row_from_bottom in yr0..=yr1 {
            let row = n - 1 - row_from_bottom;
            for col in c0..=c1 {
                let (cx, cy) = geom.cell_center(row, col);
                let d = (cx - x).hypot(cy - y);
                if d < r {
                    let v = h * (1.0 - d / r);
                    if v > chm.get(row, col) {
                        chm.set(row, col, v);
                    }
                }
            }
        }
    }
    Ok(ConeScene { chm, cones })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.synth.width = 60.0;
        cfg.synth.height = 60.0;
        cfg.synth.n_trees = 12;
        cfg.synth.n_plots = 2;
        cfg
    }

    #[test]
    fn single_noiseless_tree_has_exact_signature() {
        let mut cfg = small_config();
        cfg.synth.noise_sigma = 0.0;
        cfg.synth.trees = vec![SynthTree { x: 30.0, y: 30.0, height: 20.0, crown_radius: 3.0, species: "P_abies".into() }];
        let scene = generate_scene(&cfg).unwrap();
        let sig = &scene.signatures["P_abies"];
        let g = scene.cube.geometry;
        let (r, c) = g.cell_of(30.1, 30.1).unwrap();
        assert_eq!(&scene.cube.pixel(g.index(r, c)), sig);
        let (r, c) = g.cell_of(5.0, 5.0).unwrap();
        assert_eq!(scene.cube.pixel(g.index(r, c)), scene.background);
    }

    #[test]
    fn out_of_bounds_tree_is_rejected() {
        let mut cfg = small_config();
        cfg.synth.trees = vec![SynthTree { x: 59.0, y: 30.0, height: 20.0, crown_radius: 3.0, species: "P_abies".into() }];
        assert!(matches!(generate_scene(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn realized_density_matches_request() {
        let cfg = small_config();
        let scene = generate_scene(&cfg).unwrap();
        let density = scene.cloud.len() as f64 / (cfg.synth.width * cfg.synth.height);
        assert!((density / 10.0 - 1.0).abs() < 0.05, "{density}");
        let (minx, miny, maxx, maxy) = scene.cloud.bounds().unwrap();
        assert!(minx >= 0.0 && miny >= 0.0 && maxx < 60.0 && maxy < 60.0);
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = small_config();
        let (a, b) = (generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
        assert_eq!(a.trees, b.trees);
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.cube, b.cube);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(generate_scene(&other).unwrap().trees, a.trees);
    }

    #[test]
    fn trees_respect_spacing_and_signatures_separate() {
        let scene = generate_scene(&PipelineConfig::default()).unwrap();
        assert_eq!(scene.trees.len(), 200);
        for (i, a) in scene.trees.iter().enumerate() {
            for b in &scene.trees[i + 1..] {
                let d = (a.tree.x - b.tree.x).hypot(a.tree.y - b.tree.y);
                assert!(d >= a.tree.crown_radius + b.tree.crown_radius + 1.0 - 1e-9);
            }
        }
        assert!(scene.separation_sigma >= 5.0, "{}", scene.separation_sigma);
        assert_eq!(scene.plots.len(), 10);
    }

    #[test]
    fn written_scene_loads_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let scene = generate_scene(&cfg).unwrap();
        let path = write_scene(&scene, &cfg, dir.path()).unwrap();
        let loaded = PipelineConfig::load(&path).unwrap();
        loaded.resolve_inputs().unwrap();
        assert_eq!(loaded.synth, cfg.synth);
    }

    #[test]
    fn cone_scene_apexes_are_maxima() {
        let s = cone_scene(1, 20, 120.0, 0.5, 10.0, (4.0, 5.0), (10.0, 30.0)).unwrap();
        assert_eq!(s.cones.len(), 20);
        for &(x, y, h, _) in &s.cones {
            let v = s.chm.value_at(x, y).unwrap();
            assert!(v > 0.9 * h && v <= h);
        }
    }
}
