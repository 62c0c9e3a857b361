//! Hyperspectral preparation and band selection.
//!
//! Bands are ranked by Gaussian class separability: the Jeffries–Matusita
//! distance between every pair of species, aggregated over pairs, searched
//! with sequential forward floating selection (SFFS).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::crowns::Segmentation;
use crate::error::{Error, Result};
use crate::geodata::HyperCube;

pub fn trim_bands(cube: &HyperCube, drop_head: usize, drop_tail: usize) -> Result<HyperCube> {
    if drop_head + drop_tail >= cube.nbands {
        return Err(Error::Data(format!(
            "dropping {drop_head} + {drop_tail} bands leaves nothing of {}",
            cube.nbands
        )));
    }
    let keep = drop_head..cube.nbands - drop_tail;
    let n = cube.npixels();
    let samples = cube.samples()[keep.start * n..keep.end * n].to_vec();
    let wavelengths = cube.wavelengths.as_ref().map(|w| w[keep.clone()].to_vec());
    HyperCube::new(cube.geometry, keep.len(), wavelengths, samples)
}

/// Divides a spectrum by its own mean. `None` for zero-mean or non-finite input.
pub fn normalize_pixel(spectrum: &[f64]) -> Option<Vec<f64>> {
    let mean = spectrum.iter().sum::<f64>() / spectrum.len() as f64;
    if mean == 0.0 || !mean.is_finite() {
        return None;
    }
    Some(spectrum.iter().map(|v| v / mean).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NormalizationReport {
    /// Pixels whose spectral mean was zero; they are set to nodata.
    pub zero_mean_pixels: usize,
    /// Pixels that were already nodata.
    pub nodata_pixels: usize,
}

/// Per-pixel normalization by the pixel's spectral mean.
pub fn normalize_spectrum(cube: &HyperCube) -> (HyperCube, NormalizationReport) {
    let n = cube.npixels();
    let mut samples = cube.samples().to_vec();
    let mut report = NormalizationReport::default();
    for p in 0..n {
        let spectrum = cube.pixel(p);
        if spectrum.iter().any(|v| v.is_nan()) {
            report.nodata_pixels += 1;
            for b in 0..cube.nbands {
                samples[b * n + p] = f64::NAN;
            }
            continue;
        }
        match normalize_pixel(&spectrum) {
            Some(norm) => {
                for (b, v) in norm.into_iter().enumerate() {
                    samples[b * n + p] = v;
                }
            }
            None => {
                report.zero_mean_pixels += 1;
                for b in 0..cube.nbands {
                    samples[b * n + p] = f64::NAN;
                }
            }
        }
    }
    let out = HyperCube::new(cube.geometry, cube.nbands, cube.wavelengths.clone(), samples)
        .expect("same shape as the input cube");
    (out, report)
}

/// Pixel spectra with their species labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPixels {
    pub labels: Vec<String>,
    pub features: Vec<Vec<f64>>,
}

impl LabeledPixels {
    pub fn push(&mut self, label: impl Into<String>, features: Vec<f64>) {
        self.labels.push(label.into());
        self.features.push(features);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn species(&self) -> Vec<String> {
        let mut s: Vec<String> = self.labels.clone();
        s.sort();
        s.dedup();
        s
    }

    pub fn counts(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for l in &self.labels {
            *m.entry(l.as_str()).or_insert(0) += 1;
        }
        m
    }

    /// Features restricted to `bands`.
    pub fn select(&self, bands: &[usize]) -> LabeledPixels {
        LabeledPixels {
            labels: self.labels.clone(),
            features: self
                .features
                .iter()
                .map(|f| bands.iter().map(|&b| f[b]).collect())
                .collect(),
        }
    }
}

/// Cube spectra under the cells of the given labeled crowns. Crown cells are
/// mapped to cube pixels through their map coordinates; nodata pixels are skipped.
pub fn crown_pixels(cube: &HyperCube, seg: &Segmentation, labels: &BTreeMap<u32, String>, crown_ids: &[u32]) -> LabeledPixels {
    let mut out = LabeledPixels::default();
    for id in crown_ids {
        let (Some(crown), Some(species)) = (seg.crown(*id), labels.get(id)) else {
            continue;
        };
        let mut used = Vec::new();
        for &(r, c) in &crown.cells {
            let (x, y) = seg.geometry.cell_center(r, c);
            let Some((pr, pc)) = cube.geometry.cell_of(x, y) else { continue };
            let pixel = cube.geometry.index(pr, pc);
            // A coarse cube can put several crown cells on one pixel.
            if used.contains(&pixel) || cube.pixel_is_nodata(pixel) {
                continue;
            }
            used.push(pixel);
            out.push(species.clone(), cube.pixel(pixel));
        }
    }
    out
}

/// Ridge added to a covariance of dimension `dim` and the given trace.
pub fn ridge(trace: f64, dim: usize) -> f64 {
    (1e-6 * trace / dim as f64).max(1e-9)
}

/// Unregularized per-species moments over every band.
#[derive(Debug, Clone, PartialEq)]
pub struct FullClassStats {
    pub species_code: String,
    pub n_samples: usize,
    pub mean: DVector<f64>,
    /// Unbiased (n - 1) sample covariance.
    pub covariance: DMatrix<f64>,
}

impl FullClassStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Regularized statistics of the marginal over `bands`.
    pub fn marginal(&self, bands: &[usize]) -> GaussianClassStats {
        let d = bands.len();
        let mean = DVector::from_iterator(d, bands.iter().map(|&b| self.mean[b]));
        let mut cov = DMatrix::from_fn(d, d, |i, j| self.covariance[(bands[i], bands[j])]);
        let eps = ridge(cov.trace(), d);
        for i in 0..d {
            cov[(i, i)] += eps;
        }
        GaussianClassStats {
            species_code: self.species_code.clone(),
            n_samples: self.n_samples,
            bands: bands.to_vec(),
            mean,
            covariance: cov,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClassStats {
    pub species_code: String,
    pub n_samples: usize,
    pub bands: Vec<usize>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Per-species moments over all bands. Species with fewer than 2 pixels are
/// dropped with a warning and listed in the second return value.
pub fn full_class_statistics(pixels: &LabeledPixels) -> (Vec<FullClassStats>, Vec<String>) {
    let mut groups: BTreeMap<&str, Vec<&Vec<f64>>> = BTreeMap::new();
    for (l, f) in pixels.labels.iter().zip(&pixels.features) {
        groups.entry(l.as_str()).or_default().push(f);
    }
    let mut stats = Vec::new();
    let mut excluded = Vec::new();
    for (species, rows) in groups {
        let n = rows.len();
        if n < 2 {
            warn!("species {species} has {n} labeled pixel(s); excluded from statistics");
            excluded.push(species.to_string());
            continue;
        }
        let d = rows[0].len();
        let mut mean = DVector::zeros(d);
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        let mut centered = DVector::zeros(d);
        for r in &rows {
            for i in 0..d {
                centered[i] = r[i] - mean[i];
            }
            cov.ger(1.0, &centered, &centered, 1.0);
        }
        cov /= (n - 1) as f64;
        stats.push(FullClassStats {
            species_code: species.to_string(),
            n_samples: n,
            mean,
            covariance: cov,
        });
    }
    (stats, excluded)
}

/// Regularized per-species statistics over `bands`.
pub fn class_statistics(pixels: &LabeledPixels, bands: &[usize]) -> Vec<GaussianClassStats> {
    full_class_statistics(pixels).0.iter().map(|s| s.marginal(bands)).collect()
}

fn log_det_cholesky(m: &DMatrix<f64>) -> Result<(f64, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    let ld = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok((ld, chol))
}

/// Bhattacharyya distance between two Gaussian classes.
pub fn bhattacharyya(a: &GaussianClassStats, b: &GaussianClassStats) -> Result<f64> {
    let (la, _) = log_det_cholesky(&a.covariance)?;
    let (lb, _) = log_det_cholesky(&b.covariance)?;
    bhattacharyya_with(a, b, la, lb)
}

fn bhattacharyya_with(a: &GaussianClassStats, b: &GaussianClassStats, log_det_a: f64, log_det_b: f64) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Data("class statistics differ in dimension".into()));
    }
    let mid = (&a.covariance + &b.covariance) * 0.5;
    let (lm, chol) = log_det_cholesky(&mid)?;
    let diff = &a.mean - &b.mean;
    let solved = chol.solve(&diff);
    let mahalanobis = diff.dot(&solved);
    let value = mahalanobis / 8.0 + 0.5 * (lm - 0.5 * (log_det_a + log_det_b));
    if !value.is_finite() {
        return Err(Error::Numerical("Bhattacharyya distance is not finite".into()));
    }
    Ok(value.max(0.0))
}

/// Jeffries–Matusita distance, in [0, 2].
pub fn jm_distance(a: &GaussianClassStats, b: &GaussianClassStats) -> Result<f64> {
    Ok(jm_from_bhattacharyya(bhattacharyya(a, b)?))
}

#[inline]
pub fn jm_from_bhattacharyya(b: f64) -> f64 {
    (2.0 * (1.0 - (-b).exp())).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

/// Pairwise JM over all species, aggregated, on the marginal over `bands`.
pub fn separability(stats: &[FullClassStats], bands: &[usize], aggregation: Aggregation) -> Result<f64> {
    if stats.len() < 2 {
        return Err(Error::Data("separability needs at least two species".into()));
    }
    if bands.is_empty() {
        return Ok(0.0);
    }
    let marginals: Vec<GaussianClassStats> = stats.iter().map(|s| s.marginal(bands)).collect();
    let log_dets = marginals
        .iter()
        .map(|m| log_det_cholesky(&m.covariance).map(|(ld, _)| ld))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut pairs = 0usize;
    for i in 0..marginals.len() {
        for j in i + 1..marginals.len() {
            let jm = jm_from_bhattacharyya(bhattacharyya_with(&marginals[i], &marginals[j], log_dets[i], log_dets[j])?);
            sum += jm;
            min = min.min(jm);
            pairs += 1;
        }
    }
    Ok(match aggregation {
        Aggregation::Mean => sum / pairs as f64,
        Aggregation::Min => min,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSelection {
    /// Ascending band indices into the trimmed cube.
    pub indices: Vec<usize>,
    pub criterion_value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionOptions {
    pub aggregation: Aggregation,
    /// Bands never offered to the search.
    pub exclude: Vec<usize>,
}

fn candidates(nbands: usize, options: &SelectionOptions, k: usize, nspecies: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("band selection target k must be >= 1".into()));
    }
    if nspecies < 2 {
        return Err(Error::Data("band selection needs at least two species".into()));
    }
    let pool: Vec<usize> = (0..nbands).filter(|b| !options.exclude.contains(b)).collect();
    if k > pool.len() {
        return Err(Error::Config(format!("k = {k} exceeds the {} available bands", pool.len())));
    }
    Ok(pool)
}

/// Best single addition to `current`; lowest band index wins ties.
fn best_addition(
    stats: &[FullClassStats],
    pool: &[usize],
    current: &[usize],
    aggregation: Aggregation,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    let mut trial = current.to_vec();
    for &b in pool.iter().filter(|b| !current.contains(b)) {
        trial.push(b);
        let score = separability(stats, &trial, aggregation)?;
        trial.pop();
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((b, score));
        }
    }
    best.ok_or_else(|| Error::Data("no band left to add".into()))
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Plain sequential forward selection; returns the subset at every size 1..=k.
pub fn sfs_path(stats: &[FullClassStats], k: usize, options: &SelectionOptions) -> Result<Vec<BandSelection>> {
    let nbands = stats.first().map_or(0, FullClassStats::dim);
    let pool = candidates(nbands, options, k, stats.len())?;
    let mut current = Vec::with_capacity(k);
    let mut path = Vec::with_capacity(k);
    while current.len() < k {
        let (b, score) = best_addition(stats, &pool, &current, options.aggregation)?;
        current.push(b);
        path.push(BandSelection {
            indices: sorted(current.clone()),
            criterion_value: score,
        });
    }
    Ok(path)
}

pub fn sfs_select(stats: &[FullClassStats], k: usize, options: &SelectionOptions) -> Result<BandSelection> {
    Ok(sfs_path(stats, k, options)?.pop().expect("k >= 1"))
}

/// Sequential forward floating selection of `k` bands.
///
/// Each forward step adds the best band; backward steps then drop bands
/// while that beats the best subset recorded at the smaller size. The
/// per-size records start from the plain forward trajectory, so the result
/// never scores below plain forward selection.
pub fn sffs_select(stats: &[FullClassStats], k: usize, options: &SelectionOptions) -> Result<BandSelection> {
    let nbands = stats.first().map_or(0, FullClassStats::dim);
    let pool = candidates(nbands, options, k, stats.len())?;
    let agg = options.aggregation;
    if k == pool.len() {
        return Ok(BandSelection {
            criterion_value: separability(stats, &pool, agg)?,
            indices: pool,
        });
    }

    // best[s] = best subset of size s seen so far.
    let mut best: Vec<Option<(f64, Vec<usize>)>> = vec![None; k + 1];
    for sel in sfs_path(stats, k, options)? {
        let size = sel.indices.len();
        best[size] = Some((sel.criterion_value, sel.indices));
    }
    let beats = |score: f64, rec: &Option<(f64, Vec<usize>)>| rec.as_ref().is_none_or(|(s, _)| score > *s);

    let mut current: Vec<usize> = Vec::new();
    let mut guard = 0usize;
    while current.len() < k {
        guard += 1;
        if guard > 100 * k * pool.len() + 1000 {
            return Err(Error::Numerical("SFFS did not terminate".into()));
        }
        let (b, score) = best_addition(stats, &pool, &current, agg)?;
        current.push(b);
        current.sort_unstable();
        let size = current.len();
        if beats(score, &best[size]) {
            best[size] = Some((score, current.clone()));
        } else if let Some((s, set)) = &best[size] {
            if *s > score {
                current = set.clone();
            }
        }

        while current.len() > 2 {
            let mut drop: Option<(usize, f64)> = None;
            for (pos, _) in current.iter().enumerate() {
                let mut trial = current.clone();
                trial.remove(pos);
                let s = separability(stats, &trial, agg)?;
                if drop.is_none_or(|(_, d)| s > d) {
                    drop = Some((pos, s));
                }
            }
            let (pos, s) = drop.expect("current has more than two bands");
            if beats(s, &best[current.len() - 1]) {
                current.remove(pos);
                best[current.len()] = Some((s, current.clone()));
            } else {
                break;
            }
        }
    }
    let (criterion_value, indices) = best[k].clone().expect("size k was reached");
    Ok(BandSelection { indices, criterion_value })
}

pub fn format_band_selection(sel: &BandSelection) -> String {
    let mut out = format!("criterion_value,{}\nband_index\n", sel.criterion_value);
    for b in &sel.indices {
        let _ = writeln!(out, "{b}");
    }
    out
}

pub fn parse_band_selection(text: &str, origin: &Path) -> Result<BandSelection> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let criterion_value = match lines.next() {
        Some((i, l)) => l
            .strip_prefix("criterion_value,")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::parse(origin, i + 1, "expected criterion_value,<number>"))?,
        None => return Err(Error::parse(origin, 1, "empty band selection")),
    };
    match lines.next() {
        Some((_, l)) if l.trim() == "band_index" => {}
        Some((i, _)) => return Err(Error::parse(origin, i + 1, "expected band_index header")),
        None => return Err(Error::parse(origin, 2, "missing band_index header")),
    }
    let mut indices = Vec::new();
    for (i, l) in lines {
        indices.push(
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(origin, i + 1, format!("invalid band index {l:?}")))?,
        );
    }
    Ok(BandSelection { indices, criterion_value })
}

pub fn write_band_selection(sel: &BandSelection, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_band_selection(sel)).map_err(|e| Error::io(path, e))
}

pub fn read_band_selection(path: impl AsRef<Path>) -> Result<BandSelection> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_band_selection(&text, path)
}

/// Human-readable dump of class statistics over a band subset.
pub fn format_stats_report(stats: &[GaussianClassStats]) -> String {
    let mut out = String::new();
    for s in stats {
        let _ = writeln!(out, "species {} n={} bands={:?}", s.species_code, s.n_samples, s.bands);
        let mean: Vec<String> = s.mean.iter().map(|v| format!("{v:.9}")).collect();
        let _ = writeln!(out, "  mean {}", mean.join(" "));
        for r in 0..s.covariance.nrows() {
            let row: Vec<String> = s.covariance.row(r).iter().map(|v| format!("{v:.9e}")).collect();
            let _ = writeln!(out, "  cov {}", row.join(" "));
        }
    }
    for i in 0..stats.len() {
        for j in i + 1..stats.len() {
            let jm = jm_distance(&stats[i], &stats[j]).map_or_else(|e| e.to_string(), |v| format!("{v:.9}"));
            let _ = writeln!(out, "jm {} {} {jm}", stats[i].species_code, stats[j].species_code);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::GridGeometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn cube_with_bands(nbands: usize) -> HyperCube {
        let g = GridGeometry::new(2, 1, 0.0, 0.0, 1.0).unwrap();
        let samples = (0..nbands * 2).map(|i| i as f64 + 1.0).collect();
        let wl = (0..nbands).map(|b| 0.38 + 0.005 * b as f64).collect();
        HyperCube::new(g, nbands, Some(wl), samples).unwrap()
    }

    #[test]
    fn trimming_137_bands_leaves_122() {
        let t = trim_bands(&cube_with_bands(137), 7, 8).unwrap();
        assert_eq!(t.nbands, 122);
        assert_eq!(t.wavelengths.as_ref().unwrap().len(), 122);
        assert_eq!(t.sample(0, 0), 15.0);
    }

    #[test]
    fn trimming_nothing_is_identity_and_overdrop_errors() {
        let c = cube_with_bands(10);
        assert_eq!(trim_bands(&c, 0, 0).unwrap(), c);
        assert!(trim_bands(&c, 6, 5).is_err());
        assert!(trim_bands(&c, 5, 5).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_pixel(&[2.0, 4.0, 6.0]).unwrap(), vec![0.5, 1.0, 1.5]);
        assert!(normalize_pixel(&[3.3, 3.3, 3.3]).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(normalize_pixel(&[1.0, -1.0]).is_none());
    }

    #[test]
    fn normalize_flags_zero_mean_pixels() {
        let g = GridGeometry::new(2, 1, 0.0, 0.0, 1.0).unwrap();
        // band-major: band0 = [1, 0], band1 = [3, 0]
        let cube = HyperCube::new(g, 2, None, vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        let (n, report) = normalize_spectrum(&cube);
        assert_eq!(report.zero_mean_pixels, 1);
        assert_eq!(n.pixel(0), vec![0.5, 1.5]);
        assert!(n.pixel_is_nodata(1));
    }

    #[test]
    fn covariance_hand_example() {
        let mut px = LabeledPixels::default();
        px.push("A", vec![0.0, 0.0]);
        px.push("A", vec![2.0, 2.0]);
        let s = &class_statistics(&px, &[0, 1])[0];
        assert_eq!(s.mean.as_slice(), &[1.0, 1.0]);
        let eps = 1e-6 * 4.0 / 2.0;
        assert!((s.covariance[(0, 0)] - (2.0 + eps)).abs() < 1e-15);
        assert!((s.covariance[(0, 1)] - 2.0).abs() < 1e-15);
        assert!((s.covariance[(1, 1)] - (2.0 + eps)).abs() < 1e-15);
    }

    #[test]
    fn constant_samples_regularize_to_floor() {
        let mut px = LabeledPixels::default();
        for _ in 0..4 {
            px.push("A", vec![5.0, 5.0]);
        }
        let s = &class_statistics(&px, &[0, 1])[0];
        assert_eq!(s.covariance, DMatrix::identity(2, 2) * 1e-9);
    }

    #[test]
    fn single_band_marginal_matches_1d_moments() {
        let mut px = LabeledPixels::default();
        let vals = [(1.0, 9.0), (2.0, 7.0), (4.0, 8.0), (7.0, 1.0)];
        for (a, b) in vals {
            px.push("A", vec![a, b]);
        }
        let s = &class_statistics(&px, &[1])[0];
        let m = vals.iter().map(|v| v.1).sum::<f64>() / 4.0;
        let var = vals.iter().map(|v| (v.1 - m).powi(2)).sum::<f64>() / 3.0;
        assert!((s.mean[0] - m).abs() < 1e-12);
        assert!((s.covariance[(0, 0)] - var * (1.0 + 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn undersized_species_are_excluded() {
        let mut px = LabeledPixels::default();
        px.push("A", vec![1.0]);
        px.push("B", vec![1.0]);
        px.push("B", vec![2.0]);
        let (stats, excluded) = full_class_statistics(&px);
        assert_eq!(stats.len(), 1);
        assert_eq!(excluded, vec!["A".to_string()]);
    }

    fn gauss(mean: &[f64], cov: DMatrix<f64>) -> GaussianClassStats {
        GaussianClassStats {
            species_code: "X".into(),
            n_samples: 10,
            bands: (0..mean.len()).collect(),
            mean: DVector::from_row_slice(mean),
            covariance: cov,
        }
    }

    #[test]
    fn jm_closed_form() {
        let a = gauss(&[0.0, 0.0], DMatrix::identity(2, 2));
        let b = gauss(&[2.0, 0.0], DMatrix::identity(2, 2));
        assert!((bhattacharyya(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        let expected = 2.0 * (1.0 - (-0.5f64).exp());
        assert!((jm_distance(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.78694).abs() < 1e-5);
        assert_eq!(jm_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn jm_saturates_with_separation() {
        let a = gauss(&[0.0], DMatrix::identity(1, 1));
        let mut last = 0.0;
        for d in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let jm = jm_distance(&a, &gauss(&[d], DMatrix::identity(1, 1))).unwrap();
            assert!(jm > last && jm <= 2.0);
            last = jm;
        }
        assert!(last > 1.99);
    }

    #[test]
    fn jm_rejects_dimension_mismatch() {
        let a = gauss(&[0.0], DMatrix::identity(1, 1));
        let b = gauss(&[0.0, 1.0], DMatrix::identity(2, 2));
        assert!(jm_distance(&a, &b).is_err());
    }

    /// Classes separated only in `informative` bands, Gaussian noise elsewhere.
    pub(crate) fn planted_problem(seed: u64, nbands: usize, informative: &[usize], nclasses: usize) -> Vec<FullClassStats> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut px = LabeledPixels::default();
        for c in 0..nclasses {
            let offsets: Vec<f64> = (0..nbands)
                .map(|b| if informative.contains(&b) { rng.random_range(-3.0..3.0) } else { 0.0 })
                .collect();
            for _ in 0..60 {
                let f = (0..nbands).map(|b| offsets[b] + noise.sample(&mut rng)).collect();
                px.push(format!("c{c}"), f);
            }
        }
        full_class_statistics(&px).0
    }

    fn exhaustive(stats: &[FullClassStats], nbands: usize, k: usize) -> (f64, Vec<usize>) {
        fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for b in start..n {
                cur.push(b);
                rec(b + 1, n, k, cur, out);
                cur.pop();
            }
        }
        let mut subsets = Vec::new();
        rec(0, nbands, k, &mut Vec::new(), &mut subsets);
        subsets
            .into_iter()
            .map(|s| (separability(stats, &s, Aggregation::Mean).unwrap(), s))
            .fold((f64::MIN, Vec::new()), |best, cur| if cur.0 > best.0 { cur } else { best })
    }

    #[test]
    fn sffs_finds_planted_bands() {
        let informative = [1, 4, 8];
        let stats = planted_problem(3, 10, &informative, 3);
        let sel = sffs_select(&stats, 3, &SelectionOptions::default()).unwrap();
        assert_eq!(sel.indices, informative.to_vec());
        let (best, subset) = exhaustive(&stats, 10, 3);
        assert_eq!(subset, sel.indices);
        assert!((best - sel.criterion_value).abs() < 1e-12);
    }

    #[test]
    fn sffs_full_set_and_errors() {
        let stats = planted_problem(5, 4, &[0], 2);
        let all = sffs_select(&stats, 4, &SelectionOptions::default()).unwrap();
        assert_eq!(all.indices, vec![0, 1, 2, 3]);
        let direct = separability(&stats, &[0, 1, 2, 3], Aggregation::Mean).unwrap();
        assert_eq!(all.criterion_value, direct);
        assert!(sffs_select(&stats, 0, &SelectionOptions::default()).is_err());
        assert!(sffs_select(&stats[..1], 1, &SelectionOptions::default()).is_err());
        assert!(sffs_select(&stats, 5, &SelectionOptions::default()).is_err());
    }

    #[test]
    fn excluded_bands_are_never_selected() {
        let stats = planted_problem(9, 8, &[2, 5], 3);
        let opts = SelectionOptions { exclude: vec![2], ..Default::default() };
        let sel = sffs_select(&stats, 2, &opts).unwrap();
        assert!(!sel.indices.contains(&2));
        assert!(sel.indices.contains(&5));
    }

    #[test]
    fn min_aggregation_is_not_above_mean() {
        let stats = planted_problem(11, 6, &[0, 3], 4);
        let mean = separability(&stats, &[0, 3], Aggregation::Mean).unwrap();
        let min = separability(&stats, &[0, 3], Aggregation::Min).unwrap();
        assert!(min <= mean);
    }

    #[test]
    fn band_selection_text_round_trip() {
        let sel = BandSelection { indices: vec![3, 7, 19], criterion_value: 1.234567891234 };
        let back = parse_band_selection(&format_band_selection(&sel), Path::new("b.csv")).unwrap();
        assert_eq!(back, sel);
        assert!(parse_band_selection("criterion_value,x\n", Path::new("b.csv")).is_err());
    }

    fn random_spd(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.05
    }

    proptest! {
        #[test]
        fn jm_symmetric_and_bounded(seed in 0u64..10_000, d in 1usize..5) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ma: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mb: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = gauss(&ma, random_spd(&mut rng, d));
            let b = gauss(&mb, random_spd(&mut rng, d));
            let ab = jm_distance(&a, &b).unwrap();
            let ba = jm_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&ab));
            prop_assert!(jm_distance(&a, &a).unwrap().abs() < 1e-12);
        }

        #[test]
        fn jm_invariant_under_common_linear_map(seed in 0u64..10_000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let mut px = LabeledPixels::default();
            for (label, shift) in [("A", 0.0), ("B", 1.5)] {
                for _ in 0..40 {
                    px.push(label, vec![shift + noise.sample(&mut rng), 2.0 * noise.sample(&mut rng), noise.sample(&mut rng) - shift]);
                }
            }
            let t: DMatrix<f64> = DMatrix::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.0 } + rng.random_range(-0.5..0.5));
            prop_assume!(t.determinant().abs() > 0.1);
            let mut moved = LabeledPixels::default();
            for (l, f) in px.labels.iter().zip(&px.features) {
                let v = &t * DVector::from_row_slice(f);
                moved.push(l.clone(), v.iter().copied().collect());
            }
            // Compare on raw moments so the ridge does not enter.
            let raw = |p: &LabeledPixels| -> Vec<GaussianClassStats> {
                full_class_statistics(p).0.into_iter().map(|s| GaussianClassStats {
                    species_code: s.species_code, n_samples: s.n_samples, bands: vec![0, 1, 2],
                    mean: s.mean, covariance: s.covariance,
                }).collect()
            };
            let (a, b) = (raw(&px), raw(&moved));
            let before = jm_distance(&a[0], &a[1]).unwrap();
            let after = jm_distance(&b[0], &b[1]).unwrap();
            prop_assert!((before - after).abs() < 1e-8, "{} vs {}", before, after);
        }

        #[test]
        fn normalization_is_idempotent(spec in proptest::collection::vec(0.01f64..10.0, 2..40)) {
            let once = normalize_pixel(&spec).unwrap();
            let twice = normalize_pixel(&once).unwrap();
            let mean = once.iter().sum::<f64>() / once.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn normalization_is_scale_invariant(spec in proptest::collection::vec(0.01f64..10.0, 2..40), k in 0.001f64..1000.0) {
            let a = normalize_pixel(&spec).unwrap();
            let scaled: Vec<f64> = spec.iter().map(|v| v * k).collect();
            let b = normalize_pixel(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn sffs_never_below_sfs(seed in 0u64..10_000, k in 1usize..5) {
            let stats = planted_problem(seed, 8, &[1, 6], 3);
            let opts = SelectionOptions::default();
            let a = sffs_select(&stats, k, &opts).unwrap();
            let b = sfs_select(&stats, k, &opts).unwrap();
            prop_assert!(a.criterion_value >= b.criterion_value);
            prop_assert_eq!(a.indices.len(), k);
            prop_assert_eq!(a.clone(), sffs_select(&stats, k, &opts).unwrap());
        }
    }
}
