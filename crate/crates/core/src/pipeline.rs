//! End-to-end orchestration: LiDAR to crowns, crowns to species, species to
//! plot inventory, with every intermediate artifact written to the output
//! directory and a manifest recording inputs, outputs and completeness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::allometry::enrich_crowns;
use crate::chm::{normalize_heights, pitfree_chm};
use crate::classify::{
    classify_image, format_model, label_crowns_majority, train_centroid, train_svm, Classifier, ClassifierKind,
    LabelMap, TrainedModel,
};
use crate::config::{PipelineConfig, ResolvedInputs};
use crate::crowns::{delineate, format_crown_table, spatial_join, split_train_test, CrownRecord, Segmentation};
use crate::error::{Error, Result};
use crate::evaluate::{
    aggregate_plot, format_accuracy_table, format_confusion_csv, format_metrics_csv, format_plot_comparison,
    format_plot_comparison_csv, pearson_r, read_plots, score, ConfusionMatrix, PlotComparison,
};
use crate::geodata::{
    format_ascii_grid, read_ascii_grid, read_envi_cube, read_ground_truth, read_point_cloud, Grid, HyperCube,
};
use crate::spectral::{
    crown_pixels, format_band_selection, format_stats_report, full_class_statistics, normalize_spectrum, sffs_select,
    trim_bands, BandSelection, SelectionOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Chm,
    Crowns,
    SelectBands,
    Train,
    Classify,
    Inventory,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Chm,
        Stage::Crowns,
        Stage::SelectBands,
        Stage::Train,
        Stage::Classify,
        Stage::Inventory,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Chm => "chm",
            Stage::Crowns => "crowns",
            Stage::SelectBands => "select-bands",
            Stage::Train => "train",
            Stage::Classify => "classify",
            Stage::Inventory => "inventory",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Serialize)]
struct FileEntry {
    name: String,
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct StageEntry {
    name: String,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct Manifest {
    complete: bool,
    last_stage: String,
    requested_stage: String,
    failed_stage: Option<String>,
    error: Option<String>,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    stages: Vec<StageEntry>,
    config: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory that remembers what it wrote.
struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = contents.as_ref();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.retain(|f| f.name != name);
        self.files.push(FileEntry {
            name: name.to_string(),
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }
}

/// Everything a run produced, for callers that want values rather than files.
#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub output_dir: PathBuf,
    pub last_stage: Option<Stage>,
    pub chm: Option<Grid>,
    pub segmentation: Option<Segmentation>,
    pub truth_labels: BTreeMap<u32, String>,
    pub train_crowns: Vec<u32>,
    pub test_crowns: Vec<u32>,
    pub band_selection: Option<BandSelection>,
    pub models: BTreeMap<&'static str, TrainedModel>,
    pub predicted: BTreeMap<&'static str, BTreeMap<u32, String>>,
    /// Enriched crowns (species from the configured classifier).
    pub crowns: Vec<CrownRecord>,
    pub confusion: BTreeMap<&'static str, ConfusionMatrix>,
    pub plots: Vec<PlotComparison>,
    pub r_volume: Option<f64>,
    pub r_agb: Option<f64>,
    /// Text of `report.txt`.
    pub summary: String,
}

impl PipelineReport {
    /// Crown-level accuracy of a classifier over the test crowns.
    pub fn crown_accuracy(&self, kind: &str) -> Option<f64> {
        self.confusion.get(kind)?.overall_accuracy()
    }
}

fn kind_name(k: ClassifierKind) -> &'static str {
    match k {
        ClassifierKind::Centroid => "centroid",
        ClassifierKind::Svm => "svm",
    }
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    inputs: ResolvedInputs,
    out: Outputs,
    timings: Vec<StageEntry>,
    report: PipelineReport,
    cube: Option<HyperCube>,
}

/// Runs every stage up to and including `until`.
pub fn run_pipeline(cfg: &PipelineConfig, until: Stage) -> Result<PipelineReport> {
    cfg.validate()?;
    let inputs = cfg.resolve_inputs()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let mut run = Run {
        cfg,
        inputs,
        out: Outputs { dir: cfg.output_dir.clone(), files: Vec::new() },
        timings: Vec::new(),
        report: PipelineReport { output_dir: cfg.output_dir.clone(), ..PipelineReport::default() },
        cube: None,
    };

    let mut failure: Option<(Stage, Error)> = None;
    for stage in Stage::ALL.into_iter().filter(|s| *s <= until) {
        let start = Instant::now();
        info!("stage {}", stage.name());
        let result = match stage {
            Stage::Chm => run.chm(),
            Stage::Crowns => run.crowns(),
            Stage::SelectBands => run.select_bands(),
            Stage::Train => run.train(),
            Stage::Classify => run.classify(),
            Stage::Inventory => run.inventory(),
            Stage::Evaluate => run.evaluate(),
        };
        run.timings.push(StageEntry { name: stage.name().into(), seconds: start.elapsed().as_secs_f64() });
        match result {
            Ok(()) => run.report.last_stage = Some(stage),
            Err(e) => {
                failure = Some((stage, e));
                break;
            }
        }
    }
    run.write_manifest(until, failure.as_ref())?;
    match failure {
        Some((stage, e)) => Err(Error::Stage { stage: stage.name().into(), source: Box::new(e) }),
        None => Ok(run.report),
    }
}

impl Run<'_> {
    fn chm(&mut self) -> Result<()> {
        let dtm = read_ascii_grid(&self.inputs.dtm)?;
        let cloud = read_point_cloud(&self.inputs.points)?;
        let normalized = normalize_heights(&cloud, &dtm)?;
        let chm = pitfree_chm(&normalized, &self.cfg.chm)?;
        self.out.write("chm.asc", format_ascii_grid(&chm))?;
        self.report.chm = Some(chm);
        Ok(())
    }

    fn crowns(&mut self) -> Result<()> {
        let chm = self.report.chm.as_ref().expect("chm stage ran");
        let seg = delineate(chm, &self.cfg.crowns)?;
        self.out.write("crowns.asc", format_ascii_grid(&seg.label_grid()))?;
        self.out.write("crowns.csv", format_crown_table(&seg.crowns))?;
        self.report.crowns = seg.crowns.clone();
        self.report.segmentation = Some(seg);
        Ok(())
    }

    fn select_bands(&mut self) -> Result<()> {
        let sp = &self.cfg.spectral;
        let raw = read_envi_cube(&self.inputs.cube_header, &self.inputs.cube_data)?;
        let trimmed = trim_bands(&raw, sp.drop_head, sp.drop_tail)?;
        let (cube, norm) = normalize_spectrum(&trimmed);

        let seg = self.report.segmentation.as_ref().expect("crowns stage ran");
        let truth = read_ground_truth(&self.inputs.ground_truth)?;
        let join = spatial_join(&truth, seg);
        if join.labels.is_empty() {
            return Err(Error::Data("no ground-truth point falls inside a delineated crown".into()));
        }
        let split = split_train_test(&join.labels, self.cfg.split.train_fraction, self.cfg.seed)?;
        let train = crown_pixels(&cube, seg, &join.labels, &split.train);
        let (stats, excluded) = full_class_statistics(&train);
        if stats.len() < 2 {
            return Err(Error::Data(format!("band selection needs two species with pixels, found {}", stats.len())));
        }
        let available = cube.nbands - sp.exclude.iter().filter(|b| **b < cube.nbands).count();
        let k = sp.k.min(available);
        if k < sp.k {
            warn!("spectral.k = {} exceeds the {available} candidate bands; selecting {k}", sp.k);
        }
        let options = SelectionOptions { aggregation: sp.aggregation, exclude: sp.exclude.clone() };
        let selection = sffs_select(&stats, k, &options)?;

        let mut split_csv = String::from("crown_id,species_code,role\n");
        for (role, ids) in [("train", &split.train), ("test", &split.test)] {
            for id in ids {
                let _ = writeln!(split_csv, "{id},{},{role}", join.labels[id]);
            }
        }
        let mut notes = format!(
            "ground_truth_points {}\nmatched_crowns {}\nunmatched_points {}\nconflicting_crowns {}\n",
            truth.len(),
            join.labels.len(),
            join.unmatched.len(),
            join.conflicts.len()
        );
        let _ = writeln!(notes, "zero_mean_pixels {}\nnodata_pixels {}", norm.zero_mean_pixels, norm.nodata_pixels);
        let _ = writeln!(notes, "bands_after_trim {}\nselected_bands {}", cube.nbands, selection.indices.len());
        if k < sp.k {
            let _ = writeln!(notes, "requested_k {} clamped to {k}", sp.k);
        }
        for s in &excluded {
            let _ = writeln!(notes, "species {s} excluded from statistics (fewer than 2 pixels)");
        }
        for s in &split.singletons {
            let _ = writeln!(notes, "species {s} has one crown; training only");
        }
        let marginals: Vec<_> = stats.iter().map(|s| s.marginal(&selection.indices)).collect();
        self.out.write("split.csv", split_csv)?;
        self.out.write("bands.csv", format_band_selection(&selection))?;
        self.out.write("class_stats.txt", format_stats_report(&marginals))?;
        self.out.write("selection_notes.txt", notes)?;

        self.report.truth_labels = join.labels;
        self.report.train_crowns = split.train;
        self.report.test_crowns = split.test;
        self.report.band_selection = Some(selection);
        self.cube = Some(cube);
        Ok(())
    }

    fn train(&mut self) -> Result<()> {
        let cube = self.cube.as_ref().expect("select-bands stage ran");
        let seg = self.report.segmentation.as_ref().expect("crowns stage ran");
        let bands = self.report.band_selection.as_ref().expect("bands selected").indices.clone();
        let pixels = crown_pixels(cube, seg, &self.report.truth_labels, &self.report.train_crowns).select(&bands);

        let centroid = TrainedModel { bands: bands.clone(), classifier: Classifier::Centroid(train_centroid(&pixels)?) };
        let svm_training = train_svm(&pixels, &self.cfg.classify.svm)?;
        let mut diag = String::from("positive,negative,iterations,converged,max_kkt_violation,dual_objective,duality_gap\n");
        for ((p, n), d) in &svm_training.diagnostics {
            let _ = writeln!(
                diag,
                "{p},{n},{},{},{:.6e},{:.9},{:.6e}",
                d.iterations, d.converged, d.max_kkt_violation, d.dual_objective, d.duality_gap
            );
        }
        let svm = TrainedModel { bands, classifier: Classifier::Svm(svm_training.model) };
        self.out.write("model_centroid.txt", format_model(&centroid))?;
        self.out.write("model_svm.txt", format_model(&svm))?;
        self.out.write("svm_diagnostics.csv", diag)?;
        self.report.models.insert("centroid", centroid);
        self.report.models.insert("svm", svm);
        Ok(())
    }

    fn classify(&mut self) -> Result<()> {
        let cube = self.cube.as_ref().expect("select-bands stage ran");
        let seg = self.report.segmentation.as_ref().expect("crowns stage ran");
        let chm = self.report.chm.as_ref().expect("chm stage ran");
        let min_h = self.cfg.spectral.mask_min_height;
        let mask = chm.map_valid(|h| if h >= min_h { 1.0 } else { 0.0 });

        let mut crown_labels = String::from("crown_id,classifier,species_code\n");
        let mut maps: BTreeMap<&'static str, LabelMap> = BTreeMap::new();
        for (kind, model) in &self.report.models {
            let map = classify_image(cube, model, Some(&mask))?;
            let labels = label_crowns_majority(&map, seg);
            for c in &seg.crowns {
                let _ = writeln!(
                    crown_labels,
                    "{},{kind},{}",
                    c.crown_id,
                    labels.labels.get(&c.crown_id).map_or("", String::as_str)
                );
            }
            self.out.write(&format!("species_map_{kind}.asc"), format_ascii_grid(&map.grid))?;
            self.out.write(&format!("species_legend_{kind}.csv"), map.format_legend())?;
            self.report.predicted.insert(kind, labels.labels);
            maps.insert(kind, map);
        }
        self.out.write("crown_labels.csv", crown_labels)?;

        if self.cfg.evaluate.pixel_level {
            for (kind, map) in &maps {
                let mut pairs: Vec<(String, Option<String>)> = Vec::new();
                for id in &self.report.test_crowns {
                    let Some(crown) = seg.crown(*id) else { continue };
                    let truth = &self.report.truth_labels[id];
                    for &(r, c) in &crown.cells {
                        let (x, y) = seg.geometry.cell_center(r, c);
                        pairs.push((truth.clone(), map.label_at(x, y).map(String::from)));
                    }
                }
                let cm = score(pairs.iter().map(|(t, p)| (Some(t.as_str()), p.as_deref())));
                self.out.write(&format!("metrics_pixels_{kind}.csv"), format_metrics_csv(kind, &cm))?;
            }
        }
        Ok(())
    }

    fn inventory(&mut self) -> Result<()> {
        let kind = kind_name(self.cfg.classify.classifier);
        let labels = &self.report.predicted[kind];
        let mut crowns = self.report.segmentation.as_ref().expect("crowns stage ran").crowns.clone();
        for c in &mut crowns {
            c.species_code = labels.get(&c.crown_id).cloned();
        }
        let registry = self.cfg.allometry.registry();
        let rep = enrich_crowns(&mut crowns, &registry, &self.cfg.allometry.dbh);
        let mut lines = format!("enriched {}\n", rep.enriched);
        for l in rep.lines() {
            let _ = writeln!(lines, "{l}");
        }
        self.out.write("crowns.csv", format_crown_table(&crowns))?;
        self.out.write("allometry_report.txt", lines)?;
        self.report.crowns = crowns;
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let mut summary = String::new();
        let _ = writeln!(summary, "Individual-tree inventory report\n");
        if let Some(seg) = &self.report.segmentation {
            let _ = writeln!(
                summary,
                "crowns delineated: {}\ncrowns with ground truth: {} (train {}, test {})",
                seg.crowns.len(),
                self.report.truth_labels.len(),
                self.report.train_crowns.len(),
                self.report.test_crowns.len()
            );
        }
        if let Some(sel) = &self.report.band_selection {
            let _ = writeln!(
                summary,
                "selected bands ({}): {:?}\nmean pairwise JM: {:.6}",
                sel.indices.len(),
                sel.indices,
                sel.criterion_value
            );
        }

        for (kind, predicted) in &self.report.predicted {
            let pairs = self
                .report
                .test_crowns
                .iter()
                .map(|id| (self.report.truth_labels.get(id).map(String::as_str), predicted.get(id).map(String::as_str)));
            let cm = score(pairs);
            self.out.write(&format!("metrics_{kind}.csv"), format_metrics_csv(kind, &cm))?;
            self.out.write(&format!("confusion_{kind}.csv"), format_confusion_csv(&cm))?;
            self.report.confusion.insert(kind, cm);
        }
        let tables: Vec<(&str, &ConfusionMatrix)> = self.report.confusion.iter().map(|(k, v)| (*k, v)).collect();
        let _ = writeln!(summary, "\nAccuracy over test crowns\n{}", format_accuracy_table(&tables));
        for (k, cm) in &self.report.confusion {
            if cm.excluded > 0 {
                let _ = writeln!(summary, "{k}: {} test crowns without a predicted label", cm.excluded);
            }
        }

        if let Some(path) = &self.inputs.plots {
            let ev = &self.cfg.evaluate;
            let plots = read_plots(path, ev.plot_radius, ev.dbh_min)?;
            let mut rows = Vec::with_capacity(plots.len());
            for p in &plots {
                let t = aggregate_plot(&self.report.crowns, &p.plot);
                rows.push(PlotComparison {
                    plot_id: p.plot.plot_id.clone(),
                    observed_volume: p.observed_volume_m3.unwrap_or(f64::NAN),
                    predicted_volume: t.volume_m3,
                    observed_agb: p.observed_agb_mg.unwrap_or(f64::NAN),
                    predicted_agb: t.agb_mg,
                });
            }
            self.out.write("plots.csv", format_plot_comparison_csv(&rows))?;
            let _ = writeln!(summary, "\nPlot comparison\n{}", format_plot_comparison(&rows));
            let observed: Vec<&PlotComparison> =
                rows.iter().filter(|r| r.observed_volume.is_finite() && r.observed_agb.is_finite()).collect();
            let corr = |f: fn(&PlotComparison) -> (f64, f64)| -> Option<f64> {
                let (o, p): (Vec<f64>, Vec<f64>) = observed.iter().map(|r| f(r)).unzip();
                pearson_r(&o, &p).ok()
            };
            self.report.r_volume = corr(|r| (r.observed_volume, r.predicted_volume));
            self.report.r_agb = corr(|r| (r.observed_agb, r.predicted_agb));
            let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                summary,
                "correlation R (volume): {}\ncorrelation R (AGB): {}",
                fmt(self.report.r_volume),
                fmt(self.report.r_agb)
            );
            self.report.plots = rows;
        }
        self.out.write("report.txt", &summary)?;
        self.report.summary = summary;
        Ok(())
    }

    fn write_manifest(&mut self, until: Stage, failure: Option<&(Stage, Error)>) -> Result<()> {
        let mut inputs = Vec::new();
        for (name, path) in self.inputs.all() {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            inputs.push(FileEntry { name: name.into(), path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        }
        let mut outputs = std::mem::take(&mut self.out.files);
        outputs.sort_by(|a, b| a.name.cmp(&b.name));
        let manifest = Manifest {
            complete: failure.is_none() && self.report.last_stage == Some(until),
            last_stage: self.report.last_stage.map_or("none", Stage::name).into(),
            requested_stage: until.name().into(),
            failed_stage: failure.map(|(s, _)| s.name().to_string()),
            error: failure.map(|(_, e)| e.to_string()),
            inputs,
            outputs,
            stages: std::mem::take(&mut self.timings),
            config: self.cfg.to_toml(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        let path = self.out.dir.join("manifest.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Resolves a path under the output directory.
pub fn artifact(cfg: &PipelineConfig, name: &str) -> PathBuf {
    Path::new(&cfg.output_dir).join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, write_scene};

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    fn small_scene(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.synth.width = 80.0;
        cfg.synth.height = 80.0;
        cfg.synth.n_trees = 40;
        cfg.synth.n_plots = 4;
        cfg.synth.species.truncate(3);
        cfg.spectral.k = 8;
        let scene = generate_scene(&cfg).unwrap();
        let path = write_scene(&scene, &cfg, dir).unwrap();
        PipelineConfig::load(path).unwrap()
    }

    #[test]
    fn partial_run_marks_manifest_incomplete_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_scene(dir.path());
        let rep = run_pipeline(&cfg, Stage::Crowns).unwrap();
        assert_eq!(rep.last_stage, Some(Stage::Crowns));
        let manifest = fs::read_to_string(artifact(&cfg, "manifest.toml")).unwrap();
        assert!(manifest.contains("last_stage = \"crowns\""));
        assert!(artifact(&cfg, "chm.asc").is_file());
        assert!(!artifact(&cfg, "report.txt").exists());
    }

    #[test]
    fn small_scene_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_scene(dir.path());
        let rep = run_pipeline(&cfg, Stage::Evaluate).unwrap();
        assert!(rep.crown_accuracy("svm").unwrap() >= 0.8, "{}", rep.summary);
        assert_eq!(rep.plots.len(), 4);
        let manifest = fs::read_to_string(artifact(&cfg, "manifest.toml")).unwrap();
        assert!(manifest.contains("complete = true"));
    }

    #[test]
    fn stage_failure_is_wrapped_and_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_scene(dir.path());
        fs::write(cfg.inputs.points.as_ref().unwrap(), "x,y,z\n1,2,oops\n").unwrap();
        let err = run_pipeline(&cfg, Stage::Evaluate).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage, .. } if stage == "chm"), "{err}");
        assert_eq!(err.exit_code(), 3);
        let manifest = fs::read_to_string(artifact(&cfg, "manifest.toml")).unwrap();
        assert!(manifest.contains("complete = false") && manifest.contains("failed_stage = \"chm\""));
    }
}
