//! Pipeline configuration, read from a TOML file with one section per stage.
//!
//! Every section is optional; omitted fields take their defaults. Relative
//! input paths are resolved against the directory holding the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allometry::{DbhModel, SpeciesInfo, SpeciesRegistry, TariffModel};
use crate::chm::PitfreeParams;
use crate::classify::{ClassifierKind, SvmParams};
use crate::crowns::ItcParams;
use crate::error::{Error, Result};
use crate::spectral::Aggregation;
use crate::synth::SynthParams;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub dtm: Option<PathBuf>,
    pub points: Option<PathBuf>,
    pub cube_header: Option<PathBuf>,
    pub cube_data: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Plot centres with optional observed totals.
    pub plots: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    pub drop_head: usize,
    pub drop_tail: usize,
    /// Band indices (after trimming) never offered to band selection.
    pub exclude: Vec<usize>,
    pub k: usize,
    pub aggregation: Aggregation,
    /// Pixels under a CHM lower than this are not classified, m.
    pub mask_min_height: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            drop_head: 7,
            drop_tail: 8,
            exclude: Vec::new(),
            k: 35,
            aggregation: Aggregation::Mean,
            mask_min_height: 2.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Classifier whose labels feed the inventory.
    pub classifier: ClassifierKind,
    pub svm: SvmParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllometryConfig {
    pub dbh: DbhModel,
    /// Added to or replacing the built-in species table.
    pub species: BTreeMap<String, SpeciesInfo>,
    pub tariff: TariffModel,
}

impl AllometryConfig {
    pub fn registry(&self) -> SpeciesRegistry {
        let mut r = SpeciesRegistry::default();
        r.apply_overrides(&self.species);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.65 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub plot_radius: f64,
    pub dbh_min: f64,
    /// Also score individual pixels of the test crowns.
    pub pixel_level: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { plot_radius: 15.0, dbh_min: 7.5, pixel_level: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub inputs: InputPaths,
    pub chm: PitfreeParams,
    pub crowns: ItcParams,
    pub spectral: SpectralConfig,
    pub classify: ClassifyConfig,
    pub allometry: AllometryConfig,
    pub split: SplitConfig,
    pub evaluate: EvaluateConfig,
    pub synth: SynthParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("output"),
            inputs: InputPaths::default(),
            chm: PitfreeParams::default(),
            crowns: ItcParams::default(),
            spectral: SpectralConfig::default(),
            classify: ClassifyConfig::default(),
            allometry: AllometryConfig::default(),
            split: SplitConfig::default(),
            evaluate: EvaluateConfig::default(),
            synth: SynthParams::default(),
        }
    }
}

/// Input files after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedInputs {
    pub dtm: PathBuf,
    pub points: PathBuf,
    pub cube_header: PathBuf,
    pub cube_data: PathBuf,
    pub ground_truth: PathBuf,
    pub plots: Option<PathBuf>,
}

impl ResolvedInputs {
    pub fn all(&self) -> Vec<(&'static str, &Path)> {
        let mut v: Vec<(&'static str, &Path)> = vec![
            ("dtm", &self.dtm),
            ("points", &self.points),
            ("cube_header", &self.cube_header),
            ("cube_data", &self.cube_data),
            ("ground_truth", &self.ground_truth),
        ];
        if let Some(p) = &self.plots {
            v.push(("plots", p));
        }
        v
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Reads and parameter-validates a config; relative input paths and the
    /// output directory become relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        let i = &mut self.inputs;
        for p in [&mut i.dtm, &mut i.points, &mut i.cube_header, &mut i.cube_data, &mut i.ground_truth, &mut i.plots] {
            fix(p);
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    /// Checks every numeric parameter; does not touch the file system.
    pub fn validate(&self) -> Result<()> {
        self.chm.validate()?;
        self.crowns.validate()?;
        self.classify.svm.validate()?;
        self.allometry.dbh.validate()?;
        self.allometry.registry().validate()?;
        self.synth.validate()?;
        let s = &self.spectral;
        if s.k == 0 {
            return Err(Error::Config("spectral.k must be >= 1".into()));
        }
        if !(s.mask_min_height >= 0.0) {
            return Err(Error::Config("spectral.mask_min_height must be >= 0".into()));
        }
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("split.train_fraction must lie in (0, 1), got {f}")));
        }
        let e = &self.evaluate;
        if !(e.plot_radius > 0.0 && e.dbh_min >= 0.0) {
            return Err(Error::Config("evaluate.plot_radius must be > 0 and dbh_min >= 0".into()));
        }
        Ok(())
    }

    /// Requires every pipeline input to be configured and present.
    pub fn resolve_inputs(&self) -> Result<ResolvedInputs> {
        let need = |name: &str, p: &Option<PathBuf>| -> Result<PathBuf> {
            let p = p.clone().ok_or_else(|| Error::Config(format!("inputs.{name} is not set")))?;
            if !p.is_file() {
                return Err(Error::Config(format!("inputs.{name}: {} does not exist", p.display())));
            }
            Ok(p)
        };
        let i = &self.inputs;
        let cube_header = need("cube_header", &i.cube_header)?;
        let cube_data = match &i.cube_data {
            Some(_) => need("cube_data", &i.cube_data)?,
            None => {
                let guess = cube_header.with_extension("bsq");
                if !guess.is_file() {
                    return Err(Error::Config(format!(
                        "inputs.cube_data is not set and {} does not exist",
                        guess.display()
                    )));
                }
                guess
            }
        };
        Ok(ResolvedInputs {
            dtm: need("dtm", &i.dtm)?,
            points: need("points", &i.points)?,
            cube_header,
            cube_data,
            ground_truth: need("ground_truth", &i.ground_truth)?,
            plots: match &i.plots {
                Some(_) => Some(need("plots", &i.plots)?),
                None => None,
            },
        })
    }
}
