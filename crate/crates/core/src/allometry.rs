//! Tree-level allometry: DBH from crown geometry, above-ground biomass and
//! stem volume.
//!
//! Units: height and crown diameter in m, DBH in cm, AGB in kg, volume in m³.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::crowns::CrownRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionalGroup {
    Gymnosperm,
    Angiosperm,
}

impl FunctionalGroup {
    /// `(alpha_g, beta_g)` offsets of the crown-geometry biomass model.
    pub fn agb_offsets(self) -> (f64, f64) {
        match self {
            FunctionalGroup::Gymnosperm => (0.093, -0.223),
            FunctionalGroup::Angiosperm => (0.0, 0.0),
        }
    }
}

/// Double-entry volume parameters: V = a (d - d0)^b h^c.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d0: f64,
}

impl VolumeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a > 0.0 && self.b > 0.0 && self.c > 0.0 && self.d0 >= 0.0;
        if ok && [self.a, self.b, self.c, self.d0].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid volume parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesInfo {
    pub common_name: String,
    pub latin_name: String,
    pub group: FunctionalGroup,
    #[serde(default)]
    pub volume: Option<VolumeParams>,
    /// Species whose volume parameters are borrowed when `volume` is absent.
    #[serde(default)]
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeciesRegistry {
    pub species: BTreeMap<String, SpeciesInfo>,
}

const CONIFER_FALLBACK: &str = "P_abies";
const BROADLEAF_FALLBACK: &str = "F_sylvatica";

impl Default for SpeciesRegistry {
    fn default() -> Self {
        use FunctionalGroup::{Angiosperm as A, Gymnosperm as G};
        let vp = |a, b, c, d0| Some(VolumeParams { a, b, c, d0 });
        let rows: [(&str, &str, &str, FunctionalGroup, Option<VolumeParams>); 16] = [
            ("P_abies", "Norway spruce", "Picea abies", G, vp(0.000177, 1.564254, 1.051565, 3.694650)),
            ("A_alba", "Silver fir", "Abies alba", G, vp(0.000163, 1.706560, 0.941905, 3.694650)),
            ("L_decidua", "Larch", "Larix decidua", G, vp(0.000108, 1.407756, 1.341377, 3.694650)),
            ("F_sylvatica", "Beech", "Fagus sylvatica", A, vp(0.000055, 1.942089, 1.006420, 4.009100)),
            ("P_sylvestris", "Scots pine", "Pinus sylvestris", G, vp(0.000102, 1.918184, 0.830164, 3.694650)),
            ("P_cembra", "Swiss stone pine", "Pinus cembra", G, vp(0.000188, 1.613713, 0.985266, 3.694650)),
            ("P_nigra", "Black pine", "Pinus nigra", G, vp(0.000129, 1.763086, 0.938445, 3.694650)),
            ("Q_pubescens", "Downy oak", "Quercus pubescens", A, None),
            ("O_carpinifolia", "Hop-hornbeam", "Ostrya carpinifolia", A, None),
            ("F_ornus", "Manna ash", "Fraxinus ornus", A, None),
            ("F_excelsior", "European ash", "Fraxinus excelsior", A, None),
            ("A_pseudoplatanus", "Sycamore", "Acer pseudoplatanus", A, None),
            ("B_pendula", "Birch", "Betula pendula", A, None),
            ("Q_cerris", "Turkey oak", "Quercus cerris", A, None),
            ("other_conifers", "Other conifers", "Pinophyta", G, None),
            ("other_broadleaves", "Other broadleaves", "Magnoliophyta", A, None),
        ];
        let species = rows
            .into_iter()
            .map(|(code, common, latin, group, volume)| {
                let fallback = volume.is_none().then(|| {
                    match group {
                        G => CONIFER_FALLBACK,
                        A => BROADLEAF_FALLBACK,
                    }
                    .to_string()
                });
                (
                    code.to_string(),
                    SpeciesInfo {
                        common_name: common.into(),
                        latin_name: latin.into(),
                        group,
                        volume,
                        fallback,
                    },
                )
            })
            .collect();
        Self { species }
    }
}

impl SpeciesRegistry {
    /// Adds or replaces entries.
    pub fn apply_overrides(&mut self, overrides: &BTreeMap<String, SpeciesInfo>) {
        for (k, v) in overrides {
            self.species.insert(k.clone(), v.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (code, info) in &self.species {
            if let Some(v) = &info.volume {
                v.validate().map_err(|e| Error::Config(format!("species {code}: {e}")))?;
            }
            if info.volume.is_none() && info.fallback.is_none() {
                return Err(Error::Config(format!("species {code} has neither volume parameters nor a fallback")));
            }
            if let Some(f) = &info.fallback {
                if !self.species.contains_key(f) {
                    return Err(Error::Config(format!("species {code} falls back to unknown {f}")));
                }
            }
            self.volume_params(code)?;
        }
        Ok(())
    }

    pub fn get(&self, code: &str) -> Option<&SpeciesInfo> {
        self.species.get(code)
    }

    /// Volume parameters for `code`, following fallbacks. Returns the code
    /// that actually supplied them.
    pub fn volume_params(&self, code: &str) -> Result<(&str, VolumeParams)> {
        let mut current = code;
        for _ in 0..=self.species.len() {
            let info = self
                .species
                .get_key_value(current)
                .ok_or_else(|| Error::Data(format!("unknown species {current}")))?;
            if let Some(v) = info.1.volume {
                return Ok((info.0.as_str(), v));
            }
            current = info
                .1
                .fallback
                .as_deref()
                .ok_or_else(|| Error::Data(format!("species {current} has no volume parameters")))?;
        }
        Err(Error::Config(format!("fallback cycle starting at {code}")))
    }
}

/// DBH = coeff_a (H CD)^coeff_b exp(sigma^2 / 2).
///
/// The defaults are external pan-European values, not fitted to this study
/// area; recalibrate against local stem measurements where available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbhModel {
    pub coeff_a: f64,
    pub coeff_b: f64,
    pub sigma: f64,
}

impl Default for DbhModel {
    fn default() -> Self {
        Self {
            coeff_a: 0.557,
            coeff_b: 0.809,
            sigma: 0.056,
        }
    }
}

impl DbhModel {
    pub fn validate(&self) -> Result<()> {
        if self.coeff_a > 0.0 && self.coeff_b > 0.0 && self.sigma >= 0.0 && self.coeff_a.is_finite() && self.coeff_b.is_finite() && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid DBH model {self:?}")))
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Data(format!("{name} must be > 0, got {v}")))
    }
}

pub fn estimate_dbh(height: f64, crown_diameter: f64, model: &DbhModel) -> Result<f64> {
    check_positive("height", height)?;
    check_positive("crown diameter", crown_diameter)?;
    Ok(model.coeff_a * (height * crown_diameter).powf(model.coeff_b) * (model.sigma * model.sigma / 2.0).exp())
}

/// Above-ground biomass (kg) from height and crown diameter.
pub fn agb_jucker(height: f64, crown_diameter: f64, group: FunctionalGroup) -> Result<f64> {
    check_positive("height", height)?;
    check_positive("crown diameter", crown_diameter)?;
    let (alpha, beta) = group.agb_offsets();
    Ok((0.016 + alpha) * (height * crown_diameter).powf(2.013 + beta) * (0.204f64 * 0.204 / 2.0).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeEstimate {
    pub volume: f64,
    /// DBH at or below the table threshold d0; volume is reported as zero.
    pub below_threshold: bool,
}

pub fn volume_double_entry(dbh: f64, height: f64, params: &VolumeParams) -> Result<VolumeEstimate> {
    check_positive("height", height)?;
    if !dbh.is_finite() {
        return Err(Error::Data(format!("invalid DBH {dbh}")));
    }
    if dbh <= params.d0 {
        return Ok(VolumeEstimate { volume: 0.0, below_threshold: true });
    }
    Ok(VolumeEstimate {
        volume: params.a * (dbh - params.d0).powf(params.b) * height.powf(params.c),
        below_threshold: false,
    })
}

/// Regional tariff: V = b0 + b1 G + b2 G Ps + b3 G Ps It + b4 G Ps Bd.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TariffModel {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    /// Stereometric potential index.
    pub ps: f64,
    /// Tariff index.
    pub it: f64,
    /// Barycentric dimensional index.
    pub bd: f64,
}

pub fn volume_tariff(basal_area: f64, m: &TariffModel) -> Result<f64> {
    if !(basal_area >= 0.0) {
        return Err(Error::Data(format!("basal area must be >= 0, got {basal_area}")));
    }
    let g = basal_area;
    Ok(m.b0 + m.b1 * g + m.b2 * g * m.ps + m.b3 * g * m.ps * m.it + m.b4 * g * m.ps * m.bd)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnrichReport {
    pub enriched: usize,
    pub unlabeled: Vec<u32>,
    /// `(crown, species, parameter species)` where parameters were borrowed.
    pub borrowed: Vec<(u32, String, String)>,
    pub below_threshold: Vec<u32>,
    pub skipped: Vec<(u32, String)>,
}

impl EnrichReport {
    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for id in &self.unlabeled {
            out.push(format!("crown {id}: no species label; allometry skipped"));
        }
        for (id, s, p) in &self.borrowed {
            out.push(format!("crown {id}: {s} uses volume parameters of {p}"));
        }
        for id in &self.below_threshold {
            out.push(format!("crown {id}: DBH at or below volume-table threshold; volume 0"));
        }
        for (id, why) in &self.skipped {
            out.push(format!("crown {id}: skipped ({why})"));
        }
        out
    }
}

/// Fills dbh, agb and volume for every labeled crown.
pub fn enrich_crowns(crowns: &mut [CrownRecord], registry: &SpeciesRegistry, dbh_model: &DbhModel) -> EnrichReport {
    let mut report = EnrichReport::default();
    for crown in crowns.iter_mut() {
        let Some(species) = crown.species_code.clone() else {
            report.unlabeled.push(crown.crown_id);
            continue;
        };
        let result = (|| -> Result<()> {
            let info = registry
                .get(&species)
                .ok_or_else(|| Error::Data(format!("unknown species {species}")))?;
            let (param_species, params) = registry.volume_params(&species)?;
            let dbh = estimate_dbh(crown.tree_height, crown.crown_diameter, dbh_model)?;
            let agb = agb_jucker(crown.tree_height, crown.crown_diameter, info.group)?;
            let vol = volume_double_entry(dbh, crown.tree_height, &params)?;
            if param_species != species {
                report.borrowed.push((crown.crown_id, species.clone(), param_species.to_string()));
                crown.parameter_species = Some(param_species.to_string());
            } else {
                crown.parameter_species = None;
            }
            if vol.below_threshold {
                report.below_threshold.push(crown.crown_id);
            }
            crown.dbh = Some(dbh);
            crown.agb = Some(agb);
            crown.volume = Some(vol.volume);
            Ok(())
        })();
        match result {
            Ok(()) => report.enriched += 1,
            Err(e) => {
                warn!("crown {}: {e}", crown.crown_id);
                report.skipped.push((crown.crown_id, e.to_string()));
            }
        }
    }
    report
}
