//! Accuracy metrics, fixed-radius plot aggregation and correlation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crowns::CrownRecord;
use crate::error::{Error, Result};

/// Rows are true labels, columns predicted labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub species: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Items dropped because one of their labels was missing.
    pub excluded: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.species.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn overall_accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| self.trace() as f64 / t as f64)
    }

    pub fn get(&self, truth: &str, predicted: &str) -> u64 {
        match (self.position(truth), self.position(predicted)) {
            (Some(i), Some(j)) => self.counts[i][j],
            _ => 0,
        }
    }

    fn position(&self, s: &str) -> Option<usize> {
        self.species.binary_search_by(|x| x.as_str().cmp(s)).ok()
    }
}

/// Builds a confusion matrix from `(truth, predicted)` pairs. Pairs with a
/// missing side are excluded and counted.
pub fn score<'a, I>(pairs: I) -> ConfusionMatrix
where
    I: IntoIterator<Item = (Option<&'a str>, Option<&'a str>)>,
{
    let mut kept = Vec::new();
    let mut excluded = 0;
    for (t, p) in pairs {
        match (t, p) {
            (Some(t), Some(p)) => kept.push((t, p)),
            _ => excluded += 1,
        }
    }
    let species: Vec<String> = kept
        .iter()
        .flat_map(|(t, p)| [*t, *p])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect();
    let mut cm = ConfusionMatrix {
        counts: vec![vec![0; species.len()]; species.len()],
        species,
        excluded,
    };
    for (t, p) in kept {
        let (i, j) = (cm.position(t).expect("listed"), cm.position(p).expect("listed"));
        cm.counts[i][j] += 1;
    }
    cm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    /// One-vs-rest (TP + TN) / total.
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_score: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn class_metrics(tp: u64, fp: u64, fn_: u64, tn: u64) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f_score = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    ClassMetrics {
        tp,
        fp,
        fn_,
        tn,
        accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
        precision,
        recall,
        f_score,
    }
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<(String, ClassMetrics)> {
    let n = cm.species.len();
    let total = cm.total();
    (0..n)
        .map(|k| {
            let tp = cm.counts[k][k];
            let row: u64 = cm.counts[k].iter().sum();
            let col: u64 = (0..n).map(|i| cm.counts[i][k]).sum();
            let (fn_, fp) = (row - tp, col - tp);
            (cm.species[k].clone(), class_metrics(tp, fp, fn_, total - tp - fp - fn_))
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.0}%", v * 100.0))
}

/// Per-species accuracy / precision / F table, one column group per
/// classifier, `-` where a metric is undefined.
pub fn format_accuracy_table(results: &[(&str, &ConfusionMatrix)]) -> String {
    let species: BTreeSet<&str> = results.iter().flat_map(|(_, cm)| cm.species.iter().map(String::as_str)).collect();
    let metrics: Vec<Vec<(String, ClassMetrics)>> = results.iter().map(|(_, cm)| per_class_metrics(cm)).collect();
    let mut out = format!("{:<20}", "species");
    for (name, _) in results {
        let _ = write!(out, " | {:^20}", name);
    }
    out.push('\n');
    let _ = write!(out, "{:<20}", "");
    for _ in results {
        let _ = write!(out, " | {:>6} {:>6} {:>6}", "Acc.", "Prec.", "F");
    }
    out.push('\n');
    for s in &species {
        let _ = write!(out, "{s:<20}");
        for m in &metrics {
            match m.iter().find(|(code, _)| code == s) {
                Some((_, c)) => {
                    let _ = write!(out, " | {:>6} {:>6} {:>6}", pct(c.accuracy), pct(c.precision), pct(c.f_score));
                }
                None => {
                    let _ = write!(out, " | {:>6} {:>6} {:>6}", "-", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<20}", "overall");
    for (_, cm) in results {
        let _ = write!(out, " | {:>6} {:>6} {:>6}", pct(cm.overall_accuracy()), "", "");
    }
    out.push('\n');
    out
}

/// Delimited per-class metrics.
pub fn format_metrics_csv(classifier: &str, cm: &ConfusionMatrix) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
    let mut out = String::from("classifier,species_code,tp,fp,fn,tn,accuracy,precision,recall,f_score\n");
    for (s, m) in per_class_metrics(cm) {
        let _ = writeln!(
            out,
            "{classifier},{s},{},{},{},{},{},{},{},{}",
            m.tp,
            m.fp,
            m.fn_,
            m.tn,
            opt(m.accuracy),
            opt(m.precision),
            opt(m.recall),
            opt(m.f_score)
        );
    }
    out
}

pub fn format_confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("true\\predicted");
    for s in &cm.species {
        let _ = write!(out, ",{s}");
    }
    out.push('\n');
    for (s, row) in cm.species.iter().zip(&cm.counts) {
        out.push_str(s);
        for c in row {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotDefinition {
    pub plot_id: String,
    pub center_x: f64,
    pub center_y: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_dbh_min")]
    pub dbh_min: f64,
}

fn default_radius() -> f64 {
    15.0
}

fn default_dbh_min() -> f64 {
    7.5
}

impl PlotDefinition {
    pub fn new(plot_id: impl Into<String>, center_x: f64, center_y: f64) -> Self {
        Self {
            plot_id: plot_id.into(),
            center_x,
            center_y,
            radius: default_radius(),
            dbh_min: default_dbh_min(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius > 0.0 && self.dbh_min >= 0.0 && self.center_x.is_finite() && self.center_y.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid plot {}", self.plot_id)))
        }
    }

    /// Apex within the radius (inclusive) and DBH strictly above the threshold.
    pub fn includes(&self, crown: &CrownRecord) -> bool {
        let d = (crown.apex_x - self.center_x).hypot(crown.apex_y - self.center_y);
        d <= self.radius && crown.dbh.is_some_and(|dbh| dbh > self.dbh_min)
    }
}

/// A plot with the field-inventory totals it is compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRecord {
    pub plot: PlotDefinition,
    pub observed_volume_m3: Option<f64>,
    pub observed_agb_mg: Option<f64>,
}

/// Reads `plot_id,center_x,center_y[,radius][,dbh_min][,observed_volume_m3][,observed_agb_mg]`.
/// Missing radius / dbh_min take the given defaults.
pub fn read_plots(path: impl AsRef<Path>, radius: f64, dbh_min: f64) -> Result<Vec<PlotRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::parse(path, 1, "empty plot file"));
    };
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_ascii_lowercase()).collect();
    let pos = |n: &str| cols.iter().position(|c| c == n);
    let (Some(iid), Some(ix), Some(iy)) = (pos("plot_id"), pos("center_x"), pos("center_y")) else {
        return Err(Error::parse(path, 1, "header needs plot_id, center_x and center_y"));
    };
    let (ir, id, iv, ia) = (pos("radius"), pos("dbh_min"), pos("observed_volume_m3"), pos("observed_agb_mg"));
    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != cols.len() {
            return Err(Error::parse(path, lineno, format!("expected {} fields", cols.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, lineno, format!("invalid number {:?}", f[i])))
        };
        let opt = |i: Option<usize>| -> Result<Option<f64>> {
            match i {
                Some(i) if !f[i].is_empty() => num(i).map(Some),
                _ => Ok(None),
            }
        };
        let plot = PlotDefinition {
            plot_id: f[iid].to_string(),
            center_x: num(ix)?,
            center_y: num(iy)?,
            radius: opt(ir)?.unwrap_or(radius),
            dbh_min: opt(id)?.unwrap_or(dbh_min),
        };
        plot.validate().map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        out.push(PlotRecord { plot, observed_volume_m3: opt(iv)?, observed_agb_mg: opt(ia)? });
    }
    Ok(out)
}

pub fn write_plots(plots: &[PlotRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("plot_id,center_x,center_y,radius,dbh_min,observed_volume_m3,observed_agb_mg\n");
    for p in plots {
        let d = &p.plot;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            d.plot_id,
            d.center_x,
            d.center_y,
            d.radius,
            d.dbh_min,
            opt(p.observed_volume_m3),
            opt(p.observed_agb_mg)
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlotTotals {
    pub volume_m3: f64,
    pub agb_mg: f64,
    pub n_trees: usize,
}

pub fn aggregate_plot(crowns: &[CrownRecord], plot: &PlotDefinition) -> PlotTotals {
    let mut t = PlotTotals::default();
    for c in crowns.iter().filter(|c| plot.includes(c)) {
        t.volume_m3 += c.volume.unwrap_or(0.0);
        t.agb_mg += c.agb.unwrap_or(0.0) / 1000.0;
        t.n_trees += 1;
    }
    t
}

/// Sample Pearson correlation.
pub fn pearson_r(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    if observed.len() != predicted.len() || observed.len() < 2 {
        return Err(Error::Data(format!(
            "correlation needs two equal-length series of at least 2 values ({} vs {})",
            observed.len(),
            predicted.len()
        )));
    }
    let n = observed.len() as f64;
    let mx = observed.iter().sum::<f64>() / n;
    let my = predicted.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in observed.iter().zip(predicted) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical("correlation undefined: a series has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotComparison {
    pub plot_id: String,
    pub observed_volume: f64,
    pub predicted_volume: f64,
    pub observed_agb: f64,
    pub predicted_agb: f64,
}

/// Observed-vs-predicted table with `Ob`/`Pr` rows per quantity and a
/// column per plot.
pub fn format_plot_comparison(rows: &[PlotComparison]) -> String {
    let mut out = format!("{:<12}", "");
    for r in rows {
        let _ = write!(out, " {:>9}", r.plot_id);
    }
    out.push('\n');
    type Pick = fn(&PlotComparison) -> f64;
    let lines: [(&str, Pick); 4] = [
        ("V (m3) Ob", |r| r.observed_volume),
        ("V (m3) Pr", |r| r.predicted_volume),
        ("AGB (Mg) Ob", |r| r.observed_agb),
        ("AGB (Mg) Pr", |r| r.predicted_agb),
    ];
    for (name, f) in lines {
        let _ = write!(out, "{name:<12}");
        for r in rows {
            let _ = write!(out, " {:>9.2}", f(r));
        }
        out.push('\n');
    }
    out
}

pub fn format_plot_comparison_csv(rows: &[PlotComparison]) -> String {
    let mut out = String::from("plot_id,observed_volume_m3,predicted_volume_m3,observed_agb_mg,predicted_agb_mg\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.plot_id, r.observed_volume, r.predicted_volume, r.observed_agb, r.predicted_agb
        );
    }
    out
}

/// Plot values published for the 11 validation plots.
pub mod table6 {
    pub const VOLUME_OBSERVED: [f64; 11] = [3.00, 3.33, 57.87, 21.32, 15.41, 12.22, 14.53, 25.09, 18.42, 6.74, 20.51];
    pub const VOLUME_PREDICTED: [f64; 11] = [1.02, 1.32, 63.92, 13.14, 12.22, 3.19, 5.67, 12.40, 11.57, 0.34, 0.23];
    pub const AGB_OBSERVED: [f64; 11] = [1.84, 1.99, 26.95, 11.82, 7.49, 6.10, 7.24, 12.76, 9.21, 4.04, 12.25];
    pub const AGB_PREDICTED: [f64; 11] = [1.07, 1.45, 37.01, 8.99, 9.19, 2.68, 5.39, 9.53, 7.43, 5.48, 3.68];
    pub const REPORTED_R_VOLUME: f64 = 0.94;
    pub const REPORTED_R_AGB: f64 = 0.90;
}
