//! Per-pixel species classification and crown labelling.
//!
//! Two classifiers are provided: a minimum-distance (nearest class centroid)
//! model and a one-vs-one RBF support vector machine trained with sequential
//! minimal optimization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crowns::Segmentation;
use crate::error::{Error, Result};
use crate::geodata::{Grid, HyperCube, DEFAULT_NODATA};
use crate::spectral::LabeledPixels;

const MODEL_VERSION: &str = "v1";

fn check_training(pixels: &LabeledPixels) -> Result<usize> {
    let dim = pixels
        .features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Data("no training pixels".into()))?;
    if dim == 0 {
        return Err(Error::Data("training pixels have no bands".into()));
    }
    if pixels.features.iter().any(|f| f.len() != dim) {
        return Err(Error::Data("training pixels differ in dimension".into()));
    }
    if pixels.features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("training pixels contain non-finite values".into()));
    }
    for l in &pixels.labels {
        if l.is_empty() || l.chars().any(char::is_whitespace) {
            return Err(Error::Data(format!("invalid species code {l:?}")));
        }
    }
    Ok(dim)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------- centroid

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    /// Sorted species codes.
    pub species: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
}

pub fn train_centroid(pixels: &LabeledPixels) -> Result<CentroidModel> {
    let dim = check_training(pixels)?;
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (l, f) in pixels.labels.iter().zip(&pixels.features) {
        let e = sums.entry(l.as_str()).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in e.0.iter_mut().zip(f) {
            *s += v;
        }
        e.1 += 1;
    }
    let (species, centroids) = sums
        .into_iter()
        .map(|(s, (sum, n))| (s.to_string(), sum.into_iter().map(|v| v / n as f64).collect()))
        .unzip();
    Ok(CentroidModel { species, centroids })
}

impl CentroidModel {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Nearest centroid; equal distances go to the lexicographically first code.
    pub fn predict(&self, pixel: &[f64]) -> &str {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(pixel, c);
            if d < best.0 {
                best = (d, i);
            }
        }
        &self.species[best.1]
    }
}

// ---------------------------------------------------------------- SVM

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmParams {
    pub cost: f64,
    /// RBF width; `None` means 1 / number of bands.
    pub gamma: Option<f64>,
    /// Stopping tolerance on the maximal KKT violation.
    pub tolerance: f64,
    /// Training pixels kept per species (evenly spaced subsample); 0 keeps all.
    pub max_samples_per_class: usize,
    pub max_iterations: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            cost: 10.0,
            gamma: None,
            tolerance: 1e-3,
            max_samples_per_class: 500,
            max_iterations: 10_000_000,
        }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cost > 0.0 && self.cost.is_finite()) {
            return Err(Error::Config(format!("svm cost must be > 0, got {}", self.cost)));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("svm gamma must be > 0, got {g}")));
            }
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("svm tolerance must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("svm max_iterations must be > 0".into()));
        }
        Ok(())
    }
}

/// A trained two-class RBF machine: f(x) = sum coef_i k(sv_i, x) + bias,
/// with coef_i = alpha_i * y_i. Positive f means `positive`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySvm {
    pub positive: String,
    pub negative: String,
    pub coefficients: Vec<f64>,
    pub support: Vec<Vec<f64>>,
    pub bias: f64,
}

impl BinarySvm {
    pub fn decision(&self, x: &[f64], gamma: f64) -> f64 {
        self.coefficients
            .iter()
            .zip(&self.support)
            .map(|(c, s)| c * (-gamma * sq_dist(s, x)).exp())
            .sum::<f64>()
            + self.bias
    }
}

/// Convergence record of one SMO solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Largest per-sample KKT residual at the solution.
    pub max_kkt_violation: f64,
    /// Dual objective (maximization form) after each iteration.
    pub objective_history: Vec<f64>,
    pub dual_objective: f64,
    pub primal_objective: f64,
    pub duality_gap: f64,
}

/// Solution of a binary soft-margin problem on raw (already scaled) samples.
#[derive(Debug, Clone)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub diagnostics: SmoDiagnostics,
}

/// Kernel columns computed on demand and kept for the rest of the solve.
struct KernelCache<'a> {
    x: &'a [Vec<f64>],
    gamma: f64,
    columns: Vec<Option<Vec<f64>>>,
}

impl<'a> KernelCache<'a> {
    fn new(x: &'a [Vec<f64>], gamma: f64) -> Self {
        Self { x, gamma, columns: vec![None; x.len()] }
    }

    fn column(&mut self, i: usize) -> &[f64] {
        if self.columns[i].is_none() {
            let xi = &self.x[i];
            let gamma = self.gamma;
            self.columns[i] = Some(self.x.iter().map(|xj| (-gamma * sq_dist(xi, xj)).exp()).collect());
        }
        self.columns[i].as_deref().expect("column filled above")
    }
}

/// Solves the soft-margin dual with maximal-violating-pair SMO.
///
/// `y` holds ±1 labels. Deterministic for a given sample order.
pub fn smo_solve(x: &[Vec<f64>], y: &[f64], cost: f64, gamma: f64, tolerance: f64, max_iterations: usize) -> SmoSolution {
    let n = x.len();
    let mut alpha = vec![0.0; n];
    // Gradient of the minimization objective 0.5 a'Qa - e'a.
    let mut grad = vec![-1.0; n];
    let mut cache = KernelCache::new(x, gamma);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    let up = |a: f64, yt: f64| (yt > 0.0 && a < cost) || (yt < 0.0 && a > 0.0);
    let low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < cost);

    while iterations < max_iterations {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = t;
            }
            if low(alpha[t], y[t]) && v < gmin {
                gmin = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let ki = cache.column(i).to_vec();
        let kj = cache.column(j);
        let quad = (ki[i] + kj[j] - 2.0 * ki[j]).max(1e-12);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (mut ai, mut aj) = (old_i, old_j);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > cost {
                    ai = cost;
                    aj = cost - diff;
                }
            } else if aj > cost {
                aj = cost;
                ai = cost + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > cost {
                if ai > cost {
                    ai = cost;
                    aj = sum - cost;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > cost {
                if aj > cost {
                    aj = cost;
                    ai = sum - cost;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        alpha[i] = ai;
        alpha[j] = aj;
        let (di, dj) = (ai - old_i, aj - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
        history.push(dual_objective(&alpha, &grad));
    }
    if !converged {
        warn!("SMO stopped after {max_iterations} iterations without reaching tolerance {tolerance}");
    }

    let rho = compute_rho(&alpha, &grad, y, cost);
    let dual = dual_objective(&alpha, &grad);
    // ||w||^2 = a'Qa = sum a_i (G_i + 1); margins y_i f(x_i) = G_i + 1 - y_i rho.
    let w2: f64 = alpha.iter().zip(&grad).map(|(a, g)| a * (g + 1.0)).sum();
    let mut hinge = 0.0;
    let mut kkt: f64 = 0.0;
    for t in 0..n {
        let margin = grad[t] + 1.0 - y[t] * rho;
        hinge += (1.0 - margin).max(0.0);
        let v = if alpha[t] <= 0.0 {
            (1.0 - margin).max(0.0)
        } else if alpha[t] >= cost {
            (margin - 1.0).max(0.0)
        } else {
            (margin - 1.0).abs()
        };
        kkt = kkt.max(v);
    }
    let primal = 0.5 * w2 + cost * hinge;
    SmoSolution {
        alpha,
        bias: -rho,
        diagnostics: SmoDiagnostics {
            iterations,
            converged,
            max_kkt_violation: kkt,
            objective_history: history,
            dual_objective: dual,
            primal_objective: primal,
            duality_gap: primal - dual,
        },
    }
}

/// Dual objective in maximization form: e'a - 0.5 a'Qa.
fn dual_objective(alpha: &[f64], grad: &[f64]) -> f64 {
    -0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>()
}

fn compute_rho(alpha: &[f64], grad: &[f64], y: &[f64], cost: f64) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut nfree) = (0.0, 0usize);
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= cost {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            nfree += 1;
            sum += yg;
        }
    }
    if nfree > 0 {
        sum / nfree as f64
    } else {
        (ub + lb) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    /// Sorted species codes.
    pub species: Vec<String>,
    pub gamma: f64,
    pub cost: f64,
    pub scale_mean: Vec<f64>,
    pub scale_std: Vec<f64>,
    /// One machine per species pair (i < j in `species` order).
    pub machines: Vec<BinarySvm>,
}

/// Trained model plus the per-pair solver diagnostics.
#[derive(Debug, Clone)]
pub struct SvmTraining {
    pub model: SvmModel,
    pub diagnostics: Vec<((String, String), SmoDiagnostics)>,
}

fn evenly_spaced(n: usize, keep: usize) -> Vec<usize> {
    if keep == 0 || n <= keep {
        return (0..n).collect();
    }
    (0..keep).map(|k| k * n / keep).collect()
}

pub fn train_svm(pixels: &LabeledPixels, params: &SvmParams) -> Result<SvmTraining> {
    params.validate()?;
    let dim = check_training(pixels)?;
    let gamma = params.gamma.unwrap_or(1.0 / dim as f64);

    let mut by_species: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in pixels.labels.iter().enumerate() {
        by_species.entry(l.as_str()).or_default().push(i);
    }
    if by_species.len() < 2 {
        return Err(Error::Data("SVM training needs at least two species".into()));
    }

    // Per-band z-score from the training pixels.
    let n = pixels.len() as f64;
    let mut scale_mean = vec![0.0; dim];
    for f in &pixels.features {
        for (m, v) in scale_mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut scale_std = vec![0.0; dim];
    for f in &pixels.features {
        for b in 0..dim {
            scale_std[b] += (f[b] - scale_mean[b]).powi(2) / n;
        }
    }
    for s in &mut scale_std {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let scaled: Vec<Vec<f64>> = pixels
        .features
        .iter()
        .map(|f| f.iter().enumerate().map(|(b, v)| (v - scale_mean[b]) / scale_std[b]).collect())
        .collect();

    let species: Vec<String> = by_species.keys().map(|s| s.to_string()).collect();
    let subsets: Vec<Vec<usize>> = by_species
        .values()
        .map(|idx| evenly_spaced(idx.len(), params.max_samples_per_class).into_iter().map(|k| idx[k]).collect())
        .collect();
    let pairs: Vec<(usize, usize)> =
        (0..species.len()).flat_map(|i| (i + 1..species.len()).map(move |j| (i, j))).collect();

    let solved: Vec<(BinarySvm, SmoDiagnostics)> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let idx: Vec<usize> = subsets[a].iter().chain(&subsets[b]).copied().collect();
            let x: Vec<Vec<f64>> = idx.iter().map(|&k| scaled[k].clone()).collect();
            let y: Vec<f64> = (0..idx.len()).map(|k| if k < subsets[a].len() { 1.0 } else { -1.0 }).collect();
            let sol = smo_solve(&x, &y, params.cost, gamma, params.tolerance, params.max_iterations);
            let mut coefficients = Vec::new();
            let mut support = Vec::new();
            for (k, &a) in sol.alpha.iter().enumerate() {
                if a > 0.0 {
                    coefficients.push(a * y[k]);
                    support.push(x[k].clone());
                }
            }
            (
                BinarySvm {
                    positive: species[a].clone(),
                    negative: species[b].clone(),
                    coefficients,
                    support,
                    bias: sol.bias,
                },
                sol.diagnostics,
            )
        })
        .collect();

    let mut machines = Vec::with_capacity(solved.len());
    let mut diagnostics = Vec::with_capacity(solved.len());
    for (m, d) in solved {
        diagnostics.push(((m.positive.clone(), m.negative.clone()), d));
        machines.push(m);
    }
    Ok(SvmTraining {
        model: SvmModel {
            species,
            gamma,
            cost: params.cost,
            scale_mean,
            scale_std,
            machines,
        },
        diagnostics,
    })
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.scale_mean.len()
    }

    pub fn scale(&self, pixel: &[f64]) -> Vec<f64> {
        pixel
            .iter()
            .zip(self.scale_mean.iter().zip(&self.scale_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Decision values of every pairwise machine, in `machines` order.
    pub fn decisions(&self, pixel: &[f64]) -> Vec<f64> {
        let z = self.scale(pixel);
        self.machines.iter().map(|m| m.decision(&z, self.gamma)).collect()
    }

    /// One-vs-one vote; ties go to the larger summed margin, then to the
    /// lexicographically first code.
    pub fn predict(&self, pixel: &[f64]) -> &str {
        let decisions = self.decisions(pixel);
        let idx = |code: &str| self.species.binary_search_by(|s| s.as_str().cmp(code)).expect("known species");
        let mut votes = vec![0usize; self.species.len()];
        let mut margin = vec![0.0; self.species.len()];
        for (m, f) in self.machines.iter().zip(&decisions) {
            let (p, q) = (idx(&m.positive), idx(&m.negative));
            if *f >= 0.0 {
                votes[p] += 1;
            } else {
                votes[q] += 1;
            }
            margin[p] += f;
            margin[q] -= f;
        }
        let mut best = 0;
        for k in 1..self.species.len() {
            if votes[k] > votes[best] || (votes[k] == votes[best] && margin[k] > margin[best]) {
                best = k;
            }
        }
        &self.species[best]
    }
}

// ---------------------------------------------------------------- common

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Centroid(CentroidModel),
    Svm(SvmModel),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Centroid,
    #[default]
    Svm,
}

/// A classifier bound to the band subset it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub bands: Vec<usize>,
    pub classifier: Classifier,
}

impl TrainedModel {
    pub fn species(&self) -> &[String] {
        match &self.classifier {
            Classifier::Centroid(m) => &m.species,
            Classifier::Svm(m) => &m.species,
        }
    }

    /// Predicts from a full (all-band) spectrum.
    pub fn predict_spectrum(&self, spectrum: &[f64]) -> &str {
        let x: Vec<f64> = self.bands.iter().map(|&b| spectrum[b]).collect();
        self.predict(&x)
    }

    /// Predicts from a vector already restricted to `bands`.
    pub fn predict(&self, x: &[f64]) -> &str {
        match &self.classifier {
            Classifier::Centroid(m) => m.predict(x),
            Classifier::Svm(m) => m.predict(x),
        }
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

pub fn format_model(model: &TrainedModel) -> String {
    let mut out = String::new();
    let kind = match model.classifier {
        Classifier::Centroid(_) => "centroid",
        Classifier::Svm(_) => "svm",
    };
    let _ = writeln!(out, "itc-model {MODEL_VERSION} {kind}");
    let _ = writeln!(out, "bands {}", join(&model.bands));
    let _ = writeln!(out, "species {}", join(model.species()));
    match &model.classifier {
        Classifier::Centroid(m) => {
            for (s, c) in m.species.iter().zip(&m.centroids) {
                let _ = writeln!(out, "centroid {s} {}", join(c));
            }
        }
        Classifier::Svm(m) => {
            let _ = writeln!(out, "gamma {}", m.gamma);
            let _ = writeln!(out, "cost {}", m.cost);
            let _ = writeln!(out, "scale_mean {}", join(&m.scale_mean));
            let _ = writeln!(out, "scale_std {}", join(&m.scale_std));
            for b in &m.machines {
                let _ = writeln!(out, "pair {} {} {} {}", b.positive, b.negative, b.bias, b.coefficients.len());
                for (c, s) in b.coefficients.iter().zip(&b.support) {
                    let _ = writeln!(out, "sv {c} {}", join(s));
                }
            }
        }
    }
    out.push_str("end\n");
    out
}

pub fn parse_model(text: &str, origin: &Path) -> Result<TrainedModel> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    let mut next = |want: &str| -> Result<(usize, Vec<&str>)> {
        let (i, l) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 0, format!("unexpected end of model, expected {want}")))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks[0] != want {
            return Err(Error::parse(origin, i + 1, format!("expected {want}, found {}", toks[0])));
        }
        Ok((i + 1, toks[1..].to_vec()))
    };
    let nums = |line: usize, toks: &[&str]| -> Result<Vec<f64>> {
        toks.iter()
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(origin, line, format!("invalid number {t:?}"))))
            .collect()
    };

    let (line, head) = next("itc-model")?;
    if head.first() != Some(&MODEL_VERSION) {
        return Err(Error::parse(origin, line, format!("unsupported model version {:?}", head.first())));
    }
    let kind = head.get(1).copied().unwrap_or("");
    let (line, b) = next("bands")?;
    let bands = b
        .iter()
        .map(|t| t.parse::<usize>().map_err(|_| Error::parse(origin, line, format!("invalid band {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let (_, sp) = next("species")?;
    let species: Vec<String> = sp.iter().map(|s| s.to_string()).collect();

    let classifier = match kind {
        "centroid" => {
            let mut centroids = Vec::new();
            for s in &species {
                let (line, toks) = next("centroid")?;
                if toks.first() != Some(&s.as_str()) {
                    return Err(Error::parse(origin, line, format!("expected centroid for {s}")));
                }
                centroids.push(nums(line, &toks[1..])?);
            }
            Classifier::Centroid(CentroidModel { species: species.clone(), centroids })
        }
        "svm" => {
            let (line, g) = next("gamma")?;
            let gamma = nums(line, &g)?.first().copied().unwrap_or(f64::NAN);
            let (line, c) = next("cost")?;
            let cost = nums(line, &c)?.first().copied().unwrap_or(f64::NAN);
            let (line, m) = next("scale_mean")?;
            let scale_mean = nums(line, &m)?;
            let (line, s) = next("scale_std")?;
            let scale_std = nums(line, &s)?;
            let npairs = species.len() * species.len().saturating_sub(1) / 2;
            let mut machines = Vec::with_capacity(npairs);
            for _ in 0..npairs {
                let (line, p) = next("pair")?;
                if p.len() != 4 {
                    return Err(Error::parse(origin, line, "pair needs: positive negative bias count"));
                }
                let bias = nums(line, &p[2..3])?[0];
                let count: usize = p[3].parse().map_err(|_| Error::parse(origin, line, "invalid support count"))?;
                let mut coefficients = Vec::with_capacity(count);
                let mut support = Vec::with_capacity(count);
                for _ in 0..count {
                    let (line, toks) = next("sv")?;
                    let v = nums(line, &toks)?;
                    if v.len() != scale_mean.len() + 1 {
                        return Err(Error::parse(origin, line, "support vector has the wrong dimension"));
                    }
                    coefficients.push(v[0]);
                    support.push(v[1..].to_vec());
                }
                machines.push(BinarySvm {
                    positive: p[0].to_string(),
                    negative: p[1].to_string(),
                    coefficients,
                    support,
                    bias,
                });
            }
            Classifier::Svm(SvmModel { species: species.clone(), gamma, cost, scale_mean, scale_std, machines })
        }
        other => return Err(Error::parse(origin, 1, format!("unknown model kind {other:?}"))),
    };
    next("end")?;
    Ok(TrainedModel { bands, classifier })
}

pub fn write_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_model(model)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text, path)
}

/// Per-pixel species map. Grid values are 1-based indices into `legend`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub grid: Grid,
    pub legend: Vec<String>,
}

impl LabelMap {
    pub fn label_at(&self, x: f64, y: f64) -> Option<&str> {
        let v = self.grid.value_at(x, y)?;
        self.legend.get((v as usize).checked_sub(1)?).map(String::as_str)
    }

    pub fn format_legend(&self) -> String {
        let mut out = String::from("code,species_code\n");
        for (i, s) in self.legend.iter().enumerate() {
            let _ = writeln!(out, "{},{s}", i + 1);
        }
        out
    }
}

/// Classifies every cube pixel that is valid and, if a mask is given, lies
/// on a valid non-zero mask value (the mask is sampled at pixel centres).
pub fn classify_image(cube: &HyperCube, model: &TrainedModel, mask: Option<&Grid>) -> Result<LabelMap> {
    if let Some(&b) = model.bands.iter().find(|&&b| b >= cube.nbands) {
        return Err(Error::Data(format!("model band {b} is outside the {}-band cube", cube.nbands)));
    }
    let legend = model.species().to_vec();
    let geom = cube.geometry;
    let values: Vec<f64> = (0..cube.npixels())
        .into_par_iter()
        .map(|p| {
            if let Some(mask) = mask {
                let (x, y) = geom.cell_center(geom.row_col(p).0, geom.row_col(p).1);
                match mask.value_at(x, y) {
                    Some(v) if v != 0.0 => {}
                    _ => return DEFAULT_NODATA,
                }
            }
            if cube.pixel_is_nodata(p) {
                return DEFAULT_NODATA;
            }
            let label = model.predict(&cube.pixel_bands(p, &model.bands));
            (legend.iter().position(|s| s == label).expect("model species") + 1) as f64
        })
        .collect();
    Ok(LabelMap {
        grid: Grid::from_values(geom, DEFAULT_NODATA, values)?,
        legend,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrownLabels {
    pub labels: BTreeMap<u32, String>,
    /// Crowns with no classified pixel.
    pub unlabeled: Vec<u32>,
}

/// Majority label over each crown's cells; ties go to the lexicographically
/// first code.
pub fn label_crowns_majority(map: &LabelMap, seg: &Segmentation) -> CrownLabels {
    let mut out = CrownLabels::default();
    for crown in &seg.crowns {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &(r, c) in &crown.cells {
            let (x, y) = seg.geometry.cell_center(r, c);
            if let Some(l) = map.label_at(x, y) {
                *counts.entry(l).or_insert(0) += 1;
            }
        }
        let mut best: Option<(&str, usize)> = None;
        for (s, n) in counts {
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((s, n));
            }
        }
        match best {
            Some((s, _)) => {
                out.labels.insert(crown.crown_id, s.to_string());
            }
            None => {
                warn!("crown {} has no classified pixel; species left unset", crown.crown_id);
                out.unlabeled.push(crown.crown_id);
            }
        }
    }
    out
}
