//! Linear SVM trained on the primal hinge objective
//! `½‖w‖² + C·Σ max(0, 1 − yᵢ(w·xᵢ + b))` by seeded stochastic subgradient
//! descent, plus one-vs-rest grading over the five KL grades.
//!
//! Training is a pure function of the *set* of samples and the seed: samples
//! are put into a canonical order before the seeded per-epoch shuffle.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg, data, io_err, Error, Result};
use crate::GRADES;

/// Per-feature affine normalization applied before the weights.
#[derive(Debug, Clone, PartialEq)]
pub enum Standardizer {
    Identity,
    /// `(mean, stddev)` per feature; a zero-variance feature keeps stddev 1.
    PerFeature(Vec<(f64, f64)>),
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Self {
        let dim = features[0].len();
        let n = features.len() as f64;
        let mut stats = Vec::with_capacity(dim);
        for j in 0..dim {
            let mean = features.iter().map(|x| x[j]).sum::<f64>() / n;
            let var = features.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            stats.push((mean, if sd > 1e-12 { sd } else { 1.0 }));
        }
        Standardizer::PerFeature(stats)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Standardizer::Identity => x.to_vec(),
            Standardizer::PerFeature(s) => x.iter().zip(s).map(|(v, (m, sd))| (v - m) / sd).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardizer: Standardizer,
}

impl LinearSvmModel {
    pub fn new(weights: Vec<f64>, bias: f64, standardizer: Standardizer) -> Result<Self> {
        if let Standardizer::PerFeature(s) = &standardizer {
            if s.len() != weights.len() {
                return Err(arg(format!(
                    "standardizer has {} rows for {} weights",
                    s.len(),
                    weights.len()
                )));
            }
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(arg("model parameters must be finite"));
        }
        Ok(Self {
            weights,
            bias,
            standardizer,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `w · standardize(x) + b`.
    pub fn decision_function(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(arg(format!(
                "feature dimension {} does not match model dimension {}",
                x.len(),
                self.weights.len()
            )));
        }
        Ok(self.raw_decision(x))
    }

    fn raw_decision(&self, x: &[f64]) -> f64 {
        let dot: f64 = match &self.standardizer {
            Standardizer::Identity => self.weights.iter().zip(x).map(|(w, v)| w * v).sum(),
            Standardizer::PerFeature(s) => self
                .weights
                .iter()
                .zip(x)
                .zip(s)
                .map(|((w, v), (m, sd))| w * ((v - m) / sd))
                .sum(),
        };
        dot + self.bias
    }

    /// Weights and bias with the standardizer folded in, for scanning many
    /// windows: `decision(x) ≈ folded.0 · x + folded.1`.
    pub fn folded(&self) -> (Vec<f64>, f64) {
        match &self.standardizer {
            Standardizer::Identity => (self.weights.clone(), self.bias),
            Standardizer::PerFeature(s) => {
                let w: Vec<f64> = self.weights.iter().zip(s).map(|(w, (_, sd))| w / sd).collect();
                let shift: f64 = w.iter().zip(s).map(|(w, (m, _))| w * m).sum();
                (w, self.bias - shift)
            }
        }
    }

    /// Serializes as `svm-v1` text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "svm-v1").unwrap();
        writeln!(out, "dim {}", self.weights.len()).unwrap();
        writeln!(out, "bias {:.16e}", self.bias).unwrap();
        match &self.standardizer {
            Standardizer::Identity => writeln!(out, "standardizer identity").unwrap(),
            Standardizer::PerFeature(s) => {
                writeln!(out, "standardizer per-feature").unwrap();
                for (m, sd) in s {
                    writeln!(out, "{m:.16e} {sd:.16e}").unwrap();
                }
            }
        }
        writeln!(out, "weights").unwrap();
        for w in &self.weights {
            writeln!(out, "{w:.16e}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let model = parse_model(&mut lines, path)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text, path)
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_model<'a>(lines: &mut impl Iterator<Item = &'a str>, path: &Path) -> Result<LinearSvmModel> {
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| corrupt(path, format!("truncated before {what}")))
    };
    let header = next("header")?;
    if header != "svm-v1" {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: "svm-v1".into(),
            found: header.into(),
        });
    }
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| corrupt(path, format!("bad number {s:?}")))
    };
    let keyed = |line: &str, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .map(|r| r.trim().to_string())
            .ok_or_else(|| corrupt(path, format!("expected `{key}`, found {line:?}")))
    };
    let dim: usize = keyed(next("dim")?, "dim")?
        .parse()
        .map_err(|_| corrupt(path, "bad dimension"))?;
    let bias = num(&keyed(next("bias")?, "bias")?)?;
    let standardizer = match keyed(next("standardizer")?, "standardizer")?.as_str() {
        "identity" => Standardizer::Identity,
        "per-feature" => {
            let mut rows = Vec::with_capacity(dim);
            for _ in 0..dim {
                let line = next("standardizer row")?;
                let mut parts = line.split_whitespace();
                let (Some(m), Some(sd), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(corrupt(path, format!("bad standardizer row {line:?}")));
                };
                rows.push((num(m)?, num(sd)?));
            }
            Standardizer::PerFeature(rows)
        }
        other => return Err(corrupt(path, format!("unknown standardizer {other:?}"))),
    };
    if next("weights")? != "weights" {
        return Err(corrupt(path, "missing weights section"));
    }
    let mut weights = Vec::with_capacity(dim);
    for _ in 0..dim {
        weights.push(num(next("weight")?)?);
    }
    LinearSvmModel::new(weights, bias, standardizer).map_err(|e| corrupt(path, e.to_string()))
}

/// Step-size schedule for the subgradient solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRateDecay {
    /// `η_t = η0 / (1 + η0·λ·t)` with `λ = 1 / (C·n)`.
    InverseScaling,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmTrainConfig {
    pub c: f64,
    pub epochs: usize,
    pub eta0: f64,
    pub decay: LearningRateDecay,
    pub seed: u64,
    /// Fit a per-feature standardizer on the training set.
    pub standardize: bool,
}

impl Default for SvmTrainConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epochs: 50,
            eta0: 0.5,
            decay: LearningRateDecay::InverseScaling,
            seed: 0,
            standardize: true,
        }
    }
}

impl SvmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || self.epochs == 0 || !(self.eta0 > 0.0) {
            return Err(arg(format!(
                "svm config needs C > 0, epochs >= 1, eta0 > 0 (got C={}, epochs={}, eta0={})",
                self.c, self.epochs, self.eta0
            )));
        }
        Ok(())
    }
}

/// Per-epoch trace of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SvmTrace {
    /// Objective at the end of each epoch.
    pub epoch_objective: Vec<f64>,
    /// Lowest objective seen up to and including each epoch.
    pub best_objective: Vec<f64>,
}

/// Primal objective `½‖w‖² + C·Σ hinge` on already-standardized features.
pub fn hinge_objective(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], c: f64) -> f64 {
    let reg = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    reg + c * hinge_sum(w, b, xs, ys)
}

fn hinge_sum(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cmp_features(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn validate_features(features: &[Vec<f64>], n_labels: usize) -> Result<usize> {
    if features.is_empty() {
        return Err(data("no training samples"));
    }
    if features.len() != n_labels {
        return Err(arg(format!(
            "{} feature vectors but {} labels",
            features.len(),
            n_labels
        )));
    }
    let dim = features[0].len();
    if dim == 0 {
        return Err(arg("feature vectors are empty"));
    }
    if let Some(i) = features.iter().position(|f| f.len() != dim) {
        return Err(arg(format!(
            "sample {i} has dimension {}, expected {dim}",
            features[i].len()
        )));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(data("non-finite feature value"));
    }
    Ok(dim)
}

/// Trains a binary model; labels are `+1` / `-1`.
pub fn train_linear_svm(features: &[Vec<f64>], labels: &[i8], cfg: &SvmTrainConfig) -> Result<LinearSvmModel> {
    train_linear_svm_traced(features, labels, cfg).map(|(m, _)| m)
}

/// As [`train_linear_svm`], also returning the objective trace.
pub fn train_linear_svm_traced(
    features: &[Vec<f64>],
    labels: &[i8],
    cfg: &SvmTrainConfig,
) -> Result<(LinearSvmModel, SvmTrace)> {
    cfg.validate()?;
    let dim = validate_features(features, labels.len())?;
    if let Some(bad) = labels.iter().find(|&&l| l != 1 && l != -1) {
        return Err(arg(format!("labels must be +1 or -1, found {bad}")));
    }
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(data("training set must contain both +1 and -1 labels"));
    }

    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| {
        labels[a]
            .cmp(&labels[b])
            .then_with(|| cmp_features(&features[a], &features[b]))
    });
    let canonical: Vec<Vec<f64>> = order.iter().map(|&i| features[i].clone()).collect();
    let ys: Vec<f64> = order.iter().map(|&i| labels[i] as f64).collect();

    let standardizer = if cfg.standardize {
        Standardizer::fit(&canonical)
    } else {
        Standardizer::Identity
    };
    let xs: Vec<Vec<f64>> = canonical.iter().map(|x| standardizer.apply(x)).collect();

    let n = xs.len();
    let lambda = 1.0 / (cfg.c * n as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut best = (w.clone(), b, hinge_objective(&w, b, &xs, &ys, cfg.c));
    let mut trace = SvmTrace::default();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut t = 0usize;

    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for &i in &idx {
            let eta = match cfg.decay {
                LearningRateDecay::InverseScaling => cfg.eta0 / (1.0 + cfg.eta0 * lambda * t as f64),
                LearningRateDecay::Constant => cfg.eta0,
            };
            let (x, y) = (&xs[i], ys[i]);
            let margin = y * (dot(&w, x) + b);
            let shrink = 1.0 - eta * lambda;
            if margin < 1.0 {
                // subgradient of λ/2‖w‖² + (1/n)·hinge, scaled by n·C·λ = 1
                for (wj, xj) in w.iter_mut().zip(x) {
                    *wj = shrink * *wj + eta * y * xj;
                }
                b += eta * y;
            } else {
                for wj in w.iter_mut() {
                    *wj *= shrink;
                }
            }
            t += 1;
        }
        let obj = hinge_objective(&w, b, &xs, &ys, cfg.c);
        if obj < best.2 {
            best = (w.clone(), b, obj);
        }
        trace.epoch_objective.push(obj);
        trace.best_objective.push(best.2);
    }

    let (w, b, _) = best;
    Ok((LinearSvmModel::new(w, b, standardizer)?, trace))
}

/// One-vs-rest models, index = KL grade.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassSvm {
    pub models: Vec<LinearSvmModel>,
}

impl MulticlassSvm {
    pub fn new(models: Vec<LinearSvmModel>) -> Result<Self> {
        if models.len() != GRADES {
            return Err(arg(format!("expected {GRADES} per-grade models, got {}", models.len())));
        }
        let dim = models[0].dim();
        if models.iter().any(|m| m.dim() != dim) {
            return Err(arg("per-grade models disagree on feature dimension"));
        }
        Ok(Self { models })
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.models.iter().map(|m| m.decision_function(x)).collect()
    }

    pub fn predict_grade(&self, x: &[f64]) -> Result<u8> {
        Ok(argmax_lowest(&self.scores(x)?) as u8)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("svm-ovr-v1\nclasses {}\n", self.models.len());
        for m in &self.models {
            out.push_str(&m.to_text());
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("svm-ovr-v1") => {}
            other => {
                return Err(Error::Version {
                    path: path.to_path_buf(),
                    expected: "svm-ovr-v1".into(),
                    found: other.unwrap_or("").into(),
                })
            }
        }
        if lines.next() != Some(&format!("classes {GRADES}")) {
            return Err(corrupt(path, "bad class count"));
        }
        let models = (0..GRADES)
            .map(|_| parse_model(&mut lines, path))
            .collect::<Result<Vec<_>>>()?;
        Self::new(models)
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Trains grade-vs-rest models for grades 0..=4. Every grade must be present.
pub fn train_ovr(features: &[Vec<f64>], grades: &[u8], cfg: &SvmTrainConfig) -> Result<MulticlassSvm> {
    validate_features(features, grades.len())?;
    if let Some(g) = grades.iter().find(|&&g| g as usize >= GRADES) {
        return Err(data(format!("grade {g} outside 0..=4")));
    }
    let distinct = (0..GRADES as u8).filter(|g| grades.contains(g)).count();
    if distinct < 2 {
        return Err(data(format!(
            "one-vs-rest needs at least 2 distinct grades, found {distinct}"
        )));
    }
    if let Some(g) = (0..GRADES as u8).find(|g| !grades.contains(g)) {
        return Err(data(format!("grade {g} has no training samples")));
    }
    let models = (0..GRADES as u8)
        .map(|g| {
            let labels: Vec<i8> = grades.iter().map(|&t| if t == g { 1 } else { -1 }).collect();
            train_linear_svm(features, &labels, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    MulticlassSvm::new(models)
}
