// SPDX-License-Identifier: MIT OR Apache-2.0

//! Post-hoc OOD scorers over a trained model.
//!
//! All scores are oriented so that higher means more in-distribution; the
//! Mahalanobis score is kept non-positive rather than negated.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diversify::{argmax, Model};
use crate::nn::{softmax_t, NnError};

const CHUNK: usize = 256;
/// Ridge escalation attempts before giving up on a covariance.
const MAX_RIDGE_ATTEMPTS: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("class {0} has no training instances")]
    MissingClass(u32),
    #[error("covariance stays singular with ridge {ridge:e}")]
    SingularCovariance { ridge: f64 },
    #[error("mahalanobis scoring needs fitted gaussian stats")]
    MissingStats,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("perturbation size must be non-negative, got {0}")]
    InvalidEpsilon(f64),
    #[error("score quantile must lie in [0, 1], got {0}")]
    InvalidQuantile(f64),
    #[error("embedding width {found} does not match stats width {expected}")]
    Width { expected: usize, found: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, DetectError>;

/// How much diagonal load is added to the tied covariance before inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Ridge {
    /// `1e-3 · trace(Σ) / b`.
    Auto,
    Fixed(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Auto
    }
}

/// Class-conditional Gaussians sharing one covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    /// `[C, b]`.
    pub means: Array2<f64>,
    pub covariance: Array2<f64>,
    /// Inverse of `covariance + ridge · I`.
    pub precision: Array2<f64>,
    pub ridge: f64,
    pub counts: Vec<usize>,
}

impl GaussianStats {
    /// Exact class means and pooled class-centred covariance of `emb`;
    /// `labels` are 0-based class indices below `classes`.
    pub fn fit(emb: &Array2<f64>, labels: &[usize], classes: usize, ridge: Ridge) -> Result<Self> {
        let (n, b) = emb.dim();
        assert_eq!(n, labels.len(), "one label per embedding");
        let mut counts = vec![0usize; classes];
        let mut means = Array2::<f64>::zeros((classes, b));
        for (row, &c) in emb.axis_iter(Axis(0)).zip(labels) {
            counts[c] += 1;
            let mut m = means.row_mut(c);
            m += &row;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(DetectError::MissingClass(c as u32 + 1));
        }
        for (mut m, &k) in means.axis_iter_mut(Axis(0)).zip(&counts) {
            m /= k as f64;
        }
        let mut centred = emb.clone();
        for (mut row, &c) in centred.axis_iter_mut(Axis(0)).zip(labels) {
            row -= &means.row(c);
        }
        let covariance = centred.t().dot(&centred) / n as f64;
        let trace = covariance.diag().sum();
        let mut eps = match ridge {
            Ridge::Auto => 1e-3 * trace / b as f64,
            Ridge::Fixed(e) => e,
        };
        for _ in 0..MAX_RIDGE_ATTEMPTS {
            if let Some(precision) = invert_spd(&covariance, eps) {
                return Ok(Self { means, covariance, precision, ridge: eps, counts });
            }
            let next = (10.0 * eps).max(1e-10 * (trace / b as f64).max(1.0));
            log::warn!("covariance not positive definite with ridge {eps:e}, retrying with {next:e}");
            eps = next;
        }
        Err(DetectError::SingularCovariance { ridge: eps })
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn classes(&self) -> usize {
        self.means.nrows()
    }
}

fn invert_spd(cov: &Array2<f64>, ridge: f64) -> Option<Array2<f64>> {
    let b = cov.nrows();
    let mut m = DMatrix::from_fn(b, b, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    for i in 0..b {
        m[(i, i)] += ridge;
    }
    let inv = m.cholesky()?.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Array2::from_shape_fn((b, b), |(i, j)| 0.5 * (inv[(i, j)] + inv[(j, i)])))
}

/// Embeds `ds` with the inference branch and fits stats on its labels.
pub fn fit_gaussian_stats(model: &Model, ds: &Dataset, ridge: Ridge) -> Result<GaussianStats> {
    let emb = embed_all(model, &ds.all_inputs())?;
    let labels: Vec<usize> = ds.instances.iter().map(|i| i.y as usize - 1).collect();
    GaussianStats::fit(&emb, &labels, model.num_classes(), ridge)
}

pub fn embed_all(model: &Model, x: &Array3<f64>) -> Result<Array2<f64>> {
    let n = x.dim().0;
    let mut out = Array2::zeros((n, model.spec.arch.bottleneck));
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let e = model.embed(&x.slice(s![start..end, .., ..]).to_owned())?;
        out.slice_mut(s![start..end, ..]).assign(&e);
    }
    Ok(out)
}

/// `max_c −(z − μ_c)ᵀ Σ⁻¹ (z − μ_c)`.
pub fn score_mahalanobis(stats: &GaussianStats, z: ArrayView1<'_, f64>) -> f64 {
    stats
        .means
        .axis_iter(Axis(0))
        .map(|mu| {
            let d = &z - &mu;
            -d.dot(&stats.precision.dot(&d))
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Mahalanobis score and nearest class (1-based) per row of `emb`.
pub fn score_mahalanobis_batch(stats: &GaussianStats, emb: &Array2<f64>) -> Result<Vec<(f64, u32)>> {
    if emb.ncols() != stats.dim() {
        return Err(DetectError::Width { expected: stats.dim(), found: emb.ncols() });
    }
    let mut out = Vec::with_capacity(emb.nrows());
    for z in emb.axis_iter(Axis(0)) {
        let per_class: Vec<f64> = stats
            .means
            .axis_iter(Axis(0))
            .map(|mu| {
                let d = &z - &mu;
                -d.dot(&stats.precision.dot(&d))
            })
            .collect();
        let c = argmax(per_class.iter().copied());
        out.push((per_class[c], c as u32 + 1));
    }
    Ok(out)
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(DetectError::InvalidTemperature(t))
    }
}

fn mcp_from_logits(logits: &Array2<f64>, temperature: f64) -> Vec<(f64, u32)> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let p = softmax_t(row, temperature);
            let c = argmax(p.iter().copied());
            (p[c], c as u32 + 1)
        })
        .collect()
}

/// Maximum temperature-scaled softmax probability and predicted class (1-based).
pub fn score_mcp(model: &Model, x: &Array3<f64>, temperature: f64) -> Result<Vec<(f64, u32)>> {
    check_temperature(temperature)?;
    let n = x.dim().0;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let chunk = x.slice(s![start..(start + CHUNK).min(n), .., ..]).to_owned();
        out.extend(mcp_from_logits(&model.logits(&chunk)?, temperature));
    }
    Ok(out)
}

/// ODIN: step the input against the gradient of the loss on its own
/// prediction, clamp back to `[0, 1]`, and take the MCP of the result.
/// The predicted class is the one of the unperturbed input. `epsilon == 0`
/// skips the perturbation entirely.
pub fn score_odin(model: &mut Model, x: &Array3<f64>, temperature: f64, epsilon: f64) -> Result<Vec<(f64, u32)>> {
    check_temperature(temperature)?;
    if !(epsilon >= 0.0) {
        return Err(DetectError::InvalidEpsilon(epsilon));
    }
    if epsilon == 0.0 {
        return score_mcp(model, x, temperature);
    }
    let n = x.dim().0;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let chunk = x.slice(s![start..(start + CHUNK).min(n), .., ..]).to_owned();
        let preds = mcp_from_logits(&model.logits(&chunk)?, temperature);
        let targets: Vec<usize> = preds.iter().map(|p| p.1 as usize - 1).collect();
        let grad = model.input_gradient(&chunk, &targets, temperature)?;
        let mut perturbed = chunk;
        perturbed.zip_mut_with(&grad, |v, &g| {
            // sign(0) = 0
            let sign = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v = (*v - epsilon * sign).clamp(0.0, 1.0);
        });
        let scores = mcp_from_logits(&model.logits(&perturbed)?, temperature);
        out.extend(scores.into_iter().zip(&preds).map(|((s, _), &(_, c))| (s, c)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Mcp,
    Mah,
    Odin,
}

impl Scorer {
    pub const ALL: [Scorer; 3] = [Scorer::Mcp, Scorer::Mah, Scorer::Odin];
}

impl std::fmt::Display for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scorer::Mcp => "mcp",
            Scorer::Mah => "mah",
            Scorer::Odin => "odin",
        })
    }
}

impl std::str::FromStr for Scorer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mcp" => Ok(Scorer::Mcp),
            "mah" => Ok(Scorer::Mah),
            "odin" => Ok(Scorer::Odin),
            other => Err(format!("unknown scorer `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub temperature: f64,
    /// ODIN input step.
    pub epsilon: f64,
    /// Validation ID quantile used as the default threshold.
    pub quantile: f64,
    pub ridge: Ridge,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { temperature: 1.0, epsilon: 0.0014, quantile: 0.05, ridge: Ridge::Auto }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: usize,
    pub scorer: Scorer,
    pub score: f64,
    pub pred_class: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_ood_true: Option<bool>,
    /// `score >= threshold`, present only when a threshold was applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flagged_id: Option<bool>,
}

/// Raw `(score, predicted class)` pairs for every row of `x`. The predicted
/// class is always the inference branch's argmax (for ODIN, on the
/// unperturbed input).
pub fn score_inputs(
    model: &mut Model,
    stats: Option<&GaussianStats>,
    x: &Array3<f64>,
    scorer: Scorer,
    cfg: &DetectConfig,
) -> Result<Vec<(f64, u32)>> {
    match scorer {
        Scorer::Mcp => score_mcp(model, x, cfg.temperature),
        Scorer::Odin => score_odin(model, x, cfg.temperature, cfg.epsilon),
        Scorer::Mah => {
            let stats = stats.ok_or(DetectError::MissingStats)?;
            let mut out = Vec::with_capacity(x.dim().0);
            for start in (0..x.dim().0).step_by(CHUNK) {
                let chunk = x.slice(s![start..(start + CHUNK).min(x.dim().0), .., ..]).to_owned();
                let (emb, logits) = model.embed_and_logits(&chunk)?;
                let scores = score_mahalanobis_batch(stats, &emb)?;
                let preds = logits.axis_iter(Axis(0)).map(|r| argmax(r.iter().copied()) as u32 + 1);
                out.extend(scores.into_iter().zip(preds).map(|((s, _), c)| (s, c)));
            }
            Ok(out)
        }
    }
}

/// One record per instance of `ds`; with a threshold, instances scoring at
/// or above it are flagged ID. Ground truth comes from the dataset's OOD
/// classes.
pub fn detect_batch(
    model: &mut Model,
    stats: Option<&GaussianStats>,
    ds: &Dataset,
    scorer: Scorer,
    cfg: &DetectConfig,
    threshold: Option<f64>,
) -> Result<Vec<ScoreRecord>> {
    if scorer == Scorer::Mah && stats.is_none() {
        return Err(DetectError::MissingStats);
    }
    if ds.is_empty() {
        return Ok(Vec::new());
    }
    let scores = score_inputs(model, stats, &ds.all_inputs(), scorer, cfg)?;
    Ok(scores
        .into_iter()
        .zip(&ds.instances)
        .enumerate()
        .map(|(id, ((score, pred_class), inst))| ScoreRecord {
            id,
            scorer,
            score,
            pred_class,
            is_ood_true: Some(ds.is_ood(inst)),
            flagged_id: threshold.map(|t| score >= t),
        })
        .collect())
}

/// Lower `q`-quantile with linear interpolation between order statistics.
pub fn quantile(scores: &[f64], q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(DetectError::InvalidQuantile(q));
    }
    if scores.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Default threshold: the configured quantile of validation ID scores.
pub fn validation_threshold(
    model: &mut Model,
    stats: Option<&GaussianStats>,
    val: &Dataset,
    scorer: Scorer,
    cfg: &DetectConfig,
) -> Result<f64> {
    let scores: Vec<f64> = detect_batch(model, stats, val, scorer, cfg, None)?
        .into_iter()
        .filter(|r| r.is_ood_true != Some(true))
        .map(|r| r.score)
        .collect();
    quantile(&scores, cfg.quantile)
}

/// Probability vectors of the inference branch for every row of `x`.
pub fn class_probabilities(model: &Model, x: &Array3<f64>, temperature: f64) -> Result<Vec<Array1<f64>>> {
    check_temperature(temperature)?;
    Ok(model.logits(x)?.axis_iter(Axis(0)).map(|r| softmax_t(r, temperature)).collect())
}
