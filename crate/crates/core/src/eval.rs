// SPDX-License-Identifier: MIT OR Apache-2.0

//! Classification and detection metrics plus latent-domain diagnostics.
//!
//! Detection metrics treat ID as the positive class and expect scores where
//! higher means more in-distribution.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::substream;

/// Samples each group needs before the divergence probe is trusted.
pub const MIN_PROBE_SAMPLES: usize = 10;
const PROBE_L2: f64 = 1e-2;
const PROBE_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("detection metrics need both ID and OOD instances")]
    OneClassOnly,
    #[error("no ID (positive) instances")]
    NoPositives,
    #[error("group {group} has {found} samples, need at least {MIN_PROBE_SAMPLES}")]
    TooFewSamples { group: char, found: usize },
    #[error("feature widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Fraction of exact matches.
pub fn accuracy(preds: &[u32], labels: &[u32]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mann–Whitney statistic from mid-ranks: the fraction of (ID, OOD) pairs
/// ordered correctly, ties counting one half.
pub fn auroc(scores: &[f64], is_id: &[bool]) -> Result<f64> {
    if scores.len() != is_id.len() {
        return Err(EvalError::LengthMismatch(scores.len(), is_id.len()));
    }
    let n_id = is_id.iter().filter(|&&p| p).count();
    let n_ood = is_id.len() - n_id;
    if n_id == 0 || n_ood == 0 {
        return Err(EvalError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| is_id[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_id * (n_id + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// Average precision with ID as the positive class: precision at each
/// distinct descending-score threshold weighted by the recall gained there.
pub fn aupr(scores: &[f64], is_id: &[bool]) -> Result<f64> {
    if scores.len() != is_id.len() {
        return Err(EvalError::LengthMismatch(scores.len(), is_id.len()));
    }
    let positives = is_id.iter().filter(|&&p| p).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut gained = 0;
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            gained += is_id[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        tp += gained;
        ap += (gained as f64 / positives as f64) * (tp as f64 / seen as f64);
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub auroc: f64,
    pub aupr: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl DetectionEval {
    pub fn compute(scores: &[f64], is_id: &[bool]) -> Result<Self> {
        let n_id = is_id.iter().filter(|&&p| p).count();
        Ok(Self { auroc: auroc(scores, is_id)?, aupr: aupr(scores, is_id)?, n_id, n_ood: is_id.len() - n_id })
    }

    /// Same scores with OOD as the positive class: negated scores, flipped flags.
    pub fn compute_ood_positive(scores: &[f64], is_id: &[bool]) -> Result<Self> {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let flipped: Vec<bool> = is_id.iter().map(|p| !p).collect();
        let mut e = Self::compute(&neg, &flipped)?;
        std::mem::swap(&mut e.n_id, &mut e.n_ood);
        Ok(e)
    }
}

fn lexicographic(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Linear-probe estimate of the H-divergence between two feature sets.
///
/// An L2-regularized logistic regression on standardized features is
/// trained on one half of each group and tested on the other, both ways.
/// With balanced held-out error `e` the proxy is `2 · (1 − 2e)`, clamped to
/// `[0, 2]`. The two groups are put in a canonical order first so the result
/// is exactly symmetric.
pub fn h_divergence_proxy(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(EvalError::WidthMismatch(a.ncols(), b.ncols()));
    }
    for (group, x) in [('A', &a), ('B', &b)] {
        if x.nrows() < MIN_PROBE_SAMPLES {
            return Err(EvalError::TooFewSamples { group, found: x.nrows() });
        }
    }
    let (a, b) = if lexicographic(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let folds = |n: usize, name: &str| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(n as u64, name));
        let mut fold = vec![0u8; n];
        for (pos, &i) in order.iter().enumerate() {
            fold[i] = (pos % 2) as u8;
        }
        fold
    };
    let fa = folds(a.nrows(), "eval/probe-folds/a");
    let fb = folds(b.nrows(), "eval/probe-folds/b");
    let (mut miss_a, mut miss_b) = (0usize, 0usize);
    for test_fold in 0..2u8 {
        let pick = |x: &ArrayView2<'_, f64>, f: &[u8], want: bool| {
            let idx: Vec<usize> = (0..x.nrows()).filter(|&i| (f[i] == test_fold) == want).collect();
            x.select(Axis(0), &idx)
        };
        let (tr_a, tr_b) = (pick(&a, &fa, false), pick(&b, &fb, false));
        let (te_a, te_b) = (pick(&a, &fa, true), pick(&b, &fb, true));
        let probe = LogisticProbe::fit(&tr_a, &tr_b);
        miss_a += te_a.axis_iter(Axis(0)).filter(|z| probe.decision(z.as_slice().unwrap()) >= 0.0).count();
        miss_b += te_b.axis_iter(Axis(0)).filter(|z| probe.decision(z.as_slice().unwrap()) < 0.0).count();
    }
    let err = 0.5 * (miss_a as f64 / a.nrows() as f64 + miss_b as f64 / b.nrows() as f64);
    Ok((2.0 * (1.0 - 2.0 * err)).clamp(0.0, 2.0))
}

/// Logistic regression fitted by Newton's method; positive decision = group B.
struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Weights followed by the bias.
    w: DVector<f64>,
}

impl LogisticProbe {
    fn fit(a: &Array2<f64>, b: &Array2<f64>) -> Self {
        let x = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same width");
        let (n, d) = x.dim();
        let mean: Vec<f64> = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let scale: Vec<f64> = x
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        let design = DMatrix::from_fn(n, d + 1, |i, j| if j == d { 1.0 } else { (x[[i, j]] - mean[j]) / scale[j] });
        let y = DVector::from_fn(n, |i, _| if i < a.nrows() { 0.0 } else { 1.0 });
        let mut w = DVector::zeros(d + 1);
        for _ in 0..PROBE_ITERS {
            let p = (&design * &w).map(|t| 1.0 / (1.0 + (-t).exp()));
            let mut grad = design.transpose() * (&p - &y);
            let mut hess = design.transpose() * DMatrix::from_diagonal(&p.map(|q| q * (1.0 - q))) * &design;
            for j in 0..d {
                grad[j] += PROBE_L2 * n as f64 * w[j];
                hess[(j, j)] += PROBE_L2 * n as f64;
            }
            hess[(d, d)] += 1e-9 * n as f64;
            let Some(chol) = hess.cholesky() else { break };
            let step = chol.solve(&grad);
            w -= &step;
            if step.amax() < 1e-10 {
                break;
            }
        }
        Self { mean, scale, w }
    }

    fn decision(&self, z: &[f64]) -> f64 {
        let d = self.mean.len();
        z.iter().enumerate().map(|(j, &v)| self.w[j] * (v - self.mean[j]) / self.scale[j]).sum::<f64>() + self.w[d]
    }
}

/// Pairwise probe divergences between groups of `emb` given by
/// `assignments`; `None` where a group is too small.
pub fn h_divergence_matrix(emb: &Array2<f64>, assignments: &[usize], groups: usize) -> Result<Vec<Vec<Option<f64>>>> {
    if emb.nrows() != assignments.len() {
        return Err(EvalError::LengthMismatch(emb.nrows(), assignments.len()));
    }
    let members: Vec<Array2<f64>> = (0..groups)
        .map(|g| {
            let idx: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i] == g).collect();
            emb.select(Axis(0), &idx)
        })
        .collect();
    let mut out = vec![vec![None; groups]; groups];
    for i in 0..groups {
        out[i][i] = Some(0.0);
        for j in i + 1..groups {
            match h_divergence_proxy(members[i].view(), members[j].view()) {
                Ok(v) => {
                    out[i][j] = Some(v);
                    out[j][i] = Some(v);
                }
                Err(EvalError::TooFewSamples { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Mean of the defined off-diagonal entries.
pub fn mean_pairwise(matrix: &[Vec<Option<f64>>]) -> Option<f64> {
    let vals: Vec<f64> = matrix
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j > i).filter_map(|(_, v)| *v))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Best accuracy over all one-to-one matchings between pseudo and planted
/// labels; unequal label counts are padded with empty labels.
pub fn domain_agreement(pseudo: &[usize], planted: &[usize]) -> Result<f64> {
    if pseudo.len() != planted.len() || pseudo.is_empty() {
        return Err(EvalError::LengthMismatch(pseudo.len(), planted.len()));
    }
    let index = |labels: &[usize]| {
        let mut map = BTreeMap::new();
        for &l in labels {
            let next = map.len();
            map.entry(l).or_insert(next);
        }
        map
    };
    let (pi, qi) = (index(pseudo), index(planted));
    let size = pi.len().max(qi.len());
    let mut counts = Matrix::new(size, size, 0i64);
    for (p, q) in pseudo.iter().zip(planted) {
        counts[(pi[p], qi[q])] += 1;
    }
    let (matched, _) = kuhn_munkres(&counts);
    Ok(matched as f64 / pseudo.len() as f64)
}
