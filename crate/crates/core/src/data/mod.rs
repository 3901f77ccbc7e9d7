// SPDX-License-Identifier: MIT OR Apache-2.0

//! Windowed multichannel datasets.
//!
//! Class labels are 1-based throughout (`1..=C`). A [`Dataset`] always orders
//! its classes so that the in-distribution classes come first
//! (`1..=num_id_classes`) and the OOD-only classes occupy the tail.

mod io;

pub use io::{load_dataset, save_dataset, Manifest, MAGIC};

use std::collections::BTreeSet;

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::substream;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("series length {length} is shorter than window {window}")]
    LengthTooShort { length: usize, window: usize },
    #[error("window at timestep {start} spans labels {first} and {second}")]
    LabelSpanConflict { start: usize, first: u32, second: u32 },
    #[error("invalid window config (window {window}, step {step})")]
    InvalidWindow { window: usize, step: usize },
    #[error("non-finite input value at index {0}")]
    NonFiniteInput(usize),
    #[error("split leaves an empty side ({train} train / {val} validation)")]
    EmptySplit { train: usize, val: usize },
    #[error("only {remaining} ID classes would remain, need at least 2")]
    TooFewIdClasses { remaining: usize },
    #[error("class {0} is not defined by the dataset")]
    UnknownClass(u32),
    #[error("OOD class {0} present in a training split")]
    OodInTraining(u32),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: String, expected: usize, found: usize },
    #[error("inconsistent instance {index}: {reason}")]
    InconsistentInstance { index: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Labels attached to a raw recording.
#[derive(Debug, Clone, PartialEq)]
pub enum SeriesLabels {
    /// One label for the whole series.
    Whole(u32),
    /// One label per timestep.
    PerStep(Vec<u32>),
}

impl SeriesLabels {
    fn at(&self, t: usize) -> u32 {
        match self {
            SeriesLabels::Whole(y) => *y,
            SeriesLabels::PerStep(ys) => ys[t],
        }
    }
}

/// A multichannel recording before windowing.
#[derive(Debug, Clone)]
pub struct RawSeries {
    /// `[channels, length]`.
    pub values: ndarray::Array2<f32>,
    pub labels: SeriesLabels,
    pub subject_id: String,
    /// Ground-truth domain, only known for synthetic data.
    pub planted_domain: Option<usize>,
}

impl RawSeries {
    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One windowed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// `[channels, 1, window]`.
    pub x: Array3<f32>,
    pub y: u32,
    pub d_pseudo: Option<usize>,
    pub d_planted: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window: usize,
    pub step: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window: 200, step: 100 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.step == 0 || self.step > self.window {
            return Err(DataError::InvalidWindow { window: self.window, step: self.step });
        }
        Ok(())
    }

    /// Number of full windows that fit in `length` timesteps.
    pub fn count(&self, length: usize) -> usize {
        if length < self.window {
            0
        } else {
            (length - self.window) / self.step + 1
        }
    }
}

/// What to do with a window whose span carries more than one label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SpanPolicy {
    #[default]
    Drop,
    Reject,
}

#[derive(Debug, Clone)]
pub struct Windowed {
    pub instances: Vec<Instance>,
    /// Windows discarded because they crossed a label boundary.
    pub dropped: usize,
}

pub fn slide_windows(series: &RawSeries, cfg: WindowConfig) -> Result<Windowed> {
    slide_windows_with(series, cfg, SpanPolicy::Drop)
}

pub fn slide_windows_with(series: &RawSeries, cfg: WindowConfig, policy: SpanPolicy) -> Result<Windowed> {
    cfg.validate()?;
    let length = series.len();
    if length < cfg.window {
        return Err(DataError::LengthTooShort { length, window: cfg.window });
    }
    if let SeriesLabels::PerStep(ys) = &series.labels {
        if ys.len() != length {
            return Err(DataError::DimensionMismatch {
                what: "per-step labels".into(),
                expected: length,
                found: ys.len(),
            });
        }
    }
    let channels = series.channels();
    let mut instances = Vec::with_capacity(cfg.count(length));
    let mut dropped = 0;
    for i in 0..cfg.count(length) {
        let start = i * cfg.step;
        let first = series.labels.at(start);
        let conflict = (start + 1..start + cfg.window)
            .map(|t| series.labels.at(t))
            .find(|&y| y != first);
        if let Some(second) = conflict {
            match policy {
                SpanPolicy::Drop => {
                    dropped += 1;
                    continue;
                }
                SpanPolicy::Reject => return Err(DataError::LabelSpanConflict { start, first, second }),
            }
        }
        let span = series.values.slice(ndarray::s![.., start..start + cfg.window]);
        let x = span.to_owned().into_shape_with_order((channels, 1, cfg.window)).expect("contiguous window");
        instances.push(Instance { x, y: first, d_pseudo: None, d_planted: series.planted_domain });
    }
    Ok(Windowed { instances, dropped })
}

/// Min-max scaling of every value in `x` onto `[0, 1]`.
///
/// A constant input maps to all zeros.
pub fn minmax_normalize(x: &[f32]) -> Result<Vec<f32>> {
    let (lo, hi) = finite_range(x)?;
    Ok(minmax_with_range(x, lo, hi))
}

fn finite_range(x: &[f32]) -> Result<(f32, f32)> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(DataError::NonFiniteInput(i));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Scales with externally supplied statistics; values outside `[lo, hi]` are clamped.
pub fn minmax_with_range(x: &[f32], lo: f32, hi: f32) -> Vec<f32> {
    let span = f64::from(hi) - f64::from(lo);
    if !(span > 0.0) {
        return vec![0.0; x.len()];
    }
    x.iter()
        .map(|&v| (((f64::from(v) - f64::from(lo)) / span) as f32).clamp(0.0, 1.0))
        .collect()
}

/// Where min/max statistics are taken from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    /// Each window on its own.
    #[default]
    PerWindow,
    /// One range per recording, applied before windowing.
    PerSeries,
    /// One range over every window of the dataset.
    Global,
}

/// Normalizes windows in place according to `mode`. `PerSeries` must be
/// handled before windowing (see [`normalize_series`]) and is a no-op here.
pub fn normalize_instances(instances: &mut [Instance], mode: NormalizeMode) -> Result<()> {
    match mode {
        NormalizeMode::PerWindow => {
            for inst in instances.iter_mut() {
                let flat = minmax_normalize(inst.x.as_slice().expect("standard layout"))?;
                inst.x.as_slice_mut().expect("standard layout").copy_from_slice(&flat);
            }
        }
        NormalizeMode::PerSeries => {}
        NormalizeMode::Global => {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for inst in instances.iter() {
                let (a, b) = finite_range(inst.x.as_slice().expect("standard layout"))?;
                lo = lo.min(a);
                hi = hi.max(b);
            }
            for inst in instances.iter_mut() {
                let flat = minmax_with_range(inst.x.as_slice().expect("standard layout"), lo, hi);
                inst.x.as_slice_mut().expect("standard layout").copy_from_slice(&flat);
            }
        }
    }
    Ok(())
}

pub fn normalize_series(series: &mut RawSeries) -> Result<()> {
    let flat: Vec<f32> = series.values.iter().copied().collect();
    let scaled = minmax_normalize(&flat)?;
    for (dst, src) in series.values.iter_mut().zip(scaled) {
        *dst = src;
    }
    Ok(())
}

/// Windows and normalizes a batch of recordings into instances.
pub fn prepare_instances(series: &[RawSeries], cfg: WindowConfig, mode: NormalizeMode) -> Result<Windowed> {
    let mut instances = Vec::new();
    let mut dropped = 0;
    for s in series {
        let w = if mode == NormalizeMode::PerSeries {
            let mut s = s.clone();
            normalize_series(&mut s)?;
            slide_windows(&s, cfg)?
        } else {
            slide_windows(s, cfg)?
        };
        dropped += w.dropped;
        instances.extend(w.instances);
    }
    normalize_instances(&mut instances, mode)?;
    Ok(Windowed { instances, dropped })
}

/// An ordered collection of uniformly shaped instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub channels: usize,
    pub window: usize,
    pub num_id_classes: usize,
    pub class_names: Vec<String>,
    /// Always `num_id_classes + 1 ..= class_names.len()`.
    pub ood_classes: BTreeSet<u32>,
}

impl Dataset {
    /// Builds a dataset whose first `num_id_classes` classes are in-distribution.
    pub fn new(
        instances: Vec<Instance>,
        channels: usize,
        window: usize,
        class_names: Vec<String>,
        num_id_classes: usize,
    ) -> Result<Self> {
        if num_id_classes < 2 {
            return Err(DataError::TooFewIdClasses { remaining: num_id_classes });
        }
        if num_id_classes > class_names.len() {
            return Err(DataError::DimensionMismatch {
                what: "class names".into(),
                expected: num_id_classes,
                found: class_names.len(),
            });
        }
        let ood_classes = (num_id_classes as u32 + 1..=class_names.len() as u32).collect();
        let ds = Self { instances, channels, window, num_id_classes, class_names, ood_classes };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        let shape = [self.channels, 1, self.window];
        let total = self.class_names.len() as u32;
        for (index, inst) in self.instances.iter().enumerate() {
            if inst.x.shape() != shape {
                return Err(DataError::InconsistentInstance {
                    index,
                    reason: format!("shape {:?}, expected {:?}", inst.x.shape(), shape),
                });
            }
            if inst.y == 0 || inst.y > total {
                return Err(DataError::UnknownClass(inst.y));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_ood(&self, inst: &Instance) -> bool {
        self.ood_classes.contains(&inst.y)
    }

    pub fn labels(&self) -> Vec<u32> {
        self.instances.iter().map(|i| i.y).collect()
    }

    pub fn planted_domains(&self) -> Option<Vec<usize>> {
        self.instances.iter().map(|i| i.d_planted).collect()
    }

    /// Same metadata, chosen instances.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            channels: self.channels,
            window: self.window,
            num_id_classes: self.num_id_classes,
            class_names: self.class_names.clone(),
            ood_classes: self.ood_classes.clone(),
        }
    }

    /// Stacks the selected inputs into a `[batch, channels, window]` tensor.
    pub fn batch_inputs(&self, indices: &[usize]) -> ndarray::Array3<f64> {
        let mut out = ndarray::Array3::zeros((indices.len(), self.channels, self.window));
        for (row, &i) in indices.iter().enumerate() {
            let x = self.instances[i].x.index_axis(Axis(1), 0);
            out.index_axis_mut(Axis(0), row).assign(&x.mapv(f64::from));
        }
        out
    }

    pub fn all_inputs(&self) -> ndarray::Array3<f64> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch_inputs(&idx)
    }

    /// Number of instances per ID class, index `c - 1`.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.total_classes()];
        for inst in &self.instances {
            counts[inst.y as usize - 1] += 1;
        }
        counts
    }
}

/// Seeded shuffle followed by a `ratio : 1 - ratio` cut. Returns index lists.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_train = if ratio > 0.0 && ratio < 1.0 { (ratio * n as f64).round() as usize } else if ratio >= 1.0 { n } else { 0 };
    if n_train == 0 || n_train >= n {
        return Err(DataError::EmptySplit { train: n_train.min(n), val: n - n_train.min(n) });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, "data/split"));
    let val = order.split_off(n_train);
    Ok((order, val))
}

/// Training/validation split of a pool that must hold ID classes only.
pub fn split_train_val(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if let Some(inst) = ds.instances.iter().find(|i| ds.is_ood(i)) {
        return Err(DataError::OodInTraining(inst.y));
    }
    let (train, val) = split_indices(ds.len(), ratio, seed)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Declares `ood_classes` (indices into `ds.class_names`) as test-only.
///
/// Classes are renumbered so the remaining ID classes become `1..=C_id` in
/// their original order and the OOD classes follow. Returns the training pool
/// (ID instances only) and the full relabeled test set.
pub fn partition_id_ood(ds: &Dataset, ood_classes: &BTreeSet<u32>) -> Result<(Dataset, Dataset)> {
    let total = ds.total_classes() as u32;
    if let Some(&bad) = ood_classes.iter().find(|&&c| c == 0 || c > total) {
        return Err(DataError::UnknownClass(bad));
    }
    let remaining = total as usize - ood_classes.len();
    if remaining < 2 {
        return Err(DataError::TooFewIdClasses { remaining });
    }
    let order: Vec<u32> = (1..=total)
        .filter(|c| !ood_classes.contains(c))
        .chain(ood_classes.iter().copied())
        .collect();
    let mut remap = vec![0u32; total as usize + 1];
    for (new, &old) in order.iter().enumerate() {
        remap[old as usize] = new as u32 + 1;
    }
    let class_names: Vec<String> = order.iter().map(|&c| ds.class_names[c as usize - 1].clone()).collect();
    let relabeled: Vec<Instance> = ds
        .instances
        .iter()
        .map(|inst| Instance { y: remap[inst.y as usize], ..inst.clone() })
        .collect();
    let test = Dataset::new(relabeled, ds.channels, ds.window, class_names, remaining)?;
    let train_idx: Vec<usize> = (0..test.len()).filter(|&i| !test.is_ood(&test.instances[i])).collect();
    Ok((test.subset(&train_idx), test))
}
