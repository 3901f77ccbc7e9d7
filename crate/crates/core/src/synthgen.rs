// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic non-stationary multichannel series with planted latent domains.
//!
//! Every `(domain, class)` pair emits its own signal family:
//!
//! * the class fixes the waveform: base frequency, harmonic mix and a square
//!   or sawtooth envelope;
//! * the domain fixes a frequency multiplier, a per-channel gain profile, a
//!   per-channel offset profile and a phase shift;
//! * `drift_rate` moves the domain parameters linearly along each recording
//!   (temporal shift);
//! * the target set uses a held-out domain placed between training domains 0
//!   and 1 plus an offset, and adds `ood_extra` unseen classes.
//!
//! All numbers here are generator choices, not measurements.

use std::f64::consts::PI;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, NormalizeMode, RawSeries, SeriesLabels, WindowConfig};
use crate::rng::{substream, StreamRng};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("dataset lacks planted domain labels")]
    MissingPlantedLabels,
    #[error(transparent)]
    Data(#[from] data::DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of planted training domains.
    pub k_true: usize,
    /// ID class count.
    pub classes: usize,
    /// Classes that only appear in the target set.
    pub ood_extra: usize,
    pub channels: usize,
    pub series_length: usize,
    pub window: usize,
    pub step: usize,
    pub noise_sigma: f64,
    pub drift_rate: f64,
    /// Relative frequency change between consecutive planted domains.
    pub domain_freq_step: f64,
    /// Base-cycle spacing between consecutive classes (cycles per window).
    pub class_cycle_step: f64,
    /// Scale of the target domain's departure from the midpoint of domains 0 and 1.
    pub target_shift: f64,
    /// Recordings per training `(domain, class)` pair.
    pub series_per_pair: usize,
    /// Recordings per target class.
    pub target_series_per_class: usize,
    pub normalize: NormalizeMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k_true: 3,
            classes: 4,
            ood_extra: 1,
            channels: 3,
            series_length: 512,
            window: 64,
            step: 32,
            noise_sigma: 0.5,
            drift_rate: 0.3,
            domain_freq_step: 0.3,
            class_cycle_step: 1.0,
            target_shift: 1.0,
            series_per_pair: 11,
            target_series_per_class: 6,
            normalize: NormalizeMode::PerWindow,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.k_true < 1 {
            return bad("k_true must be at least 1");
        }
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.channels < 1 {
            return bad("channels must be at least 1");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(self.drift_rate >= 0.0) || !self.drift_rate.is_finite() {
            return bad("drift_rate must be finite and non-negative");
        }
        if !(self.domain_freq_step >= 0.0 && self.domain_freq_step.is_finite()) {
            return bad("domain_freq_step must be finite and non-negative");
        }
        if !(self.class_cycle_step > 0.0 && self.class_cycle_step.is_finite()) {
            return bad("class_cycle_step must be finite and positive");
        }
        if !self.target_shift.is_finite() {
            return bad("target_shift must be finite");
        }
        if self.series_per_pair < 1 {
            return bad("series_per_pair must be at least 1");
        }
        let win = self.window_config();
        if win.validate().is_err() {
            return bad("window/step must satisfy 1 <= step <= window");
        }
        if self.series_length < self.window {
            return bad("series_length shorter than window");
        }
        Ok(())
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig { window: self.window, step: self.step }
    }

    pub fn class_names(&self) -> Vec<String> {
        (1..=self.classes)
            .map(|c| format!("class{c}"))
            .chain((1..=self.ood_extra).map(|c| format!("ood{c}")))
            .collect()
    }
}

const DOMINANT_GAIN: f64 = 2.0;
const OFFSET_AMP: f64 = 1.2;

/// Parameters a latent domain imposes on every class.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainParams {
    pub freq_mult: f64,
    pub gains: Vec<f64>,
    pub offsets: Vec<f64>,
    pub phase: f64,
}

impl DomainParams {
    /// Structured parameters of training domain `k` out of `k_true`.
    pub fn planted(k: usize, cfg: &SynthConfig) -> Self {
        let (k_true, channels) = (cfg.k_true, cfg.channels);
        let frac = k as f64 / k_true as f64;
        let gains = (0..channels)
            .map(|ch| if ch == k % channels { DOMINANT_GAIN } else { 0.5 + 0.2 * ((ch + k) % 2) as f64 })
            .collect();
        let offsets = (0..channels)
            .map(|ch| OFFSET_AMP * (2.0 * PI * (frac + ch as f64 / channels as f64)).cos())
            .collect();
        Self { freq_mult: 1.0 + cfg.domain_freq_step * k as f64, gains, offsets, phase: 2.0 * PI * frac }
    }

    /// Held-out domain halfway between training domains 0 and 1, shifted.
    pub fn target(cfg: &SynthConfig) -> Self {
        let a = Self::planted(0, cfg);
        let b = if cfg.k_true > 1 { Self::planted(1, cfg) } else { a.clone() };
        let t = cfg.target_shift;
        let mid = |x: &[f64], y: &[f64], shift: f64| -> Vec<f64> {
            x.iter().zip(y).map(|(p, q)| 0.5 * (p + q) + shift).collect()
        };
        Self {
            freq_mult: 0.5 * (a.freq_mult + b.freq_mult) + 0.1 * t,
            gains: mid(&a.gains, &b.gains, 0.15 * t),
            offsets: mid(&a.offsets, &b.offsets, 0.25 * t),
            phase: 0.5 * (a.phase + b.phase) + 0.4 * t,
        }
    }

    /// Parameters at relative position `tau` in `[0, 1]` along a drifting recording.
    fn drifted(&self, drift: f64, tau: f64) -> Self {
        let s = drift * tau;
        Self {
            freq_mult: self.freq_mult * (1.0 + 0.2 * s),
            gains: self
                .gains
                .iter()
                .enumerate()
                .map(|(ch, g)| g * (1.0 + if ch % 2 == 0 { 0.5 } else { -0.3 } * s))
                .collect(),
            offsets: self
                .offsets
                .iter()
                .enumerate()
                .map(|(ch, o)| o + if ch % 2 == 0 { 1.0 } else { -1.0 } * s)
                .collect(),
            phase: self.phase,
        }
    }
}

/// Waveform of class index `c` (0-based over ID then OOD classes).
#[derive(Debug, Clone, Copy, PartialEq)]
struct ClassShape {
    cycles: f64,
    harmonic: f64,
    envelope: Envelope,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Envelope {
    Square,
    Sawtooth,
    Flat,
}

impl ClassShape {
    fn of(c: usize, id_classes: usize, cycle_step: f64) -> Self {
        if c >= id_classes {
            // unseen classes: distinct frequency band and a flat envelope
            let j = (c - id_classes) as f64;
            return Self { cycles: 1.1 + 0.7 * j, harmonic: 0.9, envelope: Envelope::Flat };
        }
        let envelope = match c % 3 {
            0 => Envelope::Square,
            1 => Envelope::Sawtooth,
            _ => Envelope::Flat,
        };
        Self { cycles: 2.0 + cycle_step * c as f64, harmonic: 0.2 + 0.25 * (c % 3) as f64, envelope }
    }

    fn envelope(&self, t: f64, period: f64) -> f64 {
        let u = (t / period).fract();
        match self.envelope {
            Envelope::Square => if u < 0.5 { 1.0 } else { 0.45 },
            Envelope::Sawtooth => 0.35 + 0.65 * u,
            Envelope::Flat => 1.0,
        }
    }
}

fn synth_series(
    cfg: &SynthConfig,
    domain: &DomainParams,
    class: usize,
    rng: &mut StreamRng,
) -> Array2<f32> {
    let shape = ClassShape::of(class, cfg.classes, cfg.class_cycle_step);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    // per-recording variation scales with the noise level so a noiseless
    // generator is fully deterministic
    let jitter = Normal::new(0.0, 0.2 * cfg.noise_sigma).expect("finite sigma");
    let subject_mult = 1.0 + jitter.sample(rng);
    let subject_phase = PI * jitter.sample(rng);
    let w = cfg.window as f64;
    let len = cfg.series_length;
    let mut values = Array2::zeros((cfg.channels, len));
    for t in 0..len {
        let tau = if len > 1 { t as f64 / (len - 1) as f64 } else { 0.0 };
        let p = domain.drifted(cfg.drift_rate, tau);
        let omega = 2.0 * PI * shape.cycles * p.freq_mult * subject_mult / w;
        let env = shape.envelope(t as f64, w / 2.0);
        for ch in 0..cfg.channels {
            let phase = p.phase + subject_phase + 0.7 * ch as f64;
            let wave = (omega * t as f64 + phase).sin() + shape.harmonic * (2.0 * omega * t as f64 + 1.3 * phase).sin();
            let mut v = p.gains[ch] * env * wave + p.offsets[ch];
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            values[[ch, t]] = v as f32;
        }
    }
    values
}

/// Raw recordings for the training domains and the held-out target domain.
pub fn generate_series(cfg: &SynthConfig) -> Result<(Vec<RawSeries>, Vec<RawSeries>), SynthError> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, "synth/train");
    let mut train = Vec::new();
    for k in 0..cfg.k_true {
        let params = DomainParams::planted(k, cfg);
        for c in 0..cfg.classes {
            for s in 0..cfg.series_per_pair {
                train.push(RawSeries {
                    values: synth_series(cfg, &params, c, &mut rng),
                    labels: SeriesLabels::Whole(c as u32 + 1),
                    subject_id: format!("d{k}-c{}-s{s}", c + 1),
                    planted_domain: Some(k),
                });
            }
        }
    }
    let mut rng = substream(cfg.seed, "synth/target");
    let params = DomainParams::target(cfg);
    let mut target = Vec::new();
    for c in 0..cfg.classes + cfg.ood_extra {
        for s in 0..cfg.target_series_per_class {
            target.push(RawSeries {
                values: synth_series(cfg, &params, c, &mut rng),
                labels: SeriesLabels::Whole(c as u32 + 1),
                subject_id: format!("target-c{}-s{s}", c + 1),
                planted_domain: Some(cfg.k_true),
            });
        }
    }
    Ok((train, target))
}

/// Windowed, normalized training set (ID classes only) and target set.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, Dataset), SynthError> {
    let (train, target) = generate_series(cfg)?;
    let win = cfg.window_config();
    let names = cfg.class_names();
    let train = data::prepare_instances(&train, win, cfg.normalize)?.instances;
    let target = data::prepare_instances(&target, win, cfg.normalize)?.instances;
    let train = Dataset::new(train, cfg.channels, cfg.window, names.clone(), cfg.classes)?;
    let target = Dataset::new(target, cfg.channels, cfg.window, names, cfg.classes)?;
    Ok((train, target))
}

/// Per-channel mean and variance of one window.
fn moment_features(x: &ndarray::Array3<f32>) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * x.shape()[0]);
    for lane in x.outer_iter() {
        let n = lane.len() as f64;
        let mean = lane.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = lane.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        out.push(mean);
        out.push(var);
    }
    out
}

/// Leave-one-out accuracy of a nearest-centroid classifier predicting the
/// planted domain from per-window mean/variance features.
pub fn separability_check(ds: &Dataset) -> Result<f64, SynthError> {
    let planted = ds.planted_domains().ok_or(SynthError::MissingPlantedLabels)?;
    if ds.is_empty() {
        return Err(SynthError::MissingPlantedLabels);
    }
    let feats: Vec<Vec<f64>> = ds.instances.iter().map(|i| moment_features(&i.x)).collect();
    let k = planted.iter().max().map_or(0, |m| m + 1);
    let dim = feats[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &d) in feats.iter().zip(&planted) {
        counts[d] += 1;
        for (s, v) in sums[d].iter_mut().zip(f) {
            *s += v;
        }
    }
    let mut correct = 0usize;
    for (f, &d) in feats.iter().zip(&planted) {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..k {
            let n = counts[j] - usize::from(j == d);
            if n == 0 {
                continue;
            }
            let dist: f64 = (0..dim)
                .map(|a| {
                    let own = if j == d { f[a] } else { 0.0 };
                    let c = (sums[j][a] - own) / n as f64;
                    (f[a] - c).powi(2)
                })
                .sum();
            if dist < best.0 {
                best = (dist, j);
            }
        }
        correct += usize::from(best.1 == d);
    }
    Ok(correct as f64 / ds.len() as f64)
}
