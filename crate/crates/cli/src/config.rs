// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use divts::detect::{DetectConfig, Ridge};
use divts::diversify::{Algorithm, ArchConfig, Distance, Relabel, Schedule, TrainConfig};
use divts::nn::AdamConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::Failure;

/// Everything a run needs, persisted as `config.json` once resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub k: usize,
    /// Inclusive `[lo, hi]` range searched for `k`.
    pub k_grid: Option<[usize; 2]>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    /// ODIN input step.
    pub epsilon: f64,
    /// Validation quantile used as the default detection threshold.
    pub quantile: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub arch: ArchConfig,
    pub distance: Distance,
    pub relabel: Relabel,
    pub freeze_featurizer_steps34: bool,
    /// Fraction of the training pool used for fitting; the rest validates.
    pub val_ratio: f64,
    pub seed: u64,
    /// Training dataset directory.
    pub data: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DetectConfig::default();
        Self {
            algorithm: t.algorithm,
            k: t.k,
            k_grid: None,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            temperature: d.temperature,
            epsilon: d.epsilon,
            quantile: d.quantile,
            lr: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            schedule: t.schedule,
            arch: t.arch,
            distance: t.distance,
            relabel: t.relabel,
            freeze_featurizer_steps34: t.freeze_featurizer_steps34,
            val_ratio: 0.8,
            seed: t.seed,
            data: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        self.train_config().validate().map_err(Failure::Usage)?;
        if let Some([lo, hi]) = self.k_grid {
            if lo < 1 || hi > 10 || lo > hi {
                return Err(Failure::Usage(format!("k grid {lo}:{hi} must lie within 1..=10")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Failure::Usage(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Failure::Usage(format!("eps must be non-negative, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.quantile) {
            return Err(Failure::Usage(format!("quantile must lie in [0, 1], got {}", self.quantile)));
        }
        if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
            return Err(Failure::Usage(format!("val ratio must lie in (0, 1), got {}", self.val_ratio)));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            algorithm: self.algorithm,
            k: self.k,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            optimizer: AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() },
            schedule: self.schedule,
            arch: self.arch,
            distance: self.distance,
            freeze_featurizer_steps34: self.freeze_featurizer_steps34,
            relabel: self.relabel,
            seed: self.seed,
        }
    }

    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig { temperature: self.temperature, epsilon: self.epsilon, quantile: self.quantile, ridge: Ridge::Auto }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Defaults, overlaid by the optional JSON file, overlaid by `flags`
/// (a JSON object holding only the flags that were given).
pub fn resolve<T>(file: Option<&Path>, flags: Value) -> Result<T, Failure>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let mut value = serde_json::to_value(T::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        merge(&mut value, parsed);
    }
    merge(&mut value, flags);
    serde_json::from_value(value).map_err(|e| Failure::Usage(format!("config: {e}")))
}

/// Parses `lo:hi`.
pub fn parse_k_grid(s: &str) -> Result<[usize; 2], String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected LO:HI, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok([parse(lo)?, parse(hi)?])
}
