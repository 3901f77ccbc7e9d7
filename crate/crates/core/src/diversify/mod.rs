// SPDX-License-Identifier: MIT OR Apache-2.0

//! Latent-domain training.
//!
//! One round of DIVERSIFY:
//!
//! 1. fit the shared featurizer and a `K·C`-way head on joint labels
//!    `s = d'·C + y` (all `d' = 0` in the first round);
//! 2. train the step-3 branch to predict the current `d'` while a
//!    gradient-reversed adversary strips class information from its
//!    embedding;
//! 3. re-estimate `d'` over the whole training set from that embedding:
//!    soft centroids from the step-3 domain-head posteriors,
//!    nearest-centroid assignment, one hard refinement;
//! 4. train the inference branch on `y` while a gradient-reversed adversary
//!    strips `d'` information.
//!
//! [`Relabel::BeforeStep3`] moves the re-estimation ahead of the step-3
//! epochs instead.
//!
//! ERM and DANN share the featurizer and inference branch layout.

mod latent;
mod model;
mod train;

pub use latent::{
    assign_domain_class_labels, assign_nearest, init_centroids_soft, init_centroids_soft_or_reseed,
    split_domain_class_label, update_centroids_hard, Distance, LatentError,
};
pub use model::{argmax, load_checkpoint, save_checkpoint, Branch, CheckpointError, CheckpointMeta, Model, ModelSpec};
pub use train::{
    baseline_dann, baseline_erm, grid_search_k, latent_update, predict, step2_gradients, step3_gradients,
    step4_gradients, step_params, train, train_with_observer, GridSearch, History, LatentState, LossPair,
    RoundRecord, StepKind, TrainError, TrainOutcome, Trainer,
};

use serde::{Deserialize, Serialize};

use crate::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Diversify,
    Erm,
    Dann,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Diversify => "diversify",
            Algorithm::Erm => "erm",
            Algorithm::Dann => "dann",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub conv_widths: [usize; 2],
    pub kernel: usize,
    /// Embedding width `b`.
    pub bottleneck: usize,
    pub disc_hidden: usize,
    /// Hidden layers of each adversary.
    pub disc_layers: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { conv_widths: [16, 32], kernel: 9, bottleneck: 256, disc_hidden: 256, disc_layers: 2, bn_momentum: 0.1, bn_eps: 1e-5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub rounds: usize,
    pub step2_epochs: usize,
    pub step3_epochs: usize,
    pub step4_epochs: usize,
    pub batch_size: usize,
    pub epoch_budget: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { rounds: 10, step2_epochs: 5, step3_epochs: 5, step4_epochs: 5, batch_size: 32, epoch_budget: 150 }
    }
}

impl Schedule {
    pub fn epochs_per_round(&self) -> usize {
        self.step2_epochs + self.step3_epochs + self.step4_epochs
    }
}

/// Position of the pseudo-domain update within a round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relabel {
    /// Between steps 2 and 3; step 3 fits the fresh labels.
    BeforeStep3,
    /// Between steps 3 and 4, on the freshly trained step-3 embedding;
    /// step 3 fits the previous round's labels.
    #[default]
    AfterStep3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Latent domains (DIVERSIFY) or random batch domains (DANN).
    pub k: usize,
    /// Gradient reversal strength of the step-3 class adversary.
    pub lambda1: f64,
    /// Gradient reversal strength of the step-4 (or DANN) domain adversary.
    pub lambda2: f64,
    pub optimizer: AdamConfig,
    pub schedule: Schedule,
    pub arch: ArchConfig,
    pub distance: Distance,
    /// Steps 3 and 4 update only their own layers, not the featurizer.
    pub freeze_featurizer_steps34: bool,
    /// Where in a round the pseudo domains are re-estimated.
    pub relabel: Relabel,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Diversify,
            k: 3,
            lambda1: 1.0,
            lambda2: 1.0,
            optimizer: AdamConfig::default(),
            schedule: Schedule::default(),
            arch: ArchConfig::default(),
            distance: Distance::default(),
            freeze_featurizer_steps34: false,
            relabel: Relabel::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=10).contains(&self.k) {
            return Err(format!("k = {} outside [1, 10]", self.k));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err("lambda values must be non-negative".into());
        }
        if !(self.optimizer.lr > 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return Err("learning rate must be positive and weight decay non-negative".into());
        }
        let s = &self.schedule;
        if s.batch_size == 0 || s.rounds == 0 {
            return Err("rounds and batch size must be positive".into());
        }
        if s.rounds * s.epochs_per_round() > s.epoch_budget {
            return Err(format!(
                "schedule uses {} epochs, budget is {}",
                s.rounds * s.epochs_per_round(),
                s.epoch_budget
            ));
        }
        Ok(())
    }
}
