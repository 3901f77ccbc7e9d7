// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{cross_entropy, grl_backward, grl_forward, Adam, Mode, NnError, Param};
use crate::rng::{substream, StreamRng};

use super::latent::{init_centroids_soft_or_reseed, update_centroids_hard, assign_nearest, LatentError};
use super::model::{Model, ModelSpec};
use super::{Algorithm, Distance, Relabel, TrainConfig};

/// Rows per forward pass when sweeping a whole dataset in eval mode.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} in round {round}, {step:?}, batch {batch}")]
    NonFiniteLoss { round: usize, step: StepKind, batch: usize, loss: f64 },
    #[error("training set contains class {0} outside the ID range")]
    OodInTraining(u32),
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    /// Domain-class supervision.
    Step2,
    /// Latent domain characterization.
    Step3,
    /// Domain-invariant classification; also the only step of ERM and DANN.
    Step4,
}

/// Main and adversarial parts of a step's loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossPair {
    pub primary: f64,
    pub adversarial: f64,
}

impl LossPair {
    pub fn total(&self) -> f64 {
        self.primary + self.adversarial
    }
}

fn zero_all(model: &mut Model) {
    for p in model.params_mut() {
        p.zero_grad();
    }
}

/// Parameters a step's optimizer updates, in a fixed order.
pub fn step_params(model: &mut Model, kind: StepKind, freeze_featurizer: bool) -> Vec<&mut Param> {
    let freeze = freeze_featurizer && kind != StepKind::Step2 && model.spec.algorithm == Algorithm::Diversify;
    let mut out = if freeze { Vec::new() } else { model.featurizer.params_mut() };
    match kind {
        StepKind::Step2 => out.extend(model.step2.as_mut().map(|b| b.params_mut()).unwrap_or_default()),
        StepKind::Step3 => out.extend(model.step3.as_mut().map(|b| b.params_mut()).unwrap_or_default()),
        StepKind::Step4 => out.extend(model.main.params_mut()),
    }
    out
}

fn missing(name: &str) -> NnError {
    NnError::InvalidArch(format!("model has no {name} branch"))
}

/// Cross-entropy of the `K·C` head against joint labels (0-based); fills gradients.
pub fn step2_gradients(model: &mut Model, x: &Array3<f64>, joint: &[usize]) -> Result<f64, NnError> {
    zero_all(model);
    let (f, cache) = model.featurizer.forward(x, Mode::Train)?;
    let branch = model.step2.as_mut().ok_or_else(|| missing("step-2"))?;
    let e = branch.bottleneck.forward(&f)?;
    let logits = branch.head.forward(&e)?;
    let (loss, g) = cross_entropy(&logits, joint)?;
    let ge = branch.head.backward(&e, &g);
    let gf = branch.bottleneck.backward(&f, &ge);
    model.featurizer.backward(&cache, &gf, false);
    Ok(loss)
}

/// Domain loss on the step-3 head plus the class loss of the adversary
/// behind a gradient reversal of strength `lambda1`; fills gradients.
pub fn step3_gradients(
    model: &mut Model,
    x: &Array3<f64>,
    domains: &[usize],
    classes: &[usize],
    lambda1: f64,
    freeze_featurizer: bool,
) -> Result<LossPair, NnError> {
    zero_all(model);
    let (f, cache) = model.featurizer.forward(x, Mode::Train)?;
    let branch = model.step3.as_mut().ok_or_else(|| missing("step-3"))?;
    let adversary = branch.adversary.as_mut().ok_or_else(|| missing("step-3 adversary"))?;
    let e = branch.bottleneck.forward(&f)?;
    let logits = branch.head.forward(&e)?;
    let (domain_loss, gd) = cross_entropy(&logits, domains)?;
    let (adv_logits, adv_cache) = adversary.forward(&grl_forward(&e))?;
    let (class_loss, gc) = cross_entropy(&adv_logits, classes)?;
    let mut ge = branch.head.backward(&e, &gd);
    ge += &grl_backward(&adversary.backward(&adv_cache, &gc), lambda1);
    let gf = branch.bottleneck.backward(&f, &ge);
    if !freeze_featurizer {
        model.featurizer.backward(&cache, &gf, false);
    }
    Ok(LossPair { primary: domain_loss, adversarial: class_loss })
}

/// Class loss on the inference branch plus, when `domains` is given and the
/// branch has an adversary, the domain loss behind a gradient reversal of
/// strength `lambda2`; fills gradients.
pub fn step4_gradients(
    model: &mut Model,
    x: &Array3<f64>,
    classes: &[usize],
    domains: Option<&[usize]>,
    lambda2: f64,
    freeze_featurizer: bool,
) -> Result<LossPair, NnError> {
    zero_all(model);
    let (f, cache) = model.featurizer.forward(x, Mode::Train)?;
    let branch = &mut model.main;
    let e = branch.bottleneck.forward(&f)?;
    let logits = branch.head.forward(&e)?;
    let (class_loss, g) = cross_entropy(&logits, classes)?;
    let mut ge = branch.head.backward(&e, &g);
    let mut domain_loss = 0.0;
    if let (Some(adversary), Some(domains)) = (branch.adversary.as_mut(), domains) {
        let (adv_logits, adv_cache) = adversary.forward(&grl_forward(&e))?;
        let (loss, gd) = cross_entropy(&adv_logits, domains)?;
        domain_loss = loss;
        ge += &grl_backward(&adversary.backward(&adv_cache, &gd), lambda2);
    }
    let gf = branch.bottleneck.backward(&f, &ge);
    if !freeze_featurizer {
        model.featurizer.backward(&cache, &gf, false);
    }
    Ok(LossPair { primary: class_loss, adversarial: domain_loss })
}

/// Pseudo-domain estimate over a full dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub k: usize,
    /// Hard-refined centroids, `[K, b]`.
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
}

/// Soft centroids from the step-3 domain posteriors, nearest-centroid
/// assignment, then one hard refinement; eval mode throughout.
pub fn latent_update(model: &Model, inputs: &Array3<f64>, distance: Distance) -> Result<LatentState, TrainError> {
    let n = inputs.dim().0;
    if n == 0 {
        return Err(TrainError::Empty("training"));
    }
    let mut emb_parts = Vec::new();
    let mut prob_parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let chunk = inputs.slice(ndarray::s![start..(start + EVAL_CHUNK).min(n), .., ..]).to_owned();
        let (e, p) = model.latent_view(&chunk)?;
        emb_parts.push(e);
        prob_parts.push(p);
    }
    let emb = ndarray::concatenate(Axis(0), &emb_parts.iter().map(|a| a.view()).collect::<Vec<_>>()).expect("same width");
    let probs = ndarray::concatenate(Axis(0), &prob_parts.iter().map(|a| a.view()).collect::<Vec<_>>()).expect("same width");
    let soft = init_centroids_soft_or_reseed(&emb, &probs, distance);
    let initial = assign_nearest(&emb, &soft, distance);
    let (centroids, assignments) = update_centroids_hard(&emb, &initial, model.spec.k, distance);
    Ok(LatentState { k: model.spec.k, centroids, assignments })
}

/// Class predictions (1-based) and probability vectors of the inference branch.
pub fn predict(model: &Model, x: &Array3<f64>) -> Result<Vec<(u32, ndarray::Array1<f64>)>, NnError> {
    model.predict(x)
}

fn predict_dataset(model: &Model, inputs: &Array3<f64>) -> Result<Vec<u32>, NnError> {
    let n = inputs.dim().0;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let chunk = inputs.slice(ndarray::s![start..(start + EVAL_CHUNK).min(n), .., ..]).to_owned();
        out.extend(model.predict(&chunk)?.into_iter().map(|(c, _)| c));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub primary: f64,
    pub adversarial: f64,
    pub total: f64,
}

impl From<LossPair> for StepSummary {
    fn from(p: LossPair) -> Self {
        Self { primary: p.primary, adversarial: p.adversarial, total: p.total() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean batch losses of the round's epochs per step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step2: Option<StepSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step3: Option<StepSummary>,
    pub step4: StepSummary,
    pub val_acc: f64,
    /// Pseudo-domain assignments used by steps 3 and 4 of this round.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assignments: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_sizes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub algorithm: Algorithm,
    pub k: usize,
    pub rounds: Vec<RoundRecord>,
    pub best_round: Option<usize>,
    pub best_val_acc: f64,
    pub steps: u64,
}

impl History {
    /// Per-round step-2 losses, DIVERSIFY only.
    pub fn step2_losses(&self) -> Vec<f64> {
        self.rounds.iter().filter_map(|r| r.step2.map(|s| s.total)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation accuracy.
    pub model: Model,
    /// Parameters after the last round.
    pub last_model: Model,
    pub history: History,
    /// Pseudo domains of the last round (all zeros for ERM and DANN).
    pub assignments: Vec<usize>,
}

/// Stateful driver; exposes single optimizer steps so trajectories can be compared.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model,
    /// Current pseudo domain per training instance.
    pub domains: Vec<usize>,
    inputs: Array3<f64>,
    classes: Vec<usize>,
    val: &'a Dataset,
    val_inputs: Array3<f64>,
    opt2: Adam,
    opt3: Adam,
    opt4: Adam,
    batch_rng: StreamRng,
    dann_rng: StreamRng,
    history: History,
    best: Option<Model>,
    round: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(train: &'a Dataset, val: &'a Dataset, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate().map_err(TrainError::InvalidConfig)?;
        if train.is_empty() {
            return Err(TrainError::Empty("training"));
        }
        if val.is_empty() {
            return Err(TrainError::Empty("validation"));
        }
        let c = train.num_id_classes;
        if let Some(inst) = train.instances.iter().find(|i| i.y as usize > c) {
            return Err(TrainError::OodInTraining(inst.y));
        }
        let spec = ModelSpec {
            algorithm: cfg.algorithm,
            channels: train.channels,
            window: train.window,
            num_classes: c,
            k: cfg.k,
            arch: cfg.arch,
        };
        let model = Model::new(spec, cfg.seed)?;
        let history = History {
            algorithm: cfg.algorithm,
            k: cfg.k,
            rounds: Vec::new(),
            best_round: None,
            best_val_acc: f64::NEG_INFINITY,
            steps: 0,
        };
        Ok(Self {
            model,
            domains: vec![0; train.len()],
            inputs: train.all_inputs(),
            classes: train.instances.iter().map(|i| i.y as usize - 1).collect(),
            val,
            val_inputs: val.all_inputs(),
            opt2: Adam::new(cfg.optimizer),
            opt3: Adam::new(cfg.optimizer),
            opt4: Adam::new(cfg.optimizer),
            batch_rng: substream(cfg.seed, "train/batches"),
            dann_rng: substream(cfg.seed, "train/dann-domains"),
            history,
            best: None,
            round: 0,
            cfg,
        })
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    /// Shuffled mini-batches covering the training set once.
    pub fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.classes.len()).collect();
        order.shuffle(&mut self.batch_rng);
        order.chunks(self.cfg.schedule.batch_size).map(|c| c.to_vec()).collect()
    }

    /// One optimizer step of `kind` on the given instances.
    pub fn step(&mut self, kind: StepKind, batch: &[usize]) -> Result<LossPair, TrainError> {
        let x = self.inputs.select(Axis(0), batch);
        let classes: Vec<usize> = batch.iter().map(|&i| self.classes[i]).collect();
        let freeze = self.cfg.freeze_featurizer_steps34;
        let c = self.model.num_classes();
        let (loss, opt) = match kind {
            StepKind::Step2 => {
                let joint: Vec<usize> = batch.iter().map(|&i| self.domains[i] * c + self.classes[i]).collect();
                let l = step2_gradients(&mut self.model, &x, &joint)?;
                (LossPair { primary: l, adversarial: 0.0 }, &mut self.opt2)
            }
            StepKind::Step3 => {
                let domains: Vec<usize> = batch.iter().map(|&i| self.domains[i]).collect();
                let l = step3_gradients(&mut self.model, &x, &domains, &classes, self.cfg.lambda1, freeze)?;
                (l, &mut self.opt3)
            }
            StepKind::Step4 => {
                let domains: Option<Vec<usize>> = match self.cfg.algorithm {
                    Algorithm::Diversify => Some(batch.iter().map(|&i| self.domains[i]).collect()),
                    Algorithm::Dann => Some(batch.iter().map(|_| self.dann_rng.random_range(0..self.cfg.k)).collect()),
                    Algorithm::Erm => None,
                };
                let l = step4_gradients(&mut self.model, &x, &classes, domains.as_deref(), self.cfg.lambda2, freeze)?;
                (l, &mut self.opt4)
            }
        };
        if !loss.total().is_finite() {
            return Err(TrainError::NonFiniteLoss { round: self.round, step: kind, batch: 0, loss: loss.total() });
        }
        let mut params = step_params(&mut self.model, kind, freeze);
        opt.step(&mut params)?;
        self.history.steps += 1;
        Ok(loss)
    }

    fn epochs(&mut self, kind: StepKind, epochs: usize) -> Result<Option<LossPair>, TrainError> {
        if epochs == 0 {
            return Ok(None);
        }
        let (mut sum, mut count) = (LossPair::default(), 0usize);
        for _ in 0..epochs {
            for (b, batch) in self.epoch_batches().into_iter().enumerate() {
                let l = self.step(kind, &batch).map_err(|e| match e {
                    TrainError::NonFiniteLoss { round, step, loss, .. } => {
                        TrainError::NonFiniteLoss { round, step, batch: b, loss }
                    }
                    other => other,
                })?;
                sum.primary += l.primary;
                sum.adversarial += l.adversarial;
                count += 1;
            }
        }
        Ok(Some(LossPair { primary: sum.primary / count as f64, adversarial: sum.adversarial / count as f64 }))
    }

    /// Recomputes pseudo domains over the full training set.
    pub fn refresh_domains(&mut self) -> Result<LatentState, TrainError> {
        let state = latent_update(&self.model, &self.inputs, self.cfg.distance)?;
        self.domains = state.assignments.clone();
        Ok(state)
    }

    pub fn validation_accuracy(&self) -> Result<f64, TrainError> {
        let preds = predict_dataset(&self.model, &self.val_inputs)?;
        let hits = preds.iter().zip(&self.val.instances).filter(|(p, i)| **p == i.y).count();
        Ok(hits as f64 / preds.len() as f64)
    }

    /// Runs one full round and records it.
    pub fn round(&mut self) -> Result<&RoundRecord, TrainError> {
        let s = self.cfg.schedule;
        let record = match self.cfg.algorithm {
            Algorithm::Diversify => {
                let step2 = self.epochs(StepKind::Step2, s.step2_epochs)?;
                if self.cfg.relabel == Relabel::BeforeStep3 {
                    self.refresh_domains()?;
                }
                let step3 = self.epochs(StepKind::Step3, s.step3_epochs)?;
                if self.cfg.relabel == Relabel::AfterStep3 {
                    self.refresh_domains()?;
                }
                let step4 = self.epochs(StepKind::Step4, s.step4_epochs)?;
                let mut sizes = vec![0; self.cfg.k];
                for &d in &self.domains {
                    sizes[d] += 1;
                }
                RoundRecord {
                    round: self.round,
                    step2: step2.map(Into::into),
                    step3: step3.map(Into::into),
                    step4: step4.unwrap_or_default().into(),
                    val_acc: 0.0,
                    assignments: Some(self.domains.clone()),
                    domain_sizes: Some(sizes),
                }
            }
            Algorithm::Erm | Algorithm::Dann => {
                let step4 = self.epochs(StepKind::Step4, s.epochs_per_round())?;
                RoundRecord {
                    round: self.round,
                    step2: None,
                    step3: None,
                    step4: step4.unwrap_or_default().into(),
                    val_acc: 0.0,
                    assignments: None,
                    domain_sizes: None,
                }
            }
        };
        let val_acc = self.validation_accuracy()?;
        if val_acc > self.history.best_val_acc {
            self.history.best_val_acc = val_acc;
            self.history.best_round = Some(self.round);
            self.best = Some(self.model.clone());
        }
        self.history.rounds.push(RoundRecord { val_acc, ..record });
        self.round += 1;
        Ok(self.history.rounds.last().expect("just pushed"))
    }

    pub fn finish(self) -> TrainOutcome {
        let last_model = self.model;
        TrainOutcome {
            model: self.best.unwrap_or_else(|| last_model.clone()),
            last_model,
            history: self.history,
            assignments: self.domains,
        }
    }
}

/// Full schedule; `observer` sees the history after every round.
pub fn train_with_observer(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&History),
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(train, val, cfg.clone())?;
    for _ in 0..cfg.schedule.rounds {
        let r = trainer.round()?;
        log::info!(
            "{} round {}: step4 loss {:.4}, val acc {:.4}",
            cfg.algorithm,
            r.round,
            r.step4.total,
            r.val_acc
        );
        observer(trainer.history());
    }
    Ok(trainer.finish())
}

pub fn train(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_observer(train, val, cfg, &mut |_| {})
}

/// Supervised cross-entropy on the shared backbone only.
pub fn baseline_erm(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    self::train(train, val, &TrainConfig { algorithm: Algorithm::Erm, ..cfg.clone() })
}

/// Class loss plus a gradient-reversed domain loss against random per-batch domain labels.
pub fn baseline_dann(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    self::train(train, val, &TrainConfig { algorithm: Algorithm::Dann, ..cfg.clone() })
}

#[derive(Debug, Clone)]
pub struct GridSearch {
    pub best_k: usize,
    /// `(k, best validation accuracy)` per candidate.
    pub scores: Vec<(usize, f64)>,
    pub outcome: TrainOutcome,
}

/// Trains once per candidate `k` and keeps the best validation accuracy
/// (ties go to the smaller `k`).
pub fn grid_search_k(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    candidates: impl IntoIterator<Item = usize>,
) -> Result<GridSearch, TrainError> {
    let mut best: Option<(usize, TrainOutcome)> = None;
    let mut scores = Vec::new();
    for k in candidates {
        let outcome = self::train(train, val, &TrainConfig { k, ..cfg.clone() })?;
        let acc = outcome.history.best_val_acc;
        scores.push((k, acc));
        if best.as_ref().is_none_or(|(_, b)| acc > b.history.best_val_acc) {
            best = Some((k, outcome));
        }
    }
    let (best_k, outcome) = best.ok_or_else(|| TrainError::InvalidConfig("empty K grid".into()))?;
    Ok(GridSearch { best_k, scores, outcome })
}
