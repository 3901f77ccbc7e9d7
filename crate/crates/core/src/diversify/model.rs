// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::{
    cross_entropy, softmax_rows, FeatureConfig, FeatureExtractor, Linear, Mlp, Mode, NnError, Param,
};
use crate::rng::substream;

use super::{Algorithm, ArchConfig};

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub algorithm: Algorithm,
    pub channels: usize,
    pub window: usize,
    pub num_classes: usize,
    /// Latent domains (DIVERSIFY) or random batch domains (DANN).
    pub k: usize,
    pub arch: ArchConfig,
}

impl ModelSpec {
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            in_channels: self.channels,
            window: self.window,
            widths: self.arch.conv_widths,
            kernel: self.arch.kernel,
            bn_momentum: self.arch.bn_momentum,
            bn_eps: self.arch.bn_eps,
        }
    }
}

/// Bottleneck, head and optional gradient-reversed adversary of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub bottleneck: Linear,
    pub head: Linear,
    pub adversary: Option<Mlp>,
}

impl Branch {
    fn new(spec: &ModelSpec, seed: u64, name: &str, outputs: usize, adversary_outputs: Option<usize>) -> Self {
        let input = spec.feature_config().output_dim().expect("validated spec");
        let b = spec.arch.bottleneck;
        let bottleneck = Linear::new(input, b, &mut substream(seed, &format!("init/{name}/bottleneck")));
        let head = Linear::new(b, outputs, &mut substream(seed, &format!("init/{name}/head")));
        let adversary = adversary_outputs.map(|out| {
            let mut widths = vec![b];
            widths.extend(std::iter::repeat_n(spec.arch.disc_hidden, spec.arch.disc_layers));
            widths.push(out);
            Mlp::new(&widths, &mut substream(seed, &format!("init/{name}/adversary")))
        });
        Self { bottleneck, head, adversary }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.bottleneck.params_mut();
        out.extend(self.head.params_mut());
        if let Some(adv) = self.adversary.as_mut() {
            out.extend(adv.params_mut());
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.bottleneck.params();
        out.extend(self.head.params());
        if let Some(adv) = self.adversary.as_ref() {
            out.extend(adv.params());
        }
        out
    }

    /// Bottleneck and head only, without the adversary.
    pub fn core_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.bottleneck.params_mut();
        out.extend(self.head.params_mut());
        out
    }
}

/// Shared feature extractor plus the step-owned branches.
///
/// `main` is the inference branch (step 4 for DIVERSIFY, the only branch
/// for ERM and DANN). `step2` carries the `K·C` domain-class head; `step3`
/// carries the `K`-way domain head and the class adversary.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub featurizer: FeatureExtractor,
    pub step2: Option<Branch>,
    pub step3: Option<Branch>,
    pub main: Branch,
}

impl Model {
    /// Seeded initialization; each part draws from its own named stream so
    /// that ERM, DANN and DIVERSIFY share the featurizer and main branch
    /// initialization under one seed.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, NnError> {
        if spec.num_classes < 2 {
            return Err(NnError::InvalidArch("need at least 2 classes".into()));
        }
        if spec.k < 1 {
            return Err(NnError::InvalidArch("need at least 1 latent domain".into()));
        }
        let featurizer = FeatureExtractor::new(spec.feature_config(), &mut substream(seed, "init/featurizer"))?;
        let (c, k) = (spec.num_classes, spec.k);
        let (step2, step3, main) = match spec.algorithm {
            Algorithm::Diversify => (
                Some(Branch::new(&spec, seed, "step2", k * c, None)),
                Some(Branch::new(&spec, seed, "step3", k, Some(c))),
                Branch::new(&spec, seed, "main", c, Some(k)),
            ),
            Algorithm::Erm => (None, None, Branch::new(&spec, seed, "main", c, None)),
            Algorithm::Dann => (None, None, Branch::new(&spec, seed, "main", c, Some(k))),
        };
        Ok(Self { spec, featurizer, step2, step3, main })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<(), NnError> {
        let (n, c, w) = x.dim();
        if c != self.spec.channels || w != self.spec.window {
            return Err(NnError::ShapeMismatch {
                expected: vec![n, self.spec.channels, self.spec.window],
                found: vec![n, c, w],
            });
        }
        Ok(())
    }

    /// Inference embedding `h_b(h_f(x))` of the main branch.
    pub fn embed(&self, x: &Array3<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x)?;
        let f = self.featurizer.forward_eval(x)?;
        self.main.bottleneck.forward(&f)
    }

    /// Main-branch class logits in eval mode.
    pub fn logits(&self, x: &Array3<f64>) -> Result<Array2<f64>, NnError> {
        let e = self.embed(x)?;
        self.main.head.forward(&e)
    }

    /// Embeddings and logits from one eval pass.
    pub fn embed_and_logits(&self, x: &Array3<f64>) -> Result<(Array2<f64>, Array2<f64>), NnError> {
        let e = self.embed(x)?;
        let l = self.main.head.forward(&e)?;
        Ok((e, l))
    }

    /// Step-3 embeddings and domain-head softmax, eval mode.
    pub fn latent_view(&self, x: &Array3<f64>) -> Result<(Array2<f64>, Array2<f64>), NnError> {
        let branch = self.step3.as_ref().ok_or_else(|| NnError::InvalidArch("model has no step-3 branch".into()))?;
        self.check_input(x)?;
        let f = self.featurizer.forward_eval(x)?;
        let e = branch.bottleneck.forward(&f)?;
        let p = softmax_rows(&branch.head.forward(&e)?, 1.0);
        Ok((e, p))
    }

    /// Gradient of the mean cross-entropy of `softmax(logits / T)` against
    /// `targets` with respect to the input, eval mode. Parameter gradients
    /// touched along the way are cleared again.
    pub fn input_gradient(&mut self, x: &Array3<f64>, targets: &[usize], temperature: f64) -> Result<Array3<f64>, NnError> {
        self.check_input(x)?;
        let (f, cache) = self.featurizer.forward(x, Mode::Eval)?;
        let e = self.main.bottleneck.forward(&f)?;
        let logits = self.main.head.forward(&e)? / temperature;
        let (_, g) = cross_entropy(&logits, targets)?;
        let g = g / temperature;
        let ge = self.main.head.backward(&e, &g);
        let gf = self.main.bottleneck.backward(&f, &ge);
        let gx = self.featurizer.backward(&cache, &gf, true).expect("requested");
        for p in self.featurizer.params_mut().into_iter().chain(self.main.core_params_mut()) {
            p.zero_grad();
        }
        Ok(gx)
    }

    /// Predicted classes (1-based) and probability vectors.
    pub fn predict(&self, x: &Array3<f64>) -> Result<Vec<(u32, Array1<f64>)>, NnError> {
        let probs = softmax_rows(&self.logits(x)?, 1.0);
        Ok(probs.axis_iter(Axis(0)).map(|p| (argmax(p.iter().copied()) as u32 + 1, p.to_owned())).collect())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.featurizer.params();
        for b in [&self.step2, &self.step3].into_iter().flatten() {
            out.extend(b.params());
        }
        out.extend(self.main.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.featurizer.params_mut();
        for b in [&mut self.step2, &mut self.step3].into_iter().flatten() {
            out.extend(b.params_mut());
        }
        out.extend(self.main.params_mut());
        out
    }

    fn running_stats(&self) -> Vec<&Vec<f64>> {
        self.featurizer.norm.iter().flat_map(|n| [&n.running_mean, &n.running_var]).collect()
    }

    fn running_stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.featurizer.norm.iter_mut().flat_map(|n| [&mut n.running_mean, &mut n.running_var]).collect()
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in values.enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

/// Metadata stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    #[serde(rename = "C")]
    pub num_classes: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "b")]
    pub bottleneck: usize,
    pub input_dims: [usize; 3],
    pub step_count: u64,
    pub spec: ModelSpec,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DIVCKPT\0";

/// Writes `checkpoint.bin` and `model.json` into `dir`.
pub fn save_checkpoint(model: &Model, meta_hash: &str, step_count: u64, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut blob = CHECKPOINT_MAGIC.to_vec();
    for p in model.params() {
        for v in &p.value {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in model.running_stats() {
        for v in s {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("checkpoint.bin"), blob)?;
    let meta = CheckpointMeta {
        config_hash: meta_hash.to_string(),
        num_classes: model.spec.num_classes,
        k: model.spec.k,
        bottleneck: model.spec.arch.bottleneck,
        input_dims: [model.spec.channels, 1, model.spec.window],
        step_count,
        spec: model.spec.clone(),
    };
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta), CheckpointError> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join("model.json"))?)?;
    let blob = fs::read(dir.join("checkpoint.bin"))?;
    if !blob.starts_with(CHECKPOINT_MAGIC) {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let mut model = Model::new(meta.spec.clone(), 0)?;
    let expected: usize = model.params().iter().map(|p| p.len()).sum::<usize>()
        + model.running_stats().iter().map(|s| s.len()).sum::<usize>();
    let body = &blob[CHECKPOINT_MAGIC.len()..];
    if body.len() != expected * 8 {
        return Err(CheckpointError::Format(format!("expected {} values, found {} bytes", expected, body.len())));
    }
    let mut words = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for p in model.params_mut() {
        for v in p.value.iter_mut() {
            *v = words.next().expect("sized");
        }
    }
    for s in model.running_stats_mut() {
        for v in s.iter_mut() {
            *v = words.next().expect("sized");
        }
    }
    Ok((model, meta))
}
