// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use divts::data::{self, load_dataset, save_dataset, Dataset};
use divts::detect::{self, DetectConfig, GaussianStats, ScoreRecord, Scorer};
use divts::diversify::{self, Algorithm, History, Model};
use divts::eval::{self, DetectionEval};
use divts::synthgen::{self, SynthConfig};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{resolve, ExperimentConfig};
use crate::{AlgorithmArg, DetectArgs, EvalArgs, Failure, ScorerArg, SynthArgs, TrainArgs};

pub const H_DIV_ESTIMATOR: &str = "logistic-probe-2fold";

/// Writes through a temporary sibling so readers never see a torn file.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load(dir: &Path) -> Result<Dataset, Failure> {
    load_dataset(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

/// Inserts `value` at a dotted `path` when present.
fn put<T: Serialize>(obj: &mut Map<String, Value>, path: &str, value: Option<T>) {
    let Some(v) = value else { return };
    let mut cur = obj;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), serde_json::to_value(v).expect("flag serializes"));
            return;
        }
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("nested flag object");
    }
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut flags = Map::new();
    put(&mut flags, "k_true", a.domains);
    put(&mut flags, "classes", a.classes);
    put(&mut flags, "ood_extra", a.ood_extra);
    put(&mut flags, "channels", a.channels);
    put(&mut flags, "series_length", a.series_length);
    put(&mut flags, "series_per_pair", a.series_per_pair);
    put(&mut flags, "target_series_per_class", a.target_series_per_class);
    put(&mut flags, "window", a.window);
    put(&mut flags, "step", a.step);
    put(&mut flags, "noise_sigma", a.noise);
    put(&mut flags, "drift_rate", a.drift);
    put(&mut flags, "seed", a.seed);
    let cfg: SynthConfig = resolve(a.config.as_deref(), Value::Object(flags))?;
    cfg.validate()?;
    let (train, target) = synthgen::generate(&cfg)?;
    fs::create_dir_all(&a.out)?;
    save_dataset(&train, &a.out.join("train"))?;
    save_dataset(&target, &a.out.join("target"))?;
    write_json(&a.out.join("synth_config.json"), &cfg)?;
    println!("wrote {} train and {} target windows to {}", train.len(), target.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AssignmentsRecord {
    pub k: usize,
    /// Pseudo domain per training-split instance, in split order.
    pub assignments: Vec<usize>,
}

fn train_flags(a: &TrainArgs) -> Value {
    let mut f = Map::new();
    put(
        &mut f,
        "algorithm",
        a.algorithm.map(|x| match x {
            AlgorithmArg::Diversify => Algorithm::Diversify,
            AlgorithmArg::Erm => Algorithm::Erm,
            AlgorithmArg::Dann => Algorithm::Dann,
        }),
    );
    put(&mut f, "k", a.k);
    put(&mut f, "k_grid", a.k_grid);
    put(&mut f, "lambda1", a.lambda1);
    put(&mut f, "lambda2", a.lambda2);
    put(&mut f, "lr", a.lr);
    put(&mut f, "weight_decay", a.weight_decay);
    put(&mut f, "schedule.rounds", a.rounds);
    put(&mut f, "schedule.step2_epochs", a.e2);
    put(&mut f, "schedule.step3_epochs", a.e3);
    put(&mut f, "schedule.step4_epochs", a.e4);
    put(&mut f, "schedule.batch_size", a.batch);
    put(&mut f, "schedule.epoch_budget", a.epoch_budget);
    put(&mut f, "val_ratio", a.val_ratio);
    put(&mut f, "seed", a.seed);
    put(&mut f, "freeze_featurizer_steps34", a.freeze_featurizer.then_some(true));
    put(&mut f, "data", a.data.clone());
    Value::Object(f)
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg: ExperimentConfig = resolve(a.config.as_deref(), train_flags(&a))?;
    cfg.validate()?;
    let data_dir = cfg.data.clone().ok_or_else(|| Failure::Usage("no training data given (--data)".into()))?;
    let data_dir = fs::canonicalize(&data_dir).map_err(|e| Failure::Data(format!("{}: {e}", data_dir.display())))?;
    cfg.data = Some(data_dir.clone());
    let pool = load(&data_dir)?;

    let run = a.out.clone().unwrap_or_else(|| a.runs_dir.join(format!("{}-k{}-seed{}", cfg.algorithm, cfg.k, cfg.seed)));
    fs::create_dir_all(&run)?;
    write_json(&run.join("config.json"), &cfg)?;

    let (tr_idx, val_idx) = data::split_indices(pool.len(), cfg.val_ratio, cfg.seed)?;
    if let Some(inst) = pool.instances.iter().find(|i| pool.is_ood(i)) {
        return Err(Failure::Data(format!("training data holds OOD class {}", inst.y)));
    }
    write_json(
        &run.join("split.json"),
        &SplitRecord { seed: cfg.seed, ratio: cfg.val_ratio, train: tr_idx.clone(), val: val_idx.clone() },
    )?;
    let train_ds = pool.subset(&tr_idx);
    let val_ds = pool.subset(&val_idx);

    let tcfg = cfg.train_config();
    let history_path = run.join("history.json");
    let outcome = match (cfg.algorithm, cfg.k_grid) {
        (Algorithm::Diversify, Some([lo, hi])) => {
            let grid = diversify::grid_search_k(&train_ds, &val_ds, &tcfg, lo..=hi)?;
            let scores: BTreeMap<String, f64> = grid.scores.iter().map(|(k, s)| (k.to_string(), *s)).collect();
            write_json(&run.join("grid.json"), &json!({ "best_k": grid.best_k, "val_acc": scores }))?;
            info!("grid search picked k = {}", grid.best_k);
            grid.outcome
        }
        _ => {
            let mut write_err = None;
            let mut observer = |h: &History| {
                if write_err.is_none() {
                    write_err = write_json(&history_path, h).err();
                }
            };
            let out = diversify::train_with_observer(&train_ds, &val_ds, &tcfg, &mut observer)?;
            if let Some(e) = write_err {
                return Err(e);
            }
            out
        }
    };
    write_json(&history_path, &outcome.history)?;
    diversify::save_checkpoint(&outcome.model, &cfg.hash(), outcome.history.steps, &run)?;
    write_json(
        &run.join("assignments.json"),
        &AssignmentsRecord { k: outcome.history.k, assignments: outcome.assignments.clone() },
    )?;
    println!(
        "{} k={} best round {} val acc {:.4} -> {}",
        outcome.history.algorithm,
        outcome.history.k,
        outcome.history.best_round.map_or(0, |r| r + 1),
        outcome.history.best_val_acc,
        run.display()
    );
    Ok(())
}

/// A run directory loaded back from disk.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub model: Model,
    pub train: Dataset,
    pub val: Dataset,
}

pub fn load_run(dir: &Path) -> Result<Run, Failure> {
    let cfg: ExperimentConfig = read_json(&dir.join("config.json"))?;
    if !dir.join("checkpoint.bin").exists() {
        return Err(Failure::Data(format!("no checkpoint in {}", dir.display())));
    }
    let (model, meta) = diversify::load_checkpoint(dir)?;
    if meta.config_hash != cfg.hash() {
        return Err(Failure::Data(format!("checkpoint in {} does not match its config.json", dir.display())));
    }
    let split: SplitRecord = read_json(&dir.join("split.json"))?;
    let data_dir = cfg.data.clone().ok_or_else(|| Failure::Data("run config has no data path".into()))?;
    let pool = load(&data_dir)?;
    if split.train.iter().chain(&split.val).any(|&i| i >= pool.len()) {
        return Err(Failure::Data("split.json does not match the training data".into()));
    }
    Ok(Run { train: pool.subset(&split.train), val: pool.subset(&split.val), cfg, model })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoresFile {
    pub detect: DetectConfig,
    /// Threshold applied per scorer.
    pub thresholds: BTreeMap<Scorer, f64>,
    pub records: Vec<ScoreRecord>,
}

pub fn detect(a: DetectArgs) -> Result<(), Failure> {
    let mut run = load_run(&a.run)?;
    let mut dcfg = run.cfg.detect_config();
    if let Some(t) = a.temp {
        dcfg.temperature = t;
    }
    if let Some(e) = a.eps {
        dcfg.epsilon = e;
    }
    if let Some(q) = a.quantile {
        dcfg.quantile = q;
    }
    let target = load(&a.data)?;
    if target.channels != run.train.channels || target.window != run.train.window {
        return Err(Failure::Data(format!(
            "target windows are [{}, {}], model expects [{}, {}]",
            target.channels, target.window, run.train.channels, run.train.window
        )));
    }
    let scorers: Vec<Scorer> = match a.scorer {
        ScorerArg::All => Scorer::ALL.to_vec(),
        ScorerArg::Mcp => vec![Scorer::Mcp],
        ScorerArg::Mah => vec![Scorer::Mah],
        ScorerArg::Odin => vec![Scorer::Odin],
    };
    let stats: Option<GaussianStats> = if scorers.contains(&Scorer::Mah) {
        Some(detect::fit_gaussian_stats(&run.model, &run.train, dcfg.ridge)?)
    } else {
        None
    };
    let mut thresholds = BTreeMap::new();
    let mut records = Vec::new();
    for scorer in scorers {
        let t = match a.threshold {
            Some(t) => t,
            None => detect::validation_threshold(&mut run.model, stats.as_ref(), &run.val, scorer, &dcfg)?,
        };
        thresholds.insert(scorer, t);
        records.extend(detect::detect_batch(&mut run.model, stats.as_ref(), &target, scorer, &dcfg, Some(t))?);
    }
    let out = a.out.unwrap_or_else(|| a.run.join("scores.json"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(&out, &ScoresFile { detect: dcfg, thresholds, records })?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMetrics {
    pub k: usize,
    pub h_div: Vec<Vec<Option<f64>>>,
    pub h_div_mean: Option<f64>,
    pub h_div_estimator: String,
    /// Present when the training data carries planted domains.
    pub domain_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_records: usize,
    pub id_acc: Option<f64>,
    /// `id` or `ood`: which side counts as positive in `detection`.
    pub positive: String,
    /// Omitted when the data has no OOD ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<BTreeMap<Scorer, DetectionEval>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentMetrics>,
}

fn latent_metrics(run_dir: &Path) -> Result<Option<LatentMetrics>, Failure> {
    let run = load_run(run_dir)?;
    let rec: AssignmentsRecord = read_json(&run_dir.join("assignments.json"))?;
    if rec.assignments.len() != run.train.len() {
        return Err(Failure::Data("assignments.json does not match the training split".into()));
    }
    if run.cfg.algorithm != Algorithm::Diversify || rec.k < 2 {
        return Ok(None);
    }
    let emb = detect::embed_all(&run.model, &run.train.all_inputs())?;
    let h_div = eval::h_divergence_matrix(&emb, &rec.assignments, rec.k)?;
    let domain_agreement = match run.train.planted_domains() {
        Some(planted) => Some(eval::domain_agreement(&rec.assignments, &planted)?),
        None => None,
    };
    Ok(Some(LatentMetrics {
        k: rec.k,
        h_div_mean: eval::mean_pairwise(&h_div),
        h_div,
        h_div_estimator: H_DIV_ESTIMATOR.into(),
        domain_agreement,
    }))
}

pub fn compute_metrics(scores: &ScoresFile, truth: &Dataset, ood_positive: bool) -> Result<Metrics, Failure> {
    let mut by_scorer: BTreeMap<Scorer, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in &scores.records {
        by_scorer.entry(r.scorer).or_default().push(r);
    }
    for (scorer, recs) in &by_scorer {
        if recs.len() != truth.len() || recs.iter().enumerate().any(|(i, r)| r.id != i) {
            return Err(Failure::Data(format!(
                "schema mismatch: {} has {} records for {} instances",
                scorer,
                recs.len(),
                truth.len()
            )));
        }
    }
    let first = by_scorer.values().next();
    let id_rows: Vec<usize> = (0..truth.len()).filter(|&i| !truth.is_ood(&truth.instances[i])).collect();
    let id_acc = match first {
        Some(recs) if !id_rows.is_empty() => {
            let preds: Vec<u32> = id_rows.iter().map(|&i| recs[i].pred_class).collect();
            let labels: Vec<u32> = id_rows.iter().map(|&i| truth.instances[i].y).collect();
            Some(eval::accuracy(&preds, &labels)?)
        }
        _ => None,
    };
    let has_truth = !id_rows.is_empty() && id_rows.len() < truth.len();
    let detection = if has_truth {
        let is_id: Vec<bool> = truth.instances.iter().map(|i| !truth.is_ood(i)).collect();
        let mut map = BTreeMap::new();
        for (scorer, recs) in &by_scorer {
            let s: Vec<f64> = recs.iter().map(|r| r.score).collect();
            let e = if ood_positive {
                DetectionEval::compute_ood_positive(&s, &is_id)?
            } else {
                DetectionEval::compute(&s, &is_id)?
            };
            map.insert(*scorer, e);
        }
        Some(map)
    } else {
        None
    };
    Ok(Metrics {
        n_records: truth.len(),
        id_acc,
        positive: if ood_positive { "ood" } else { "id" }.into(),
        detection,
        latent: None,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let scores: ScoresFile = read_json(&a.scores)?;
    let truth = load(&a.data)?;
    let mut metrics = compute_metrics(&scores, &truth, a.ood_positive)?;
    if let Some(run) = &a.run {
        metrics.latent = latent_metrics(run)?;
    }
    let out_dir: PathBuf = match a.out {
        Some(d) => d,
        None => a.scores.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !out_dir.as_os_str().is_empty() {
        fs::create_dir_all(&out_dir)?;
    }
    write_json(&out_dir.join("metrics.json"), &metrics)?;

    let mut w = csv::Writer::from_path(out_dir.join("metrics.csv")).map_err(|e| Failure::Data(e.to_string()))?;
    w.write_record(["scorer", "id_acc", "auroc", "aupr", "n_id", "n_ood"]).map_err(|e| Failure::Data(e.to_string()))?;
    let acc = fmt_opt(metrics.id_acc);
    let mut table = vec![format!("{:<6} {:>8} {:>8} {:>8}", "scorer", "id_acc", "auroc", "aupr")];
    match &metrics.detection {
        Some(det) => {
            for (scorer, e) in det {
                let row = [
                    scorer.to_string(),
                    acc.clone(),
                    format!("{:.6}", e.auroc),
                    format!("{:.6}", e.aupr),
                    e.n_id.to_string(),
                    e.n_ood.to_string(),
                ];
                w.write_record(&row).map_err(|e| Failure::Data(e.to_string()))?;
                table.push(format!("{:<6} {:>8} {:>8.4} {:>8.4}", scorer.to_string(), acc, e.auroc, e.aupr));
            }
        }
        None => {
            w.write_record(["-", acc.as_str(), "", "", "", ""]).map_err(|e| Failure::Data(e.to_string()))?;
            table.push(format!("{:<6} {:>8} {:>8} {:>8}", "-", acc, "-", "-"));
        }
    }
    w.flush()?;
    if let Some(l) = &metrics.latent {
        table.push(format!(
            "latent k={} h_div mean {} domain agreement {}",
            l.k,
            fmt_opt(l.h_div_mean),
            fmt_opt(l.domain_agreement)
        ));
    }
    println!("{}", table.join("\n"));
    Ok(())
}
