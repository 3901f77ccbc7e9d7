// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance report: one `[PASS]` or `[FAIL]` line per criterion.
//!
//! The report always exits 0 so that failing criteria stay visible next to
//! the rest of the suite; set `DIVTS_ACCEPTANCE_STRICT=1` to turn any
//! failure into a nonzero exit.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use divts::data::{split_train_val, Dataset};
use divts::detect::{self, score_mahalanobis, DetectConfig, GaussianStats, Ridge, Scorer};
use divts::diversify::{
    self, assign_domain_class_labels, split_domain_class_label, step2_gradients, step3_gradients, step4_gradients,
    step_params, Algorithm, ArchConfig, Model, ModelSpec, Schedule, StepKind, TrainConfig, TrainOutcome, Trainer,
};
use divts::eval::{self, aupr, auroc};
use divts::nn::{grl_backward, softmax_t};
use divts::rng::substream;
use divts::synthgen::{self, SynthConfig};
use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

// Pinned tolerances and bounds.
const MAH_TOL: f64 = 1e-8;
const AUROC_TOL: f64 = 1e-12;
const AUPR_TOL: f64 = 1e-9;
const FD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const SOFTMAX_TOL: f64 = 1e-12;
const MIN_AGREEMENT: f64 = 0.6;
const MIN_ACC_GAIN: f64 = 0.03;
const ORACLE_SECS: f64 = 60.0;
const GRAD_SECS: f64 = 120.0;
const RECOVERY_SECS: f64 = 600.0;
const GENERALIZATION_SECS: f64 = 1200.0;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, n: usize, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("[{}] {n}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt3(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------- oracles

fn auroc_pairwise(scores: &[f64], is_id: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (&si, _) in scores.iter().zip(is_id).filter(|(_, p)| **p) {
        for (&sj, _) in scores.iter().zip(is_id).filter(|(_, p)| !**p) {
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

fn aupr_sweep(scores: &[f64], is_id: &[bool]) -> f64 {
    let positives = is_id.iter().filter(|&&p| p).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let tp = scores.iter().zip(is_id).filter(|(s, p)| **s >= t && **p).count() as f64;
        let flagged = scores.iter().filter(|s| **s >= t).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / flagged);
        prev_recall = recall;
    }
    ap
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())).unwrap();
        for k in 0..n {
            a.swap([col, k], [pivot, k]);
            inv.swap([col, k], [pivot, k]);
        }
        let p = a[[col, col]];
        for k in 0..n {
            a[[col, k]] /= p;
            inv[[col, k]] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[[r, col]];
                for k in 0..n {
                    a[[r, k]] -= f * a[[col, k]];
                    inv[[r, k]] -= f * inv[[col, k]];
                }
            }
        }
    }
    inv
}

fn mahalanobis_oracle(emb: &Array2<f64>, labels: &[usize], classes: usize, ridge: f64, z: &[f64]) -> f64 {
    let (n, b) = emb.dim();
    let mut best = f64::NEG_INFINITY;
    let mut means = vec![vec![0.0; b]; classes];
    let mut counts = vec![0.0; classes];
    for i in 0..n {
        counts[labels[i]] += 1.0;
        for j in 0..b {
            means[labels[i]][j] += emb[[i, j]];
        }
    }
    for c in 0..classes {
        for j in 0..b {
            means[c][j] /= counts[c];
        }
    }
    let mut cov = Array2::<f64>::zeros((b, b));
    for i in 0..n {
        let m = &means[labels[i]];
        for p in 0..b {
            for q in 0..b {
                cov[[p, q]] += (emb[[i, p]] - m[p]) * (emb[[i, q]] - m[q]) / n as f64;
            }
        }
    }
    for p in 0..b {
        cov[[p, p]] += ridge;
    }
    let prec = invert(&cov);
    for m in &means {
        let d: Vec<f64> = (0..b).map(|j| z[j] - m[j]).collect();
        let mut q = 0.0;
        for p in 0..b {
            for r in 0..b {
                q += d[p] * prec[[p, r]] * d[r];
            }
        }
        best = best.max(-q);
    }
    best
}

fn criterion_oracles(report: &mut Report) {
    let start = Instant::now();
    let mut bijective = true;
    for k in 1..=10usize {
        for c in 1..=20usize {
            let mut seen = vec![false; k * c + 1];
            for d in 0..k {
                for y in 1..=c as u32 {
                    let s = assign_domain_class_labels(y, d, c, k).unwrap();
                    bijective &= (1..=(k * c) as u32).contains(&s) && !seen[s as usize];
                    bijective &= split_domain_class_label(s, c) == (d, y);
                    seen[s as usize] = true;
                }
            }
            bijective &= seen[1..].iter().all(|&b| b);
        }
    }

    let mut rng = substream(11, "acceptance/oracles");
    let mut mah_err = 0.0f64;
    for trial in 0..20 {
        let (n, b, classes) = (40 + trial, 2 + trial % 5, 2 + trial % 3);
        let emb = Array2::from_shape_fn((n, b), |_| rng.random_range(-2.0..2.0));
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let stats = GaussianStats::fit(&emb, &labels, classes, Ridge::Auto).unwrap();
        for _ in 0..5 {
            let z: Vec<f64> = (0..b).map(|_| rng.random_range(-3.0..3.0)).collect();
            let got = score_mahalanobis(&stats, Array1::from(z.clone()).view());
            let want = mahalanobis_oracle(&emb, &labels, classes, stats.ridge, &z);
            mah_err = mah_err.max((got - want).abs() / want.abs().max(1.0));
        }
    }

    let (mut auroc_err, mut aupr_err) = (0.0f64, 0.0f64);
    for set in 0..50 {
        let n = rng.random_range(2..=200usize);
        // coarse rounding on half the sets forces ties
        let grain = if set % 2 == 0 { 10.0 } else { 1e9 };
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-1.0..1.0f64) * grain).round() / grain).collect();
        let mut is_id: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        is_id[0] = true;
        is_id[n - 1] = false;
        auroc_err = auroc_err.max((auroc(&scores, &is_id).unwrap() - auroc_pairwise(&scores, &is_id)).abs());
        aupr_err = aupr_err.max((aupr(&scores, &is_id).unwrap() - aupr_sweep(&scores, &is_id)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = bijective && mah_err <= MAH_TOL && auroc_err <= AUROC_TOL && aupr_err <= AUPR_TOL && secs < ORACLE_SECS;
    report.line(
        1,
        "equation oracles",
        pass,
        format!(
            "joint labels bijective={bijective}, mahalanobis err {mah_err:.1e} (tol {MAH_TOL:.0e}), auroc err {auroc_err:.1e} (tol {AUROC_TOL:.0e}), aupr err {aupr_err:.1e} (tol {AUPR_TOL:.0e}), {secs:.2}s"
        ),
    );
}

// -------------------------------------------------------------- gradients

fn tiny(k: usize, seed: u64) -> Model {
    let arch = ArchConfig { conv_widths: [3, 4], kernel: 3, bottleneck: 5, disc_hidden: 6, disc_layers: 1, ..Default::default() };
    Model::new(ModelSpec { algorithm: Algorithm::Diversify, channels: 2, window: 16, num_classes: 2, k, arch }, seed).unwrap()
}

fn step_losses(m: &mut Model, kind: StepKind, x: &Array3<f64>, lambda: f64) -> (f64, f64) {
    let classes = [0, 1, 1, 0, 1];
    let domains = [1, 0, 1, 1, 0];
    match kind {
        StepKind::Step2 => {
            let joint: Vec<usize> = domains.iter().zip(&classes).map(|(d, y)| d * 2 + y).collect();
            (step2_gradients(m, x, &joint).unwrap(), 0.0)
        }
        StepKind::Step3 => {
            let l = step3_gradients(m, x, &domains, &classes, lambda, false).unwrap();
            (l.primary, l.adversarial)
        }
        StepKind::Step4 => {
            let l = step4_gradients(m, x, &classes, Some(&domains), lambda, false).unwrap();
            (l.primary, l.adversarial)
        }
    }
}

fn fd_error(kind: StepKind, lambda: f64, seed: u64) -> f64 {
    let mut rng = substream(seed, "acceptance/fd-inputs");
    let x = Array3::from_shape_fn((5, 2, 16), |_| rng.random_range(-1.0..1.0));
    let mut model = tiny(2, seed);
    step_losses(&mut model, kind, &x, lambda);
    let analytic: Vec<Vec<f64>> = step_params(&mut model, kind, false).iter().map(|p| p.grad.clone()).collect();
    let upstream = model.featurizer.params().len() + 2;
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        let coef = if kind == StepKind::Step2 || pi < upstream { -lambda } else { 1.0 };
        let numeric: Vec<f64> = (0..grad.len())
            .map(|j| {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    step_params(&mut m, kind, false)[pi].value[j] += delta;
                    let (p, a) = step_losses(&mut m, kind, &x, lambda);
                    p + coef * a
                };
                (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
            })
            .collect();
        let diff = grad.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(diff / scale.max(1e-6));
    }
    worst
}

fn criterion_gradients(report: &mut Report) {
    let start = Instant::now();
    let errs: Vec<(&str, f64)> = vec![
        ("domain-class", (0..3).map(|s| fd_error(StepKind::Step2, 0.0, s)).fold(0.0, f64::max)),
        ("characterization", (0..3).map(|s| fd_error(StepKind::Step3, [1.0, 0.3, 0.0][s as usize], s)).fold(0.0, f64::max)),
        ("invariant", (0..3).map(|s| fd_error(StepKind::Step4, [1.0, 0.7, 0.0][s as usize], s)).fold(0.0, f64::max)),
    ];

    let g = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - 1.3) * (j as f64 + 0.7));
    let mut grl_exact = [0.0, 0.5, 1.0, 2.75]
        .iter()
        .all(|&l| grl_backward(&g, l).iter().zip(g.iter()).all(|(a, b)| a.to_bits() == (-l * b).to_bits()));
    // K = 1 makes the domain loss constant, so upstream gradients are the
    // reversed adversary gradient alone
    let mut rng = substream(9, "acceptance/fd-inputs");
    let x = Array3::from_shape_fn((5, 2, 16), |_| rng.random_range(-1.0..1.0));
    let upstream = |lambda: f64| {
        let mut m = tiny(1, 4);
        step3_gradients(&mut m, &x, &[0; 5], &[0, 1, 1, 0, 1], lambda, false).unwrap();
        let mut out: Vec<f64> = m.featurizer.params().iter().flat_map(|p| p.grad.clone()).collect();
        out.extend(m.step3.as_ref().unwrap().bottleneck.params().iter().flat_map(|p| p.grad.clone()));
        out
    };
    let (half, plain) = (upstream(0.5), upstream(-1.0));
    grl_exact &= plain.iter().any(|v| *v != 0.0);
    grl_exact &= half.iter().zip(&plain).all(|(a, b)| a.to_bits() == (-0.5 * b).to_bits());

    let secs = start.elapsed().as_secs_f64();
    let pass = errs.iter().all(|(_, e)| *e < FD_TOL) && grl_exact && secs < GRAD_SECS;
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    report.line(
        2,
        "gradient correctness",
        pass,
        format!("max relative error {detail} (tol {FD_TOL:.0e}), reversal exact={grl_exact}, {secs:.2}s"),
    );
}

// ------------------------------------------------------------- reductions

fn shared_state(m: &Model) -> Vec<u64> {
    let mut params = m.featurizer.params();
    params.extend(m.main.bottleneck.params());
    params.extend(m.main.head.params());
    let mut out: Vec<u64> = params.iter().flat_map(|p| p.value.iter().map(|v| v.to_bits())).collect();
    for n in &m.featurizer.norm {
        out.extend(n.running_mean.iter().chain(&n.running_var).map(|v| v.to_bits()));
    }
    out
}

fn criterion_reductions(report: &mut Report) {
    let synth = SynthConfig { series_per_pair: 2, series_length: 192, ..Default::default() };
    let (pool, _) = synthgen::generate(&synth).unwrap();
    let (train, val) = split_train_val(&pool, 0.8, 3).unwrap();
    let base = TrainConfig {
        k: 1,
        lambda1: 0.0,
        lambda2: 0.0,
        schedule: Schedule { rounds: 3, step2_epochs: 0, step3_epochs: 0, step4_epochs: 2, batch_size: 16, epoch_budget: 150 },
        arch: ArchConfig { conv_widths: [4, 8], bottleneck: 16, disc_hidden: 16, ..Default::default() },
        seed: 5,
        ..Default::default()
    };
    let mut div = Trainer::new(&train, &val, TrainConfig { algorithm: Algorithm::Diversify, ..base.clone() }).unwrap();
    let mut erm = Trainer::new(&train, &val, TrainConfig { algorithm: Algorithm::Erm, ..base.clone() }).unwrap();
    let mut steps = 0usize;
    let mut identical = shared_state(&div.model) == shared_state(&erm.model);
    'outer: for _ in 0..base.schedule.rounds {
        div.refresh_domains().unwrap();
        for _ in 0..base.schedule.step4_epochs {
            let (bd, be) = (div.epoch_batches(), erm.epoch_batches());
            if bd != be {
                identical = false;
                break 'outer;
            }
            for batch in bd {
                let ld = div.step(StepKind::Step4, &batch).unwrap();
                let le = erm.step(StepKind::Step4, &batch).unwrap();
                steps += 1;
                if ld.primary.to_bits() != le.primary.to_bits() || shared_state(&div.model) != shared_state(&erm.model) {
                    identical = false;
                    break 'outer;
                }
            }
        }
    }
    // the packaged training loop must follow the same trajectory
    let a = diversify::train(&train, &val, &TrainConfig { algorithm: Algorithm::Diversify, ..base.clone() }).unwrap();
    let b = diversify::baseline_erm(&train, &val, &base).unwrap();
    let loops_match = shared_state(&a.last_model) == shared_state(&b.last_model)
        && a.history.rounds.iter().zip(&b.history.rounds).all(|(x, y)| x.val_acc == y.val_acc && x.step4.primary == y.step4.primary);

    let mut rng = substream(17, "acceptance/odin");
    let mut model = Model::new(
        ModelSpec { algorithm: Algorithm::Erm, channels: 3, window: 64, num_classes: 4, k: 1, arch: ArchConfig::default() },
        3,
    )
    .unwrap();
    let x = Array3::from_shape_fn((100, 3, 64), |_| rng.random_range(0.0..1.0));
    let mcp = detect::score_mcp(&model, &x, 1.0).unwrap();
    let odin = detect::score_odin(&mut model, &x, 1.0, 0.0).unwrap();
    let odin_equal = mcp.iter().zip(&odin).all(|(m, o)| m.0.to_bits() == o.0.to_bits() && m.1 == o.1);

    let mut softmax_err = 0.0f64;
    for _ in 0..100 {
        let v = Array1::from_shape_fn(rng.random_range(2..12usize), |_| rng.random_range(-20.0..20.0));
        let total: f64 = v.iter().map(|x: &f64| x.exp()).sum();
        for (p, x) in softmax_t(v.view(), 1.0).iter().zip(v.iter()) {
            softmax_err = softmax_err.max((p - x.exp() / total).abs());
        }
    }
    let pass = identical && steps > 0 && loops_match && odin_equal && softmax_err <= SOFTMAX_TOL;
    report.line(
        3,
        "reductions",
        pass,
        format!(
            "K=1/lambda=0 vs ERM identical over {steps} steps={identical}, training loops match={loops_match}, odin(T=1,eps=0)==mcp on 100 inputs={odin_equal}, softmax err {softmax_err:.1e} (tol {SOFTMAX_TOL:.0e})"
        ),
    );
}

// -------------------------------------------------------- trained models

struct SeedRun {
    train: Dataset,
    target: Dataset,
    div: TrainOutcome,
    erm: TrainOutcome,
    div_secs: f64,
    erm_secs: f64,
    separability: f64,
}

fn train_seed(seed: u64) -> SeedRun {
    let synth = SynthConfig { seed, ..Default::default() };
    let (pool, target) = synthgen::generate(&synth).unwrap();
    let separability = synthgen::separability_check(&pool).unwrap();
    let (train, val) = split_train_val(&pool, 0.8, seed).unwrap();
    let cfg = TrainConfig { seed, ..Default::default() };
    let t = Instant::now();
    let div = diversify::train(&train, &val, &cfg).unwrap();
    let div_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let erm = diversify::baseline_erm(&train, &val, &cfg).unwrap();
    let erm_secs = t.elapsed().as_secs_f64();
    SeedRun { train, target, div, erm, div_secs, erm_secs, separability }
}

fn target_id_accuracy(model: &Model, target: &Dataset) -> f64 {
    let idx: Vec<usize> = (0..target.len()).filter(|&i| !target.is_ood(&target.instances[i])).collect();
    let preds = diversify::predict(model, &target.batch_inputs(&idx)).unwrap();
    let hits = preds.iter().zip(&idx).filter(|((c, _), &i)| *c == target.instances[i].y).count();
    hits as f64 / idx.len() as f64
}

fn detection_auroc(model: &Model, train: &Dataset, target: &Dataset, scorer: Scorer) -> f64 {
    let mut model = model.clone();
    let stats = detect::fit_gaussian_stats(&model, train, Ridge::Auto).unwrap();
    let recs = detect::detect_batch(&mut model, Some(&stats), target, scorer, &DetectConfig::default(), None).unwrap();
    let scores: Vec<f64> = recs.iter().map(|r| r.score).collect();
    let is_id: Vec<bool> = recs.iter().map(|r| r.is_ood_true == Some(false)).collect();
    auroc(&scores, &is_id).unwrap()
}

fn latent_h_div(run: &SeedRun, seed: u64) -> (f64, f64) {
    let emb = detect::embed_all(&run.div.model, &run.train.all_inputs()).unwrap();
    let k = run.div.history.k;
    let learned = eval::mean_pairwise(&eval::h_divergence_matrix(&emb, &run.div.assignments, k).unwrap()).unwrap_or(0.0);
    let mut shuffled = run.div.assignments.clone();
    shuffled.shuffle(&mut substream(seed, "acceptance/random-split"));
    let random = eval::mean_pairwise(&eval::h_divergence_matrix(&emb, &shuffled, k).unwrap()).unwrap_or(0.0);
    (learned, random)
}

fn criteria_trained(report: &mut Report) {
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| train_seed(s)).collect();

    let agreement: Vec<f64> = runs
        .iter()
        .map(|r| eval::domain_agreement(&r.div.assignments, &r.train.planted_domains().unwrap()).unwrap())
        .collect();
    let sep: Vec<f64> = runs.iter().map(|r| r.separability).collect();
    let windows: Vec<usize> = runs.iter().map(|r| r.train.len() * 5 / 4).collect();
    let div_secs: f64 = runs.iter().map(|r| r.div_secs).sum();
    report.line(
        4,
        "latent-domain recovery",
        median(agreement.clone()) >= MIN_AGREEMENT && sep.iter().all(|&s| s >= 0.9) && div_secs < RECOVERY_SECS,
        format!(
            "domain agreement {} median {:.3} (min {MIN_AGREEMENT}), separability {}, ~{} windows, {div_secs:.0}s",
            fmt3(&agreement),
            median(agreement.clone()),
            fmt3(&sep),
            windows[0]
        ),
    );

    let acc_div: Vec<f64> = runs.iter().map(|r| target_id_accuracy(&r.div.model, &r.target)).collect();
    let acc_erm: Vec<f64> = runs.iter().map(|r| target_id_accuracy(&r.erm.model, &r.target)).collect();
    let gain: Vec<f64> = acc_div.iter().zip(&acc_erm).map(|(d, e)| d - e).collect();
    let total_secs: f64 = runs.iter().map(|r| r.div_secs + r.erm_secs).sum();
    report.line(
        5,
        "generalization ordering",
        median(gain.clone()) >= MIN_ACC_GAIN && total_secs < GENERALIZATION_SECS,
        format!(
            "target ID acc diversify {} vs erm {}, paired gain median {:+.3} (min {MIN_ACC_GAIN:+}), {total_secs:.0}s",
            fmt3(&acc_div),
            fmt3(&acc_erm),
            median(gain.clone())
        ),
    );

    let mah_div: Vec<f64> = runs.iter().map(|r| detection_auroc(&r.div.model, &r.train, &r.target, Scorer::Mah)).collect();
    let mcp_div: Vec<f64> = runs.iter().map(|r| detection_auroc(&r.div.model, &r.train, &r.target, Scorer::Mcp)).collect();
    let mah_erm: Vec<f64> = runs.iter().map(|r| detection_auroc(&r.erm.model, &r.train, &r.target, Scorer::Mah)).collect();
    let all_above = mah_div.iter().chain(&mcp_div).chain(&mah_erm).all(|&a| a > 0.5);
    let (md, mc, me) = (median(mah_div.clone()), median(mcp_div.clone()), median(mah_erm.clone()));
    report.line(
        6,
        "detection ordering",
        md >= me && md >= mc && all_above,
        format!(
            "AUROC mah diversify {} (median {md:.3}), mah erm {} (median {me:.3}), mcp diversify {} (median {mc:.3}), all > 0.5={all_above}",
            fmt3(&mah_div),
            fmt3(&mah_erm),
            fmt3(&mcp_div)
        ),
    );

    let (learned, random): (Vec<f64>, Vec<f64>) = runs.iter().zip(SEEDS).map(|(r, s)| latent_h_div(r, s)).unzip();
    report.line(
        7,
        "latent-domain diversity",
        median(learned.clone()) > median(random.clone()),
        format!(
            "mean pairwise H-divergence learned {} (median {:.3}) vs random split {} (median {:.3})",
            fmt3(&learned),
            median(learned.clone()),
            fmt3(&random),
            median(random.clone())
        ),
    );

    // the defaults are seed 0 for both generator and trainer
    let h = &runs[0].div.history;
    let losses = h.step2_losses();
    let recorded = h.rounds.len() == TrainConfig::default().schedule.rounds && losses.len() == h.rounds.len();
    let others: Vec<String> = runs[1..]
        .iter()
        .map(|r| {
            let l = r.div.history.step2_losses();
            format!("{:.3}->{:.3}", l[0], l[l.len() - 1])
        })
        .collect();
    report.line(
        8,
        "convergence",
        recorded && losses.last() <= losses.first(),
        format!(
            "step-2 loss round 1 {:.4} -> round {} {:.4}, all rounds recorded={recorded}; other seeds (not gated) {}",
            losses[0],
            losses.len(),
            losses[losses.len() - 1],
            others.join(", ")
        ),
    );
}

// -------------------------------------------------------------- pipeline

const PIPELINE_CONFIG: &str = r#"{
  "k": 3,
  "schedule": {"rounds": 3, "step2_epochs": 1, "step3_epochs": 1, "step4_epochs": 1, "batch_size": 32},
  "arch": {"conv_widths": [8, 16], "bottleneck": 32, "disc_hidden": 32}
}"#;

fn run_pipeline(dir: &Path) -> Result<Vec<u8>, String> {
    fs::write(dir.join("exp.json"), PIPELINE_CONFIG).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 4] = [
        &["synth", "--out", "data", "--series-per-pair", "3", "--target-series-per-class", "3", "--seed", "4"],
        &["train", "--data", "data/train", "--config", "exp.json", "--out", "run", "--seed", "4"],
        &["detect", "--run", "run", "--data", "data/target", "--scorer", "all"],
        &["eval", "--scores", "run/scores.json", "--data", "data/target", "--run", "run"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_divts")).args(args).current_dir(dir).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    fs::read(dir.join("run/metrics.json")).map_err(|e| e.to_string())
}

fn criterion_pipeline(report: &mut Report) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (run_pipeline(a.path()), run_pipeline(b.path())) {
        (Ok(x), Ok(y)) => {
            let has_detection = String::from_utf8_lossy(&x).contains("\"auroc\"");
            report.line(
                9,
                "pipeline determinism",
                x == y && has_detection,
                format!("metrics.json identical across two runs={} ({} bytes)", x == y, x.len()),
            );
        }
        (ra, rb) => report.line(9, "pipeline determinism", false, format!("{:?} / {:?}", ra.err(), rb.err())),
    }
}

fn main() {
    // `cargo test -- --list` and friends must not trigger a full run
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut report = Report { failed: 0 };
    criterion_oracles(&mut report);
    criterion_gradients(&mut report);
    criterion_reductions(&mut report);
    criteria_trained(&mut report);
    criterion_pipeline(&mut report);
    println!("acceptance: {} of 9 criteria passed", 9 - report.failed);
    if report.failed > 0 && std::env::var("DIVTS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
