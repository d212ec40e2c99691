//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

use std::time::{Duration, Instant};

use ndarray::Array2;
use oodguard::autodiff::Tape;
use oodguard::config::ExperimentConfig;
use oodguard::data::{GroupTag, LabelSpace, WindowedSample};
use oodguard::detector::{calibrate_threshold, interpolated_percentile};
use oodguard::eval::{run_experiment, ExperimentRun, RunOptions};
use oodguard::model::{BackboneKind, BackboneSpec, Model, SubspaceLayout};
use oodguard::preprocess::{design_butterworth_bandpass, window_count, zero_phase_filter, BandpassSpec};
use oodguard::seed::rng;
use oodguard::training::{combined_loss, cross_entropy_loss, metric_loss, metric_loss_on_tape, DistanceKind};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct ToyRuns {
    baseline: ExperimentRun,
    baseline_time: Duration,
    full: Vec<ExperimentRun>,
    rerun: ExperimentRun,
}

fn toy(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        ..ExperimentConfig::toy()
    }
}

fn run(cfg: &ExperimentConfig, stage1_only: bool) -> ExperimentRun {
    let ds = cfg.load_dataset().expect("toy dataset");
    let opts = RunOptions {
        stage1_only,
        jobs: Some(1),
    };
    run_experiment(&ds, cfg, &opts).expect("toy run")
}

fn toy_runs() -> ToyRuns {
    let t = Instant::now();
    let baseline = run(&toy(0), true);
    let baseline_time = t.elapsed();
    let full: Vec<_> = (0..3).map(|s| run(&toy(s), false)).collect();
    let rerun = run(&toy(0), false);
    ToyRuns {
        baseline,
        baseline_time,
        full,
        rerun,
    }
}

fn mean(run: &ExperimentRun, metric: &str) -> f64 {
    run.report
        .aggregate(metric)
        .unwrap_or_else(|| panic!("report lacks {metric}"))
        .mean
}

fn criterion1(r: &ToyRuns) -> Outcome {
    let conf = mean(&r.baseline, "confidence_gauss");
    let bound = 1.0 / 2.0 + 0.10;
    let secs = r.baseline_time.as_secs_f64();
    outcome(
        conf > bound && secs <= 300.0,
        format!("stage-1 Gaussian OOD confidence {conf:.4} > {bound:.2}; runtime {secs:.1}s <= 300s"),
    )
}

fn criterion2(r: &ToyRuns) -> Outcome {
    let excl = mean(&r.full[0], "exclusion_gauss");
    let acc_in = mean(&r.full[0], "acceptance_in");
    let a2 = mean(&r.full[0], "accuracy");
    let a1 = mean(&r.baseline, "accuracy");
    outcome(
        excl >= 0.95 && acc_in >= 0.85 && a1 - a2 <= 0.05,
        format!(
            "Gaussian exclusion {excl:.4} >= 0.95; in-dist acceptance {acc_in:.4} >= 0.85; accuracy {a2:.4} vs stage-1 {a1:.4} (drop {:.4} <= 0.05)",
            a1 - a2
        ),
    )
}

fn criterion3(r: &ToyRuns) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (seed, run) in r.full.iter().enumerate() {
        let (g, m, p) = (
            mean(run, "exclusion_gauss"),
            mean(run, "exclusion_mix_heavy"),
            mean(run, "exclusion_channel_perm"),
        );
        ok &= g >= m && m >= p;
        parts.push(format!("seed {seed}: {g:.3} >= {m:.3} >= {p:.3}"));
    }
    outcome(ok, format!("exclusion gauss >= mix_heavy >= channel_perm ({})", parts.join("; ")))
}

fn rand_mat(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-scale..scale))
}

fn criterion4() -> Outcome {
    let mut worst_ce = 0.0f64;
    for n in 2..=10 {
        let z = Array2::<f64>::from_elem((3, n), 0.37);
        let ce = cross_entropy_loss(z.view(), &[Some(0), Some(n - 1), Some(1)]).unwrap();
        worst_ce = worst_ce.max((ce - (n as f64).ln()).abs());
    }
    let mut r = rng(44);
    let (mut lo, mut hi) = (0.0f64, -2.0f64);
    for _ in 0..1000 {
        let (bi, bo, k) = (r.random_range(1..8), r.random_range(1..8), r.random_range(1..12));
        let (a, b) = (rand_mat(&mut r, bi, k, 5.0), rand_mat(&mut r, bo, k, 5.0));
        let m = metric_loss(a.view(), b.view(), DistanceKind::Cosine).unwrap();
        lo = lo.min(m);
        hi = hi.max(m);
    }
    let mut worst_lin = 0.0f64;
    for _ in 0..1000 {
        let (ce, m) = (r.random_range(0.0..5.0), r.random_range(-2.0..0.0));
        let (l1, l2) = (r.random_range(0.0..3.0), r.random_range(0.0..3.0));
        let lhs = combined_loss(ce, m, l1) + combined_loss(ce, m, l2) - ce;
        worst_lin = worst_lin.max((lhs - combined_loss(ce, m, l1 + l2)).abs());
    }
    outcome(
        worst_ce <= 1e-6 && lo >= -2.0 && hi <= 0.0 && worst_lin <= 1e-12,
        format!(
            "uniform CE error {worst_ce:.2e} <= 1e-6; cosine metric range [{lo:.4}, {hi:.4}] within [-2, 0] over 1000 batches; lambda-linearity error {worst_lin:.2e} <= 1e-12"
        ),
    )
}

/// Worst relative error of the cross-entropy and metric gradients, or `None`
/// when the instance is not smooth at finite-difference scale.
fn grad_instance(kind: &BackboneKind, seed: u64) -> Option<(f64, f64)> {
    let (c, t) = (3, 6);
    let layout = SubspaceLayout::new(4, 4).unwrap();
    let labels = LabelSpace::new(["a", "b", "c"]).unwrap();
    let model = Model::new(BackboneSpec::new(kind.clone(), c, t, 8), layout, labels, seed).unwrap();
    let mut r = rng(seed + 1000);
    let mk = |r: &mut rand_chacha::ChaCha8Rng, i: usize, labeled: bool| {
        let (label, group) = if labeled { (Some(i % 3), GroupTag::InDist) } else { (None, GroupTag::OodGauss) };
        WindowedSample::new(rand_mat(r, c, t, 1.5), label, "g", i, group).unwrap()
    };
    let ins: Vec<_> = (0..3).map(|i| mk(&mut r, i, true)).collect();
    let outs: Vec<_> = (0..3).map(|i| mk(&mut r, i, false)).collect();
    let ys: Vec<usize> = ins.iter().map(|w| w.label.unwrap()).collect();

    let losses = |m: &Model| -> [(f64, Option<Tape>, Vec<(String, oodguard::autodiff::Var)>, oodguard::autodiff::Var); 2] {
        let build = |which: usize| {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let a: Vec<&WindowedSample> = ins.iter().collect();
            let fi = m.features_on_tape(&mut tape, &bound, &a).unwrap();
            let loss = if which == 0 {
                let z = m.logits_on_tape(&mut tape, &bound, fi);
                tape.cross_entropy(z, &ys)
            } else {
                let b: Vec<&WindowedSample> = outs.iter().collect();
                let fo = m.features_on_tape(&mut tape, &bound, &b).unwrap();
                let di = tape.slice_cols(fi, 0, 4);
                let d_out = tape.slice_cols(fo, 0, 4);
                metric_loss_on_tape(&mut tape, di, d_out, DistanceKind::Cosine)
            };
            let vars = bound.iter().map(|(k, v)| (k.to_string(), v)).collect();
            (tape.scalar(loss), Some(tape), vars, loss)
        };
        [build(0), build(1)]
    };

    let base = losses(&model);
    let mut worst = [0.0f64; 2];
    for (which, (_, tape, vars, loss)) in base.iter().enumerate() {
        let tape = tape.as_ref().unwrap();
        let grads = tape.backward(*loss);
        for (name, var) in vars {
            let shape = model.params.get(name).unwrap().dim();
            let idx = (r.random_range(0..shape.0), r.random_range(0..shape.1));
            let an = grads.get(*var).map_or(0.0, |g| g[idx]);
            let central = |h: f64| {
                let mut plus = model.clone();
                plus.params.get_mut(name).unwrap()[idx] += h;
                let mut minus = model.clone();
                minus.params.get_mut(name).unwrap()[idx] -= h;
                (losses(&plus)[which].0 - losses(&minus)[which].0) / (2.0 * h)
            };
            let (fd, fine) = (central(1e-5), central(1e-6));
            // a ReLU kink inside the step makes the two estimates disagree
            if (fd - fine).abs() > 1e-3 * fd.abs().max(fine.abs()).max(1e-7) {
                return None;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            worst[which] = worst[which].max(rel);
        }
    }
    Some((worst[0], worst[1]))
}

fn criterion5() -> Outcome {
    let kinds = [
        ("mlp", BackboneKind::Mlp { hidden: vec![6] }),
        ("conv1d", BackboneKind::Conv1d { channels: 4, kernel: 3 }),
        (
            "transformer",
            BackboneKind::TransformerEnc {
                d_model: 4,
                n_heads: 2,
                n_layers: 2,
                ff_dim: 6,
            },
        ),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, kind) in &kinds {
        let (mut ce, mut metric) = (0.0f64, 0.0f64);
        let (mut valid, mut redrawn, mut seed) = (0, 0, 0);
        while valid < 10 && seed < 40 {
            match grad_instance(kind, seed) {
                Some((a, b)) => {
                    ce = ce.max(a);
                    metric = metric.max(b);
                    valid += 1;
                }
                None => redrawn += 1,
            }
            seed += 1;
        }
        ok &= valid == 10 && ce <= 1e-4 && metric <= 1e-4;
        parts.push(format!("{name} ce {ce:.1e} metric {metric:.1e}, {valid} instances, {redrawn} redrawn at a kink"));
    }
    outcome(ok, format!("max relative gradient error over 10 instances each <= 1e-4 ({})", parts.join("; ")))
}

fn criterion6() -> Outcome {
    let fs = 12.5;
    let coeffs = design_butterworth_bandpass(&BandpassSpec {
        low_hz: 0.01,
        high_hz: 0.1,
        order: 6,
        sampling_rate_hz: fs,
    })
    .unwrap();
    let center = (0.01f64 * 0.1).sqrt();
    let g_center = coeffs.magnitude(center, fs);
    let g_1hz = coeffs.magnitude(1.0, fs);

    let n = (400.0 * fs) as usize;
    let x = Array2::from_shape_fn((1, n), |(_, i)| (2.0 * std::f64::consts::PI * 0.05 * i as f64 / fs).sin());
    let y = zero_phase_filter(&x, &coeffs).unwrap();
    let (xr, yr) = (x.row(0), y.row(0));
    let xcorr = |lag: i64| -> f64 {
        (0..n as i64)
            .filter_map(|i| {
                let j = i + lag;
                (0..n as i64).contains(&j).then(|| xr[i as usize] * yr[j as usize])
            })
            .sum()
    };
    let max_lag = (2.0 * fs) as i64;
    let peak = (-max_lag..=max_lag).max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b))).unwrap();

    let mut r = rng(66);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let total = r.random_range(0..200usize);
        let w = r.random_range(1..60usize);
        let step = r.random_range(1..20usize);
        let mut brute = 0;
        let mut start = 0;
        while start + w <= total {
            brute += 1;
            start += step;
        }
        if window_count(total, w, step) != brute {
            mismatches += 1;
        }
    }
    outcome(
        g_center >= 0.9 && g_1hz <= 0.1 && peak == 0 && mismatches == 0,
        format!(
            "gain {g_center:.6} at {center:.4} Hz >= 0.9, {g_1hz:.2e} at 1 Hz <= 0.1; xcorr peak lag {peak}; window-count mismatches {mismatches}/1000"
        ),
    )
}

fn criterion7(r: &ToyRuns) -> Outcome {
    let folds: Vec<_> = r.full.iter().flat_map(|run| run.folds.iter()).collect();
    let audits_ok = folds.iter().all(|f| f.audit.passed());
    let five_fold = r.full[0].folds.iter().filter(|f| f.record.subject_id == "s01").count() == 5;
    let (a, b) = (&r.full[0].report.records, &r.rerun.report.records);
    let mut worst = 0.0f64;
    let mut same_shape = a.len() == b.len();
    for (x, y) in a.iter().zip(b) {
        same_shape &= x.metrics.len() == y.metrics.len() && x.subject_id == y.subject_id && x.fold_index == y.fold_index;
        for ((k1, v1), (k2, v2)) in x.metrics.iter().zip(&y.metrics) {
            same_shape &= k1 == k2;
            worst = worst.max((v1 - v2).abs());
        }
    }
    outcome(
        audits_ok && five_fold && same_shape && worst <= 1e-6,
        format!(
            "leakage audit passed on {} folds; rerun max deviation {worst:.1e} <= 1e-6 over {} records",
            folds.len(),
            a.len()
        ),
    )
}

fn criterion8() -> Outcome {
    let mut r = rng(88);
    let scores: Vec<f64> = (0..200).map(|_| r.random_range(-1.0..1.0)).collect();
    let tau = calibrate_threshold(&scores, 5.0).unwrap();
    let rate = scores.iter().filter(|&&s| s >= tau).count() as f64 / 200.0;

    let sample: Vec<f64> = (0..500).map(|_| r.random_range(-1.0..1.0)).collect();
    let taus: Vec<f64> = (0..=200).map(|i| 1.0 - i as f64 / 100.0).collect();
    let rates: Vec<f64> = taus
        .iter()
        .map(|t| sample.iter().filter(|&&s| s >= *t).count() as f64 / sample.len() as f64)
        .collect();
    let monotone = rates.windows(2).all(|w| w[1] >= w[0]);
    let grid_ok = (interpolated_percentile(&(0..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>(), 10.0) - 0.1).abs() < 1e-9;
    outcome(
        (0.94..=0.96).contains(&rate) && monotone && grid_ok,
        format!("N=200, p=5: tau {tau:.4}, training acceptance {rate:.3} in [0.94, 0.96]; monotone over {} thresholds", taus.len()),
    )
}

fn main() {
    let started = Instant::now();
    let runs = toy_runs();
    let results = [
        ("overconfidence of the supervised baseline on OOD noise", criterion1(&runs)),
        ("two-stage training excludes noise and keeps accuracy", criterion2(&runs)),
        ("exclusion follows OOD difficulty", criterion3(&runs)),
        ("loss exactness", criterion4()),
        ("gradient correctness", criterion5()),
        ("signal-processing oracles", criterion6()),
        ("protocol integrity", criterion7(&runs)),
        ("detector construction", criterion8()),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("{} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed in {:.1}s", results.len() - failed, results.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
