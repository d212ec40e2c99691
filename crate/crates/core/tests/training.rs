use ndarray::Array2;
use oodguard::autodiff::Tape;
use oodguard::data::{GroupTag, LabelSpace, WindowedSample};
use oodguard::model::{BackboneKind, BackboneSpec, Model, SubspaceLayout, TrainingStage};
use oodguard::oodgen::{OodSource, SpecSource};
use oodguard::seed::rng;
use oodguard::training::{
    metric_loss_on_tape, mean_detector_distance, train_stage1, train_stage2, training_accuracy, DistanceKind,
    NestedSubspaceLayout, TrainingConfig,
};
use rand_distr::{Distribution, Normal};

const C: usize = 4;
const T: usize = 20;

fn separable(n_per_class: usize, seed: u64) -> Vec<WindowedSample> {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, 0.2).unwrap();
    let mut out = Vec::new();
    for i in 0..2 * n_per_class {
        let y = i % 2;
        let sign = if y == 0 { 1.0 } else { -1.0 };
        let data = Array2::from_shape_fn((C, T), |(c, t)| {
            sign * ((t as f64 / T as f64) * std::f64::consts::PI * (c + 1) as f64).sin() + noise.sample(&mut r)
        });
        out.push(WindowedSample::new(data, Some(y), format!("trial{}", i / 4), i % 4, GroupTag::InDist).unwrap());
    }
    out
}

fn model(seed: u64) -> Model {
    let layout = SubspaceLayout::new(8, 8).unwrap();
    let spec = BackboneSpec::new(BackboneKind::Mlp { hidden: vec![32] }, C, T, 16);
    Model::new(spec, layout, LabelSpace::new(["up", "down"]).unwrap(), seed).unwrap()
}

fn cfg() -> TrainingConfig {
    TrainingConfig {
        stage1_epochs: 15,
        stage2_epochs: 25,
        batch_size: 16,
        learning_rate: 3e-3,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn stage1_fits_separable_windows() {
    let train = separable(40, 1);
    let (m, log) = train_stage1(&model(0), &train, &cfg()).unwrap();
    assert_eq!(m.stage, TrainingStage::Stage1);
    assert!(training_accuracy(&m, &train).unwrap() >= 0.95);
    assert!(log.final_loss <= log.initial_loss);
    assert_eq!(log.epochs.len(), 15);
    assert_eq!(log.audit.classification_groups.len(), 1);
}

#[test]
fn stage1_with_zero_epochs_keeps_parameters() {
    let train = separable(5, 1);
    let m0 = model(0);
    let (m, log) = train_stage1(&m0, &train, &TrainingConfig { stage1_epochs: 0, ..cfg() }).unwrap();
    assert_eq!(m.params, m0.params);
    assert!(log.epochs.is_empty());
}

#[test]
fn stage1_is_deterministic() {
    let train = separable(10, 2);
    let (_, a) = train_stage1(&model(3), &train, &cfg()).unwrap();
    let (_, b) = train_stage1(&model(3), &train, &cfg()).unwrap();
    assert!((a.final_loss - b.final_loss).abs() < 1e-6);
}

#[test]
fn stage1_rejects_ood_windows() {
    let mut train = separable(3, 1);
    let g = oodguard::oodgen::gen_gaussian((C, T), 1.0, 0).unwrap();
    train.push(g);
    let err = train_stage1(&model(0), &train, &cfg()).unwrap_err();
    assert!(err.to_string().contains("OOD_GAUSS"), "{err}");
}

#[test]
fn zero_lambda_stage2_equals_stage1_continuation() {
    let train = separable(10, 4);
    let c = TrainingConfig { stage1_epochs: 3, stage2_epochs: 4, lambda_metric: 0.0, ..cfg() };
    let (m1, _) = train_stage1(&model(1), &train, &c).unwrap();
    let mut ood = SpecSource::gaussian(1.0, 9).unwrap();
    let (m2, _) = train_stage2(&m1, &train, &mut ood, &c).unwrap();
    let (cont, _) = train_stage1(&m1, &train, &TrainingConfig { stage1_epochs: 4, ..c.clone() }).unwrap();
    assert!(m2.params.max_abs_diff(&cont.params) <= 1e-9);
}

#[test]
fn stage2_separates_ood_and_keeps_accuracy() {
    let train = separable(40, 1);
    let c = cfg();
    let (m1, _) = train_stage1(&model(0), &train, &c).unwrap();
    let mut ood = SpecSource::gaussian(1.0, 77).unwrap();
    let (m2, log) = train_stage2(&m1, &train, &mut ood, &c).unwrap();
    let held_out: Vec<_> = SpecSource::gaussian(1.0, 1234).unwrap().next_batch(80, (C, T)).unwrap();
    let dist = mean_detector_distance(&m2, &train, &held_out).unwrap();
    let acc = training_accuracy(&m2, &train).unwrap();
    assert!(dist >= 1.5, "mean in/out cosine distance {dist}");
    assert!(acc >= 0.9, "accuracy {acc}");
    let (first, last) = (log.epochs[0].metric, log.epochs.last().unwrap().metric);
    assert!(last <= first, "metric {first} -> {last}");
    assert_eq!(log.audit.metric_out_groups.iter().copied().collect::<Vec<_>>(), vec![GroupTag::OodGauss]);
}

#[test]
fn stage2_needs_a_stage1_model() {
    let train = separable(3, 1);
    let mut ood = SpecSource::gaussian(1.0, 9).unwrap();
    assert!(train_stage2(&model(0), &train, &mut ood, &cfg()).is_err());
}

struct LabeledSource;

impl OodSource for LabeledSource {
    fn next_batch(&mut self, n: usize, shape: (usize, usize)) -> oodguard::Result<Vec<WindowedSample>> {
        Ok((0..n)
            .map(|i| WindowedSample::new(Array2::zeros(shape), Some(0), "leak", i, GroupTag::InDist).unwrap())
            .collect())
    }
}

#[test]
fn stage2_rejects_labeled_ood_batches() {
    let train = separable(3, 1);
    let c = TrainingConfig { stage1_epochs: 1, ..cfg() };
    let (m1, _) = train_stage1(&model(0), &train, &c).unwrap();
    let err = train_stage2(&m1, &train, &mut LabeledSource, &c).unwrap_err();
    assert!(err.to_string().contains("labeled"), "{err}");
}

#[test]
fn metric_term_has_no_head_gradient() {
    let m = model(2);
    let train = separable(3, 1);
    let ood = SpecSource::gaussian(1.0, 1).unwrap().next_batch(6, (C, T)).unwrap();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape);
    let a: Vec<_> = train.iter().collect();
    let b: Vec<_> = ood.iter().collect();
    let fi = m.features_on_tape(&mut tape, &bound, &a).unwrap();
    let fo = m.features_on_tape(&mut tape, &bound, &b).unwrap();
    let di = tape.slice_cols(fi, 0, 8);
    let dout = tape.slice_cols(fo, 0, 8);
    let loss = metric_loss_on_tape(&mut tape, di, dout, DistanceKind::Cosine);
    let g = tape.backward(loss);
    for (name, var) in bound.iter() {
        let zero = g.get(var).is_none_or(|g| g.iter().all(|&v| v == 0.0));
        assert_eq!(zero, name.starts_with("head."), "{name}");
    }
}

#[test]
fn nested_and_euclidean_variants_train() {
    let train = separable(8, 3);
    let c = TrainingConfig {
        stage1_epochs: 2,
        stage2_epochs: 2,
        nested: Some(NestedSubspaceLayout { m: 8, n: 4 }),
        distance_kind: DistanceKind::Euclidean,
        optimizer_kind: oodguard::training::OptimizerKind::SgdMomentum,
        learning_rate: 1e-2,
        ..cfg()
    };
    let (m1, _) = train_stage1(&model(0), &train, &c).unwrap();
    let mut ood = SpecSource::gaussian(1.0, 2).unwrap();
    let (m2, log) = train_stage2(&m1, &train, &mut ood, &c).unwrap();
    assert!(log.epochs.iter().all(|e| e.metric.is_finite() && e.ce.is_finite()));
    assert!(m2.params.max_abs_diff(&m1.params) > 0.0);
}
