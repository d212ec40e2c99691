//! Losses and the two-stage procedure: supervised cross-entropy, then
//! cross-entropy plus λ times a metric loss that pushes the detector-slice
//! embeddings of generated OOD windows away from in-distribution ones.

mod loss;
mod optim;

pub use loss::{
    combined_loss, cosine_distance, cross_entropy_loss, distance, euclidean_distance, metric_loss,
    metric_loss_on_tape, nested_metric_loss, nested_metric_loss_on_tape, DistanceKind,
    NestedSubspaceLayout, COSINE_EPS,
};
pub use optim::OptimizerKind;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{GroupTag, WindowedSample};
use crate::error::{Error, Result};
use crate::model::{Model, TrainingStage};
use crate::oodgen::OodSource;
use crate::seed::{derive_seed, rng};
use optim::Optimizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda_metric: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer_kind: OptimizerKind,
    pub seed: u64,
    pub distance_kind: DistanceKind,
    pub nested: Option<NestedSubspaceLayout>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_metric: 1.0,
            stage1_epochs: 30,
            stage2_epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer_kind: OptimizerKind::AdaptiveMoments,
            seed: 0,
            distance_kind: DistanceKind::Cosine,
            nested: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_metric >= 0.0 && self.lambda_metric.is_finite()) {
            return Err(Error::Config(format!("lambda_metric must be >= 0, got {}", self.lambda_metric)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub metric: f64,
    pub combined: f64,
}

/// Which windows reached which loss term during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingAudit {
    pub classification_groups: BTreeSet<GroupTag>,
    pub metric_out_groups: BTreeSet<GroupTag>,
    pub trial_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: TrainingStage,
    /// Full-set loss before the first and after the last update.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub audit: TrainingAudit,
}

impl StageLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = String::from("epoch,ce,metric,combined\n");
        for e in &self.epochs {
            buf.push_str(&format!("{},{},{},{}\n", e.epoch, e.ce, e.metric, e.combined));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(buf.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

fn check_training_windows(windows: &[WindowedSample], n_class: usize) -> Result<Vec<usize>> {
    if windows.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    windows
        .iter()
        .map(|w| match (w.group, w.label) {
            (GroupTag::InDist, Some(y)) if y < n_class => Ok(y),
            (GroupTag::InDist, Some(y)) => Err(Error::invalid(format!("label {y} out of range for {n_class} classes"))),
            (g, _) => Err(Error::invalid(format!(
                "training windows must be labeled IN_DIST; {}#{} is {g}",
                w.source_trial_id, w.window_index
            ))),
        })
        .collect()
}

fn batch_order(cfg: &TrainingConfig, n: usize, epochs: usize) -> Vec<Vec<Vec<usize>>> {
    let mut r = rng(derive_seed(cfg.seed, &["batch-order".into()]));
    (0..epochs)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut r);
            idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
        })
        .collect()
}

/// Mean cross-entropy over `windows` without recording gradients.
pub fn dataset_loss(model: &Model, windows: &[WindowedSample]) -> Result<f64> {
    let labels = check_training_windows(windows, model.n_class())?;
    let logits = model.logits_batch(&model.features_batch(windows)?)?;
    cross_entropy_loss(logits.view(), &labels.into_iter().map(Some).collect::<Vec<_>>())
}

/// Fraction of `windows` whose argmax prediction matches the label.
pub fn training_accuracy(model: &Model, windows: &[WindowedSample]) -> Result<f64> {
    let preds = model.predict(windows)?;
    let hits = preds
        .iter()
        .zip(windows)
        .filter(|((p, _), w)| Some(*p) == w.label)
        .count();
    Ok(hits as f64 / windows.len() as f64)
}

fn collect_grads(tape_grads: &crate::autodiff::Gradients, bound: &crate::model::Bound) -> BTreeMap<String, Array2<f64>> {
    bound
        .iter()
        .filter_map(|(k, v)| tape_grads.get(v).map(|g| (k.to_string(), g.clone())))
        .collect()
}

/// Supervised stage: cross-entropy on labeled in-distribution windows.
pub fn train_stage1(model: &Model, train: &[WindowedSample], cfg: &TrainingConfig) -> Result<(Model, StageLog)> {
    cfg.validate()?;
    let labels = check_training_windows(train, model.n_class())?;
    let mut model = model.clone();
    let initial_loss = dataset_loss(&model, train)?;
    let mut opt = Optimizer::new(cfg.optimizer_kind, cfg.learning_rate);
    let mut audit = TrainingAudit::default();
    let mut epochs = Vec::with_capacity(cfg.stage1_epochs);

    for (e, batches) in batch_order(cfg, train.len(), cfg.stage1_epochs).into_iter().enumerate() {
        let mut ce_sum = 0.0;
        for batch in &batches {
            let ws: Vec<&WindowedSample> = batch.iter().map(|&i| &train[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            for w in &ws {
                audit.classification_groups.insert(w.group);
                audit.trial_ids.insert(w.source_trial_id.clone());
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let f = model.features_on_tape(&mut tape, &bound, &ws)?;
            let z = model.logits_on_tape(&mut tape, &bound, f);
            let loss = tape.cross_entropy(z, &ys);
            ce_sum += tape.scalar(loss);
            let grads = collect_grads(&tape.backward(loss), &bound);
            opt.step(&mut model.params, &grads);
        }
        let ce = ce_sum / batches.len() as f64;
        epochs.push(EpochLog {
            epoch: e + 1,
            ce,
            metric: 0.0,
            combined: ce,
        });
    }
    model.stage = TrainingStage::Stage1;
    let final_loss = dataset_loss(&model, train)?;
    Ok((
        model,
        StageLog {
            stage: TrainingStage::Stage1,
            initial_loss,
            final_loss,
            epochs,
            audit,
        },
    ))
}

/// Metric stage: per batch an equally sized OOD batch is drawn and the
/// objective is cross-entropy plus λ times the metric loss on detector
/// slices. With the nested layout, batches holding a single class fall
/// back to the in/out term alone.
pub fn train_stage2(
    model: &Model,
    train: &[WindowedSample],
    ood: &mut dyn OodSource,
    cfg: &TrainingConfig,
) -> Result<(Model, StageLog)> {
    cfg.validate()?;
    if model.stage != TrainingStage::Stage1 {
        return Err(Error::invalid(format!("stage 2 needs a stage-1 model, found {:?}", model.stage)));
    }
    if let Some(n) = &cfg.nested {
        n.validate(model.layout.detector_dim)?;
    }
    let labels = check_training_windows(train, model.n_class())?;
    let mut model = model.clone();
    let k = model.layout.detector_dim;
    let shape = model.input_shape();
    let initial_loss = dataset_loss(&model, train)?;
    let mut opt = Optimizer::new(cfg.optimizer_kind, cfg.learning_rate);
    let mut audit = TrainingAudit::default();
    let mut epochs = Vec::with_capacity(cfg.stage2_epochs);

    for (e, batches) in batch_order(cfg, train.len(), cfg.stage2_epochs).into_iter().enumerate() {
        let (mut ce_sum, mut metric_sum, mut comb_sum) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let ws: Vec<&WindowedSample> = batch.iter().map(|&i| &train[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let out = ood.next_batch(ws.len(), shape)?;
            if out.len() != ws.len() {
                return Err(Error::invalid(format!("OOD source returned {} windows, wanted {}", out.len(), ws.len())));
            }
            for o in &out {
                if o.label.is_some() || !o.group.is_ood() {
                    return Err(Error::invalid(format!(
                        "OOD source yielded a labeled or in-distribution window ({}#{}, {})",
                        o.source_trial_id, o.window_index, o.group
                    )));
                }
                audit.metric_out_groups.insert(o.group);
            }
            for w in &ws {
                audit.classification_groups.insert(w.group);
                audit.trial_ids.insert(w.source_trial_id.clone());
            }
            let out_refs: Vec<&WindowedSample> = out.iter().collect();

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let f_in = model.features_on_tape(&mut tape, &bound, &ws)?;
            let z = model.logits_on_tape(&mut tape, &bound, f_in);
            let ce = tape.cross_entropy(z, &ys);
            let f_out = model.features_on_tape(&mut tape, &bound, &out_refs)?;
            let d_in = tape.slice_cols(f_in, 0, k);
            let d_out = tape.slice_cols(f_out, 0, k);
            let metric = match &cfg.nested {
                None => metric_loss_on_tape(&mut tape, d_in, d_out, cfg.distance_kind),
                Some(layout) => {
                    let groups = class_groups(&ys, model.n_class());
                    if groups.len() < 2 {
                        let ih = tape.slice_cols(d_in, 0, layout.n);
                        let oh = tape.slice_cols(d_out, 0, layout.n);
                        metric_loss_on_tape(&mut tape, ih, oh, cfg.distance_kind)
                    } else {
                        let parts: Vec<_> = groups
                            .iter()
                            .map(|rows| (gather_rows(&mut tape, d_in, rows), rows.len()))
                            .collect();
                        nested_metric_loss_on_tape(&mut tape, &parts, d_out, layout, cfg.distance_kind)?
                    }
                }
            };
            let (ce_v, metric_v) = (tape.scalar(ce), tape.scalar(metric));
            let objective = if cfg.lambda_metric == 0.0 {
                ce
            } else {
                let weighted = tape.scale(metric, cfg.lambda_metric);
                tape.add(ce, weighted)
            };
            ce_sum += ce_v;
            metric_sum += metric_v;
            comb_sum += combined_loss(ce_v, metric_v, cfg.lambda_metric);
            let grads = collect_grads(&tape.backward(objective), &bound);
            opt.step(&mut model.params, &grads);
        }
        let n = batches.len() as f64;
        epochs.push(EpochLog {
            epoch: e + 1,
            ce: ce_sum / n,
            metric: metric_sum / n,
            combined: comb_sum / n,
        });
    }
    model.stage = TrainingStage::Stage2;
    let final_loss = dataset_loss(&model, train)?;
    Ok((
        model,
        StageLog {
            stage: TrainingStage::Stage2,
            initial_loss,
            final_loss,
            epochs,
            audit,
        },
    ))
}

fn class_groups(ys: &[usize], n_class: usize) -> Vec<Vec<usize>> {
    (0..n_class)
        .map(|c| (0..ys.len()).filter(|&i| ys[i] == c).collect::<Vec<_>>())
        .filter(|g| !g.is_empty())
        .collect()
}

fn gather_rows(tape: &mut Tape, x: crate::autodiff::Var, rows: &[usize]) -> crate::autodiff::Var {
    let n = tape.value(x).nrows();
    let mut sel = Array2::zeros((rows.len(), n));
    for (i, &r) in rows.iter().enumerate() {
        sel[[i, r]] = 1.0;
    }
    let sel = tape.leaf(sel);
    tape.matmul(sel, x)
}

/// Mean in/out cosine distance between detector slices of two window sets.
pub fn mean_detector_distance(model: &Model, inp: &[WindowedSample], out: &[WindowedSample]) -> Result<f64> {
    let a = model.detector_embeddings(inp)?;
    let b = model.detector_embeddings(out)?;
    Ok(-metric_loss(a.view(), b.view(), DistanceKind::Cosine)?)
}

