use std::collections::BTreeSet;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{acceptance_rate, accuracy, exclusion_rate, mean_confidence};
use super::projection::{export_projection, ProjectedPoint, Subspace};
use super::report::{aggregate_report, ExperimentReport, FoldRecord};
use crate::config::ExperimentConfig;
use crate::data::{make_cv_splits, windows_for_split, Dataset, DatasetSplit, GroupTag, WindowedSample};
use crate::detector::DetectorState;
use crate::error::{Error, Result};
use crate::model::checkpoint::CheckpointMeta;
use crate::model::{BackboneSpec, Model};
use crate::oodgen::SpecSource;
use crate::preprocess::preprocess_trial;
use crate::seed::{derive_seed, fold_seed};
use crate::training::{train_stage1, train_stage2, StageLog};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Skip stage 2 and the detector, as in the plain supervised baseline.
    pub stage1_only: bool,
    /// Worker threads for folds; `None` uses the global pool.
    pub jobs: Option<usize>,
}

/// Every preprocessed window of one subject.
#[derive(Debug, Clone)]
pub struct SubjectWindows {
    pub subject_id: String,
    pub trial_ids: Vec<String>,
    pub windows: Vec<WindowedSample>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub train_trials: BTreeSet<String>,
    pub valid_trials: BTreeSet<String>,
    /// Trials whose windows reached any loss during training.
    pub trained_on: BTreeSet<String>,
    /// Source trials of every evaluated window, OOD derivatives included.
    pub evaluated: BTreeSet<String>,
    pub classification_groups: BTreeSet<GroupTag>,
}

impl LeakageAudit {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in self.trained_on.intersection(&self.valid_trials) {
            out.push(format!("validation trial {t} was used in training"));
        }
        for t in self.evaluated.intersection(&self.train_trials) {
            out.push(format!("training trial {t} was evaluated"));
        }
        if self.classification_groups.iter().any(|g| g.is_ood()) {
            out.push("OOD windows reached the classification loss".into());
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.violations().is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub record: FoldRecord,
    pub model: Model,
    pub meta: CheckpointMeta,
    pub stage1_log: StageLog,
    pub stage2_log: Option<StageLog>,
    pub projections: Vec<(Subspace, Vec<ProjectedPoint>)>,
    pub audit: LeakageAudit,
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub folds: Vec<FoldOutcome>,
}

pub fn prepare_subject(ds: &Dataset, subject: &str, cfg: &ExperimentConfig) -> Result<SubjectWindows> {
    let trials = ds.subject_trials(subject);
    if trials.is_empty() {
        return Err(Error::invalid(format!("no trials for subject {subject}")));
    }
    let mut windows = Vec::new();
    let mut trial_ids = Vec::new();
    for dt in trials {
        trial_ids.push(dt.trial.trial_id.clone());
        windows.extend(preprocess_trial(dt, &cfg.preprocess)?);
    }
    if windows.is_empty() {
        return Err(Error::invalid(format!("subject {subject}: preprocessing produced no windows")));
    }
    Ok(SubjectWindows {
        subject_id: subject.to_string(),
        trial_ids,
        windows,
    })
}

pub fn subject_splits(sw: &SubjectWindows, cfg: &ExperimentConfig) -> Result<Vec<DatasetSplit>> {
    let seed = derive_seed(cfg.seed, &["split".into(), sw.subject_id.as_str().into()]);
    make_cv_splits(&sw.trial_ids, cfg.eval.n_folds, seed)
}

fn ood_eval_sets(
    cfg: &ExperimentConfig,
    valid: &[WindowedSample],
    shape: (usize, usize),
    seed: u64,
) -> Result<Vec<(GroupTag, Vec<WindowedSample>)>> {
    let base = derive_seed(seed, &["ood-eval".into()]);
    cfg.ood
        .eval
        .iter()
        .map(|spec| {
            let n = spec.count.unwrap_or(valid.len());
            let ws = spec.generate(shape, valid, base, n, &cfg.ood.mix_thresholds)?;
            let tag = ws.first().map_or(spec.family, |w| w.group);
            Ok((tag, ws))
        })
        .collect()
}

fn confidence_metrics(
    model: &Model,
    valid: &[WindowedSample],
    ood: &[(GroupTag, Vec<WindowedSample>)],
    prefix: &str,
) -> Result<Vec<(String, f64)>> {
    let preds: Vec<usize> = model.predict(valid)?.into_iter().map(|(p, _)| p).collect();
    let labels: Vec<usize> = valid.iter().map(|w| w.label.expect("in-distribution")).collect();
    let mut out = vec![
        (format!("{prefix}accuracy"), accuracy(&preds, &labels)?),
        (format!("{prefix}confidence_in"), mean_confidence(valid, model)?),
    ];
    for (tag, ws) in ood {
        if !ws.is_empty() {
            out.push((format!("{prefix}confidence_{}", tag.column_suffix()), mean_confidence(ws, model)?));
        }
    }
    Ok(out)
}

fn projections(
    model: &Model,
    valid: &[WindowedSample],
    ood: &[(GroupTag, Vec<WindowedSample>)],
) -> Result<Vec<(Subspace, Vec<ProjectedPoint>)>> {
    let all: Vec<WindowedSample> = valid
        .iter()
        .cloned()
        .chain(ood.iter().flat_map(|(_, ws)| ws.iter().cloned()))
        .collect();
    let tags: Vec<GroupTag> = all.iter().map(|w| w.group).collect();
    let f = model.features_batch(&all)?;
    let k = model.layout.detector_dim;
    let det: Array2<f64> = f.slice(s![.., ..k]).to_owned();
    let cls: Array2<f64> = f.slice(s![.., k..]).to_owned();
    Ok(vec![
        (Subspace::Detector, export_projection(&det, &tags)?),
        (Subspace::Classifier, export_projection(&cls, &tags)?),
    ])
}

/// Trains and evaluates one fold.
pub fn run_fold(
    ds: &Dataset,
    sw: &SubjectWindows,
    split: &DatasetSplit,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<FoldOutcome> {
    let fseed = fold_seed(cfg.seed, &sw.subject_id, split.fold_index);
    let (train, valid) = windows_for_split(&sw.windows, split)?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("fold has no training or no validation windows"));
    }
    let shape = train[0].shape();
    let spec = BackboneSpec::new(cfg.model.backbone.clone(), shape.0, shape.1, cfg.model.layout.feature_dim);
    let init_seed = derive_seed(fseed, &["init".into()]);
    let training_seed = derive_seed(fseed, &["training".into(), cfg.training.seed.into()]);
    let tcfg = crate::training::TrainingConfig {
        seed: training_seed,
        ..cfg.training.clone()
    };
    let model = Model::new(spec, cfg.model.layout, ds.labels.clone(), init_seed)?;

    let ood = ood_eval_sets(cfg, &valid, shape, fseed)?;
    let (m1, log1) = train_stage1(&model, &train, &tcfg)?;
    let stage1_metrics = confidence_metrics(&m1, &valid, &ood, "stage1_")?;

    let mut audit = LeakageAudit {
        train_trials: split.train_trial_ids.clone(),
        valid_trials: split.valid_trial_ids.clone(),
        trained_on: log1.audit.trial_ids.clone(),
        evaluated: valid
            .iter()
            .chain(ood.iter().flat_map(|(_, ws)| ws.iter()))
            .filter(|w| w.source_trial_id != crate::oodgen::GENERATED_SOURCE)
            .map(|w| w.source_trial_id.clone())
            .collect(),
        classification_groups: log1.audit.classification_groups.clone(),
    };

    let (final_model, log2, metrics) = if opts.stage1_only {
        let m = stage1_metrics
            .into_iter()
            .map(|(k, v)| (k.trim_start_matches("stage1_").to_string(), v))
            .collect();
        (m1, None, m)
    } else {
        let ood_seed = derive_seed(fseed, &["ood-train".into()]);
        let mut source =
            SpecSource::new(cfg.ood.train.clone(), train.clone(), ood_seed)?.with_thresholds(cfg.ood.mix_thresholds);
        let (mut m2, log2) = train_stage2(&m1, &train, &mut source, &tcfg)?;
        audit.trained_on.extend(log2.audit.trial_ids.iter().cloned());
        audit.classification_groups.extend(log2.audit.classification_groups.iter().copied());
        m2.detector = Some(DetectorState::fit(
            m2.detector_embeddings(&train)?.view(),
            cfg.eval.detector_percentile,
        )?);
        let mut metrics = confidence_metrics(&m2, &valid, &ood, "")?;
        metrics.push(("acceptance_in".into(), acceptance_rate(&valid, &m2)?));
        for (tag, ws) in &ood {
            if !ws.is_empty() {
                metrics.push((format!("exclusion_{}", tag.column_suffix()), exclusion_rate(ws, &m2)?));
            }
        }
        metrics.extend(stage1_metrics);
        (m2, Some(log2), metrics)
    };

    let violations = audit.violations();
    if !violations.is_empty() {
        return Err(Error::invalid(format!("leakage audit failed: {}", violations.join("; "))));
    }
    let projections = if cfg.eval.projections {
        projections(&final_model, &valid, &ood)?
    } else {
        Vec::new()
    };
    let config_hash = cfg.config_hash();
    Ok(FoldOutcome {
        record: FoldRecord {
            subject_id: sw.subject_id.clone(),
            fold_index: split.fold_index,
            fold_seed: fseed,
            n_train: train.len(),
            n_valid: valid.len(),
            config_hash: config_hash.clone(),
            metrics,
        },
        model: final_model,
        meta: CheckpointMeta {
            init_seed,
            training_seed: Some(training_seed),
            subject_id: Some(sw.subject_id.clone()),
            fold_index: Some(split.fold_index),
            config_hash: Some(config_hash),
        },
        stage1_log: log1,
        stage2_log: log2,
        projections,
        audit,
    })
}

fn run_tasks(ds: &Dataset, tasks: &[(SubjectWindows, DatasetSplit)], cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<FoldOutcome>> {
    let work = || {
        tasks
            .par_iter()
            .map(|(sw, split)| run_fold(ds, sw, split, cfg, opts).map_err(|e| e.with_fold(&sw.subject_id, split.fold_index)))
            .collect::<Result<Vec<_>>>()
    };
    match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

fn tasks_for(ds: &Dataset, subject: &str, cfg: &ExperimentConfig) -> Result<Vec<(SubjectWindows, DatasetSplit)>> {
    let sw = prepare_subject(ds, subject, cfg)?;
    let splits = subject_splits(&sw, cfg)?;
    Ok(splits.into_iter().map(|s| (sw.clone(), s)).collect())
}

/// Cross-validation over the trials of one subject.
pub fn run_subject_experiment(
    ds: &Dataset,
    subject: &str,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<Vec<FoldOutcome>> {
    cfg.validate()?;
    run_tasks(ds, &tasks_for(ds, subject, cfg)?, cfg, opts)
}

/// Every subject in the dataset, folds in parallel, then aggregation.
pub fn run_experiment(ds: &Dataset, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentRun> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    for subject in ds.subjects() {
        tasks.extend(tasks_for(ds, &subject, cfg)?);
    }
    let folds = run_tasks(ds, &tasks, cfg, opts)?;
    let records: Vec<FoldRecord> = folds.iter().map(|f| f.record.clone()).collect();
    Ok(ExperimentRun {
        report: aggregate_report(&records, cfg.seed)?,
        folds,
    })
}

/// Recomputes the detector and classifier projections of one fold for an
/// already trained model, using the fold's validation windows and OOD sets.
pub fn project_fold(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    model: &Model,
    subject: &str,
    fold_index: usize,
) -> Result<Vec<(Subspace, Vec<ProjectedPoint>)>> {
    cfg.validate()?;
    let sw = prepare_subject(ds, subject, cfg)?;
    let split = subject_splits(&sw, cfg)?
        .into_iter()
        .find(|s| s.fold_index == fold_index)
        .ok_or_else(|| Error::invalid(format!("subject {subject} has no fold {fold_index}")))?;
    let (_, valid) = windows_for_split(&sw.windows, &split)?;
    let shape = model.input_shape();
    if valid.first().map(WindowedSample::shape) != Some(shape) {
        return Err(Error::shape("validation windows", format!("{shape:?}"), format!("{:?}", valid.first().map(WindowedSample::shape))));
    }
    let ood = ood_eval_sets(cfg, &valid, shape, fold_seed(cfg.seed, subject, fold_index))?;
    projections(model, &valid, &ood)
}
