//! Per-fold records, cross-subject aggregation and the report files.
//!
//! Metric columns follow the paper's table order: accuracy, in-distribution
//! confidence, OOD confidence per family, acceptance rate, exclusion rate per
//! family, then the stage-1 snapshot (`stage1_*`) when stage 2 ran.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KEY_COLUMNS: [&str; 6] = ["subject_id", "fold", "fold_seed", "n_train", "n_valid", "config_hash"];
pub const AGGREGATE_SUBJECT: &str = "ALL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub subject_id: String,
    pub fold_index: usize,
    pub fold_seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub config_hash: String,
    /// `(column, value)` in column order.
    pub metrics: Vec<(String, f64)>,
}

impl FoldRecord {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == metric).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_subjects: usize,
}

impl Aggregate {
    pub fn cell(&self) -> String {
        format_cell(self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub records: Vec<FoldRecord>,
    pub aggregates: Vec<Aggregate>,
    pub n_subjects: usize,
    pub config_hash: String,
    pub master_seed: u64,
}

impl ExperimentReport {
    pub fn aggregate(&self, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.metric == metric)
    }
}

/// `"m ± s"` with two decimals.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

fn metric_order(records: &[FoldRecord]) -> Vec<String> {
    let mut order: Vec<String> = Vec::new();
    for r in records {
        for (k, _) in &r.metrics {
            if !order.contains(k) {
                order.push(k.clone());
            }
        }
    }
    order
}

/// Folds are averaged within each subject, then mean and population
/// standard deviation are taken across subjects.
pub fn aggregate_report(records: &[FoldRecord], master_seed: u64) -> Result<ExperimentReport> {
    if records.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty report"));
    }
    let mut subjects: Vec<&str> = Vec::new();
    for r in records {
        if !subjects.contains(&r.subject_id.as_str()) {
            subjects.push(&r.subject_id);
        }
    }
    let mut aggregates = Vec::new();
    for metric in metric_order(records) {
        let per_subject: Vec<f64> = subjects
            .iter()
            .filter_map(|s| {
                let vals: Vec<f64> = records
                    .iter()
                    .filter(|r| r.subject_id == *s)
                    .filter_map(|r| r.get(&metric))
                    .collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        let n = per_subject.len() as f64;
        let mean = per_subject.iter().sum::<f64>() / n;
        let var = per_subject.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        aggregates.push(Aggregate {
            metric,
            mean,
            std: var.sqrt(),
            n_subjects: per_subject.len(),
        });
    }
    Ok(ExperimentReport {
        records: records.to_vec(),
        aggregates,
        n_subjects: subjects.len(),
        config_hash: records[0].config_hash.clone(),
        master_seed,
    })
}

/// Fold rows followed by `ALL,mean` and `ALL,std` rows.
pub fn write_report_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    let order = metric_order(&report.records);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header: Vec<&str> = KEY_COLUMNS.iter().copied().chain(order.iter().map(String::as_str)).collect();
    w.write_record(&header)?;
    for r in &report.records {
        let mut row = vec![
            r.subject_id.clone(),
            r.fold_index.to_string(),
            r.fold_seed.to_string(),
            r.n_train.to_string(),
            r.n_valid.to_string(),
            r.config_hash.clone(),
        ];
        row.extend(order.iter().map(|m| r.get(m).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let mut row = vec![
            AGGREGATE_SUBJECT.to_string(),
            label.to_string(),
            report.master_seed.to_string(),
            String::new(),
            String::new(),
            report.config_hash.clone(),
        ];
        row.extend(order.iter().map(|m| {
            report
                .aggregate(m)
                .map(|a| if pick == 0 { a.mean } else { a.std }.to_string())
                .unwrap_or_default()
        }));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the fold rows of a report CSV; aggregate rows are skipped.
pub fn read_report_csv(path: &Path) -> Result<Vec<FoldRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    for required in ["subject_id", "fold", "accuracy", "confidence_in"] {
        if col(required).is_none() {
            return Err(Error::format(path, format!("missing column {required}")));
        }
    }
    let metric_cols: Vec<usize> = (0..header.len())
        .filter(|&i| !KEY_COLUMNS.contains(&header[i].as_str()))
        .collect();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::format(path, format!("row {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::format(
                path,
                format!("row {line}: expected {} columns, found {}", header.len(), rec.len()),
            ));
        }
        let field = |name: &str| col(name).map(|c| rec[c].to_string()).unwrap_or_default();
        let fold = field("fold");
        if fold == "mean" || fold == "std" {
            continue;
        }
        let parse_int = |name: &str, required: bool| -> Result<u64> {
            let raw = field(name);
            if raw.is_empty() && !required {
                return Ok(0);
            }
            raw.parse().map_err(|_| {
                Error::format(
                    path,
                    format!("row {line}, column {}: expected an integer, found {raw:?}", col(name).unwrap_or(0) + 1),
                )
            })
        };
        let mut metrics = Vec::new();
        for &c in &metric_cols {
            let raw = &rec[c];
            if raw.is_empty() {
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| {
                Error::format(path, format!("row {line}, column {} ({}): expected a number, found {raw:?}", c + 1, header[c]))
            })?;
            metrics.push((header[c].clone(), v));
        }
        out.push(FoldRecord {
            subject_id: field("subject_id"),
            fold_index: parse_int("fold", true)? as usize,
            fold_seed: parse_int("fold_seed", false)?,
            n_train: parse_int("n_train", false)? as usize,
            n_valid: parse_int("n_valid", false)? as usize,
            config_hash: field("config_hash"),
            metrics,
        });
    }
    if out.is_empty() {
        return Err(Error::format(path, "no fold rows"));
    }
    Ok(out)
}

/// Header line plus one line of `m ± s` cells.
pub fn format_table(report: &ExperimentReport) -> String {
    let cells: Vec<(String, String)> = report
        .aggregates
        .iter()
        .map(|a| (a.metric.clone(), a.cell()))
        .collect();
    let widths: Vec<usize> = cells
        .iter()
        .map(|(h, c)| h.chars().count().max(c.chars().count()))
        .collect();
    let line = |items: Vec<&str>| {
        items
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:>w$}", w = *w))
            .collect::<Vec<_>>()
            .join("  ")
    };
    format!(
        "{}\n{}\n",
        line(cells.iter().map(|(h, _)| h.as_str()).collect()),
        line(cells.iter().map(|(_, c)| c.as_str()).collect())
    )
}

/// Per-subject means, for plain-text breakdowns.
pub fn subject_means(records: &[FoldRecord], metric: &str) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some(v) = r.get(metric) {
            let e = acc.entry(r.subject_id.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
