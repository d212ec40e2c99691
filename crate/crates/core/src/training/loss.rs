use ndarray::{s, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::error::{Error, Result};

pub const COSINE_EPS: f64 = 1e-12;
/// Added under the square root of tape Euclidean distances so the gradient
/// stays finite at coincident points.
pub const EUCLIDEAN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Cosine,
    Euclidean,
}

/// Split of the detection subspace: dims `[0, n)` separate in from out,
/// dims `[n, m)` separate in-distribution classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NestedSubspaceLayout {
    pub m: usize,
    pub n: usize,
}

impl NestedSubspaceLayout {
    pub fn validate(&self, detector_dim: usize) -> Result<()> {
        if !(1 <= self.n && self.n < self.m && self.m <= detector_dim) {
            return Err(Error::Config(format!(
                "nested layout needs 1 <= n < m <= detector_dim ({detector_dim}), got n {} m {}",
                self.n, self.m
            )));
        }
        Ok(())
    }
}

/// Mean of `−log softmax(z)[y]`. Unlabeled rows are rejected.
pub fn cross_entropy_loss(logits: ArrayView2<'_, f64>, labels: &[Option<usize>]) -> Result<f64> {
    if logits.nrows() == 0 || logits.nrows() != labels.len() {
        return Err(Error::shape("cross-entropy labels", logits.nrows(), labels.len()));
    }
    let mut total = 0.0;
    for (i, (row, y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let y = y.ok_or_else(|| Error::invalid(format!("row {i} has no label; OOD windows cannot enter the classification loss")))?;
        if y >= row.len() {
            return Err(Error::invalid(format!("label {y} out of range for {} classes", row.len())));
        }
        total += log_sum_exp(row.iter().copied()) - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// `1 − u·v / ((‖u‖+ε)(‖v‖+ε))`.
pub fn cosine_distance(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    let nu = u.dot(&u).sqrt() + COSINE_EPS;
    let nv = v.dot(&v).sqrt() + COSINE_EPS;
    1.0 - u.dot(&v) / (nu * nv)
}

pub fn euclidean_distance(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    let d = &u - &v;
    d.dot(&d).sqrt()
}

pub fn distance(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, kind: DistanceKind) -> f64 {
    match kind {
        DistanceKind::Cosine => cosine_distance(u, v),
        DistanceKind::Euclidean => euclidean_distance(u, v),
    }
}

/// Mean of `−d(u_i, v_j)` over every in/out pair.
pub fn metric_loss(inp: ArrayView2<'_, f64>, out: ArrayView2<'_, f64>, kind: DistanceKind) -> Result<f64> {
    if inp.nrows() == 0 || out.nrows() == 0 {
        return Err(Error::invalid("metric loss needs non-empty in and out batches"));
    }
    if inp.ncols() != out.ncols() {
        return Err(Error::shape("metric loss feature width", inp.ncols(), out.ncols()));
    }
    let mut total = 0.0;
    for u in inp.rows() {
        for v in out.rows() {
            total -= distance(u, v, kind);
        }
    }
    Ok(total / (inp.nrows() * out.nrows()) as f64)
}

pub fn combined_loss(ce: f64, metric: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        ce
    } else {
        ce + lambda * metric
    }
}

/// In/out separation on dims `[0, n)` plus cross-class separation on
/// `[n, m)`, with the second term averaged over all cross-class pairs.
pub fn nested_metric_loss(
    in_by_class: &[ArrayView2<'_, f64>],
    out: ArrayView2<'_, f64>,
    layout: &NestedSubspaceLayout,
    kind: DistanceKind,
) -> Result<f64> {
    let present: Vec<_> = in_by_class.iter().filter(|c| c.nrows() > 0).collect();
    if present.len() < 2 {
        return Err(Error::invalid("nested metric loss needs at least two classes in the batch"));
    }
    let width = present[0].ncols();
    if layout.m > width || present.iter().any(|c| c.ncols() != width) {
        return Err(Error::shape("nested metric loss feature width", layout.m, width));
    }
    let head = |a: &ArrayView2<'_, f64>| a.slice(s![.., ..layout.n]).to_owned();
    let tail = |a: &ArrayView2<'_, f64>| a.slice(s![.., layout.n..layout.m]).to_owned();

    let all_in = ndarray::concatenate(
        ndarray::Axis(0),
        &present.iter().map(|c| c.view()).collect::<Vec<_>>(),
    )
    .expect("equal widths");
    let term1 = metric_loss(head(&all_in.view()).view(), head(&out).view(), kind)?;

    let (mut sum, mut pairs) = (0.0, 0usize);
    for i in 0..present.len() {
        for j in i + 1..present.len() {
            let (a, b) = (tail(present[i]), tail(present[j]));
            let n = a.nrows() * b.nrows();
            sum += metric_loss(a.view(), b.view(), kind)? * n as f64;
            pairs += n;
        }
    }
    Ok(term1 + sum / pairs as f64)
}

/// Metric loss recorded on a tape, `1 × 1`.
pub fn metric_loss_on_tape(tape: &mut Tape, inp: Var, out: Var, kind: DistanceKind) -> Var {
    match kind {
        DistanceKind::Cosine => {
            let u = tape.row_normalize(inp, COSINE_EPS);
            let v = tape.row_normalize(out, COSINE_EPS);
            let vt = tape.transpose(v);
            let sim = tape.matmul(u, vt);
            let m = tape.mean_all(sim);
            tape.add_scalar(m, -1.0)
        }
        DistanceKind::Euclidean => {
            let d = tape.pairwise_euclidean(inp, out, EUCLIDEAN_EPS);
            let m = tape.mean_all(d);
            tape.scale(m, -1.0)
        }
    }
}

/// Tape form of [`nested_metric_loss`]. `in_by_class` holds each present
/// class's detector features with its row count; classes with zero rows
/// must be left out by the caller.
pub fn nested_metric_loss_on_tape(
    tape: &mut Tape,
    in_by_class: &[(Var, usize)],
    out: Var,
    layout: &NestedSubspaceLayout,
    kind: DistanceKind,
) -> Result<Var> {
    if in_by_class.len() < 2 {
        return Err(Error::invalid("nested metric loss needs at least two classes in the batch"));
    }
    let all: Vec<Var> = in_by_class.iter().map(|(v, _)| *v).collect();
    let all = tape.concat_rows(&all);
    let ih = tape.slice_cols(all, 0, layout.n);
    let oh = tape.slice_cols(out, 0, layout.n);
    let mut total = metric_loss_on_tape(tape, ih, oh, kind);
    let tails: Vec<(Var, usize)> = in_by_class
        .iter()
        .map(|&(v, n)| (tape.slice_cols(v, layout.n, layout.m), n))
        .collect();
    let pairs: usize = (0..tails.len())
        .flat_map(|i| (i + 1..tails.len()).map(move |j| (i, j)))
        .map(|(i, j)| tails[i].1 * tails[j].1)
        .sum();
    for i in 0..tails.len() {
        for j in i + 1..tails.len() {
            let t = metric_loss_on_tape(tape, tails[i].0, tails[j].0, kind);
            let w = (tails[i].1 * tails[j].1) as f64 / pairs as f64;
            let t = tape.scale(t, w);
            total = tape.add(total, t);
        }
    }
    Ok(total)
}
