use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::GroupTag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subspace {
    Detector,
    Classifier,
}

impl Subspace {
    pub fn as_str(self) -> &'static str {
        match self {
            Subspace::Detector => "detector",
            Subspace::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub group: GroupTag,
}

/// Projects centered rows onto the top two principal directions. Each
/// direction's first non-negligible loading is made positive.
pub fn export_projection(embeddings: &Array2<f64>, tags: &[GroupTag]) -> Result<Vec<ProjectedPoint>> {
    let (n, d) = embeddings.dim();
    if n != tags.len() {
        return Err(Error::shape("projection tags", n, tags.len()));
    }
    if n < 3 {
        return Err(Error::invalid(format!("projection needs at least 3 embeddings, got {n}")));
    }
    let mean = embeddings.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = embeddings - &mean;
    let scale = centered.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale <= 1e-12 {
        return Err(Error::invalid("projection input has rank 0 (all points coincide)"));
    }
    let x = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let tol = 1e-9 * eig.eigenvectors.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut axes = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        if let Some(first) = v.iter().find(|c| c.abs() > tol) {
            if *first < 0.0 {
                v.iter_mut().for_each(|c| *c = -*c);
            }
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    Ok(centered
        .rows()
        .into_iter()
        .zip(tags)
        .map(|(row, &group)| {
            let dot = |a: &[f64]| row.iter().zip(a).map(|(r, a)| r * a).sum::<f64>();
            ProjectedPoint {
                x: dot(&axes[0]),
                y: dot(&axes[1]),
                group,
            }
        })
        .collect())
}

pub fn write_projection_csv(path: &Path, points: &[ProjectedPoint]) -> Result<()> {
    let mut buf = String::from("x,y,group_tag\n");
    for p in points {
        buf.push_str(&format!("{},{},{}\n", p.x, p.y, p.group));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(buf.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dists(p: &[(f64, f64)]) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..p.len() {
            for j in 0..i {
                out.push((p[i].0 - p[j].0).hypot(p[i].1 - p[j].1));
            }
        }
        out
    }

    #[test]
    fn planar_points_keep_their_distances() {
        let mut r = crate::seed::rng(3);
        let pts: Vec<(f64, f64)> = (0..12).map(|_| (r.random_range(-3.0..3.0), r.random_range(-1.0..1.0))).collect();
        let mut e = Array2::zeros((12, 5));
        for (i, &(a, b)) in pts.iter().enumerate() {
            e[[i, 1]] = a;
            e[[i, 3]] = b;
            e[[i, 4]] = 7.0;
        }
        let tags = vec![GroupTag::InDist; 12];
        let proj = export_projection(&e, &tags).unwrap();
        let got: Vec<(f64, f64)> = proj.iter().map(|p| (p.x, p.y)).collect();
        for (a, b) in dists(&pts).iter().zip(dists(&got)) {
            assert!((a - b).abs() < 1e-6);
        }
        let var = |f: fn(&ProjectedPoint) -> f64| proj.iter().map(|p| f(p).powi(2)).sum::<f64>();
        assert!(var(|p| p.x) >= var(|p| p.y));
        assert_eq!(proj, export_projection(&e, &tags).unwrap());
    }

    #[test]
    fn duplicated_input_duplicates_output() {
        let mut r = crate::seed::rng(4);
        let base = Array2::from_shape_simple_fn((5, 4), || r.random_range(-1.0..1.0));
        let doubled = ndarray::concatenate(ndarray::Axis(0), &[base.view(), base.view()]).unwrap();
        let tags = vec![GroupTag::OodGauss; 10];
        let p = export_projection(&doubled, &tags).unwrap();
        for i in 0..5 {
            assert!((p[i].x - p[i + 5].x).abs() < 1e-12 && (p[i].y - p[i + 5].y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_input() {
        let e = Array2::from_elem((4, 3), 2.0);
        assert!(export_projection(&e, &[GroupTag::InDist; 4]).is_err());
        assert!(export_projection(&Array2::zeros((2, 3)), &[GroupTag::InDist; 2]).is_err());
    }
}
