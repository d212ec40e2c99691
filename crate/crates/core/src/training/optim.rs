use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    AdaptiveMoments,
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub(crate) struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters without a gradient are untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let t = self.step;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.dim()));
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    m.zip_mut_with(g, |m, &g| *m = MOMENTUM * *m + g);
                    p.scaled_add(-self.lr, m);
                }
                OptimizerKind::AdaptiveMoments => {
                    let v = self
                        .v
                        .entry(name.to_string())
                        .or_insert_with(|| Array2::zeros(p.dim()));
                    m.zip_mut_with(g, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
                    v.zip_mut_with(g, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        *p -= self.lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                    });
                }
            }
        }
    }
}
