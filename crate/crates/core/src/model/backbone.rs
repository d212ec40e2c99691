use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{xavier, Bound, ParamSet};
use crate::autodiff::{Tape, Var};
use crate::data::WindowedSample;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneKind {
    /// Flattened window through ReLU hidden layers; `hidden: []` is a single
    /// affine map.
    Mlp { hidden: Vec<usize> },
    /// Two same-padded temporal convolutions with ReLU, then mean pooling
    /// over time. `kernel` must be odd.
    Conv1d { channels: usize, kernel: usize },
    /// Channels as tokens: each channel's time course is embedded linearly,
    /// plus a learned per-channel embedding, then pre-norm encoder layers
    /// and mean pooling over tokens.
    TransformerEnc {
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        ff_dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub input_channels: usize,
    pub input_len: usize,
    pub feature_dim: usize,
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind, input_channels: usize, input_len: usize, feature_dim: usize) -> Self {
        Self {
            kind,
            input_channels,
            input_len,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_len == 0 || self.feature_dim == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        match &self.kind {
            BackboneKind::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::Config("mlp hidden sizes must be positive".into()));
                }
            }
            BackboneKind::Conv1d { channels, kernel } => {
                if *channels == 0 || kernel % 2 == 0 {
                    return Err(Error::Config(format!(
                        "conv1d needs channels > 0 and an odd kernel, got {channels}/{kernel}"
                    )));
                }
            }
            BackboneKind::TransformerEnc {
                d_model,
                n_heads,
                n_layers,
                ff_dim,
            } => {
                if *n_heads == 0 || d_model % n_heads != 0 || *n_layers == 0 || *ff_dim == 0 {
                    return Err(Error::Config(format!(
                        "transformer needs n_heads dividing d_model and positive sizes, got d_model {d_model}, n_heads {n_heads}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub(super) fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let (c, t, f) = (self.input_channels, self.input_len, self.feature_dim);
        match &self.kind {
            BackboneKind::Mlp { hidden } => {
                let mut fan_in = c * t;
                for (i, &h) in hidden.iter().enumerate() {
                    init_dense(params, rng, &format!("hidden{i}"), fan_in, h);
                    fan_in = h;
                }
                init_dense(params, rng, "out", fan_in, f);
            }
            BackboneKind::Conv1d { channels, kernel } => {
                init_dense(params, rng, "conv0", kernel * c, *channels);
                init_dense(params, rng, "conv1", kernel * channels, *channels);
                init_dense(params, rng, "out", *channels, f);
            }
            BackboneKind::TransformerEnc {
                d_model,
                n_layers,
                ff_dim,
                ..
            } => {
                let d = *d_model;
                init_dense(params, rng, "embed", t, d);
                let mut tok = xavier(rng, c, d);
                tok.mapv_inplace(|v| v * 0.1);
                params.insert("backbone.channel_embed".into(), tok);
                for l in 0..*n_layers {
                    for p in ["q", "k", "v", "o"] {
                        params.insert(format!("backbone.layer{l}.{p}"), xavier(rng, d, d));
                    }
                    init_dense(params, rng, &format!("layer{l}.ff0"), d, *ff_dim);
                    init_dense(params, rng, &format!("layer{l}.ff1"), *ff_dim, d);
                    for ln in ["ln0", "ln1"] {
                        params.insert(format!("backbone.layer{l}.{ln}.g"), Array2::ones((1, d)));
                        params.insert(format!("backbone.layer{l}.{ln}.b"), Array2::zeros((1, d)));
                    }
                }
                params.insert("backbone.ln_final.g".into(), Array2::ones((1, d)));
                params.insert("backbone.ln_final.b".into(), Array2::zeros((1, d)));
                init_dense(params, rng, "out", d, f);
            }
        }
    }

    pub(super) fn forward(&self, tape: &mut Tape, p: &Bound, windows: &[&WindowedSample]) -> Var {
        match &self.kind {
            BackboneKind::Mlp { hidden } => {
                let n = self.input_channels * self.input_len;
                let mut x = Array2::zeros((windows.len(), n));
                for (mut row, w) in x.rows_mut().into_iter().zip(windows) {
                    row.iter_mut().zip(w.data.iter()).for_each(|(r, &v)| *r = v);
                }
                let mut h = tape.leaf(x);
                for i in 0..hidden.len() {
                    h = dense(tape, p, &format!("hidden{i}"), h);
                    h = tape.relu(h);
                }
                dense(tape, p, "out", h)
            }
            BackboneKind::Conv1d { kernel, .. } => {
                let pad = (kernel - 1) / 2;
                let rows: Vec<Var> = windows
                    .iter()
                    .map(|w| {
                        let x = tape.leaf(w.data.t().to_owned());
                        let mut h = x;
                        for conv in ["conv0", "conv1"] {
                            let cols = tape.im2col(h, *kernel, pad);
                            h = dense(tape, p, conv, cols);
                            h = tape.relu(h);
                        }
                        tape.mean_rows(h)
                    })
                    .collect();
                let pooled = tape.concat_rows(&rows);
                dense(tape, p, "out", pooled)
            }
            BackboneKind::TransformerEnc {
                d_model,
                n_heads,
                n_layers,
                ..
            } => {
                let dh = d_model / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let rows: Vec<Var> = windows
                    .iter()
                    .map(|w| {
                        let x = tape.leaf(w.data.clone());
                        let e = dense(tape, p, "embed", x);
                        let mut h = tape.add(e, p.var("backbone.channel_embed"));
                        for l in 0..*n_layers {
                            let z = layer_norm(tape, p, &format!("layer{l}.ln0"), h);
                            let q = tape.matmul(z, p.var(&format!("backbone.layer{l}.q")));
                            let k = tape.matmul(z, p.var(&format!("backbone.layer{l}.k")));
                            let v = tape.matmul(z, p.var(&format!("backbone.layer{l}.v")));
                            let heads: Vec<Var> = (0..*n_heads)
                                .map(|hd| {
                                    let (lo, hi) = (hd * dh, (hd + 1) * dh);
                                    let qh = tape.slice_cols(q, lo, hi);
                                    let kh = tape.slice_cols(k, lo, hi);
                                    let vh = tape.slice_cols(v, lo, hi);
                                    let kt = tape.transpose(kh);
                                    let s = tape.matmul(qh, kt);
                                    let s = tape.scale(s, scale);
                                    let a = tape.softmax_rows(s);
                                    tape.matmul(a, vh)
                                })
                                .collect();
                            let cat = tape.concat_cols(&heads);
                            let att = tape.matmul(cat, p.var(&format!("backbone.layer{l}.o")));
                            h = tape.add(h, att);
                            let z = layer_norm(tape, p, &format!("layer{l}.ln1"), h);
                            let ff = dense(tape, p, &format!("layer{l}.ff0"), z);
                            let ff = tape.relu(ff);
                            let ff = dense(tape, p, &format!("layer{l}.ff1"), ff);
                            h = tape.add(h, ff);
                        }
                        let h = layer_norm(tape, p, "ln_final", h);
                        tape.mean_rows(h)
                    })
                    .collect();
                let pooled = tape.concat_rows(&rows);
                dense(tape, p, "out", pooled)
            }
        }
    }
}

fn dense(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Var {
    let y = tape.matmul(x, p.var(&format!("backbone.{name}.w")));
    tape.add_row(y, p.var(&format!("backbone.{name}.b")))
}

fn layer_norm(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Var {
    let z = tape.layer_norm_rows(x, LN_EPS);
    let z = tape.mul_row(z, p.var(&format!("backbone.{name}.g")));
    tape.add_row(z, p.var(&format!("backbone.{name}.b")))
}

fn init_dense(params: &mut ParamSet, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
    params.insert(format!("backbone.{name}.w"), xavier(rng, fan_in, fan_out));
    params.insert(format!("backbone.{name}.b"), Array2::zeros((1, fan_out)));
}
