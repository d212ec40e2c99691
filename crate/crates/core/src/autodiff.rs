//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! walks the record in reverse and returns the gradient of a scalar output
//! with respect to every node. Vectors are `1 × n` matrices. The operation
//! set is exactly what the backbones, head and losses need.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    MeanAll(Var),
    Im2Col { input: Var, kernel: usize, pad: usize },
    RowNormalize(Var, f64),
    PairwiseEuclidean(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// `None` when `var` does not influence the output.
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads[var.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a + row` with `row` (`1 × n`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a ⊙ row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise `(x − mean) / sqrt(var + eps)`, without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(v, Op::LayerNormRows(a, eps))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Column means, `1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a).mean().expect("non-empty");
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a))
    }

    /// Unfolds a time-major `[T × C]` input for a stride-1 convolution with
    /// `kernel` taps and `pad` zeros on each side: row `t` holds
    /// `x[t − pad + k, c]` at column `k·C + c`.
    pub fn im2col(&mut self, input: Var, kernel: usize, pad: usize) -> Var {
        let x = self.value(input);
        let (t_in, c) = x.dim();
        let t_out = t_in + 2 * pad + 1 - kernel;
        let mut v = Array2::<f64>::zeros((t_out, kernel * c));
        for t in 0..t_out {
            for k in 0..kernel {
                let src = t + k;
                if src >= pad && src - pad < t_in {
                    v.slice_mut(s![t, k * c..(k + 1) * c])
                        .assign(&x.row(src - pad));
                }
            }
        }
        self.push(v, Op::Im2Col { input, kernel, pad })
    }

    /// Each row divided by `(‖row‖ + eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n + eps;
        }
        self.push(v, Op::RowNormalize(a, eps))
    }

    /// `D[i, j] = sqrt(‖u_i − v_j‖² + eps)`.
    pub fn pairwise_euclidean(&mut self, u: Var, v: Var, eps: f64) -> Var {
        let (a, b) = (self.value(u), self.value(v));
        let d = Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
            let diff = &a.row(i) - &b.row(j);
            (diff.dot(&diff) + eps).sqrt()
        });
        self.push(d, Op::PairwiseEuclidean(u, v))
    }

    /// Mean over rows of `−log softmax(logits)[label]`, `1 × 1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), labels.len(), "one label per logit row");
        let total: f64 = z
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &y)| log_sum_exp(row.iter().copied()) - row[y])
            .sum();
        let v = Array2::from_elem((1, 1), total / labels.len() as f64);
        self.push(v, Op::CrossEntropy(logits, labels.to_vec()))
    }

    /// Reverse sweep from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *r, gr);
                }
                Op::MulRow(a, r) => {
                    let ga = &g * self.value(*r);
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *r, gr);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for ((gy, yr), mut out) in g.rows().into_iter().zip(y.rows()).zip(ga.rows_mut()) {
                        let dot = gy.dot(&yr);
                        out.assign(&(&yr * &(&gy - dot)));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let xhat = &node.value;
                    let n = x.ncols() as f64;
                    let mut ga = Array2::zeros(x.dim());
                    for (((xr, xh), gr), mut out) in x
                        .rows()
                        .into_iter()
                        .zip(xhat.rows())
                        .zip(g.rows())
                        .zip(ga.rows_mut())
                    {
                        let mean = xr.sum() / n;
                        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = gr.sum() / n;
                        let gx_mean = gr.dot(&xh) / n;
                        out.assign(&((&gr - g_mean - &(&xh * gx_mean)) * inv));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        accumulate(&mut grads, *p, g.slice(s![offset..offset + h, ..]).to_owned());
                        offset += h;
                    }
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.value(*a).dim();
                    let ga = g.broadcast((rows, cols)).expect("1 × n").to_owned() / rows as f64;
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let dim = self.value(*a).dim();
                    let n = (dim.0 * dim.1) as f64;
                    accumulate(&mut grads, *a, Array2::from_elem(dim, g[[0, 0]] / n));
                }
                Op::Im2Col { input, kernel, pad } => {
                    let (t_in, c) = self.value(*input).dim();
                    let mut ga = Array2::<f64>::zeros((t_in, c));
                    for t in 0..g.nrows() {
                        for k in 0..*kernel {
                            let src = t + k;
                            if src >= *pad && src - *pad < t_in {
                                let mut row = ga.row_mut(src - *pad);
                                row += &g.slice(s![t, k * c..(k + 1) * c]);
                            }
                        }
                    }
                    accumulate(&mut grads, *input, ga);
                }
                Op::RowNormalize(a, eps) => {
                    let x = self.value(*a);
                    let mut ga = Array2::zeros(x.dim());
                    for ((xr, gr), mut out) in x.rows().into_iter().zip(g.rows()).zip(ga.rows_mut()) {
                        let n = xr.dot(&xr).sqrt();
                        let d = n + eps;
                        out.assign(&(&gr / d));
                        if n > 0.0 {
                            let coef = xr.dot(&gr) / (n * d * d);
                            out.scaled_add(-coef, &xr);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::PairwiseEuclidean(u, v) => {
                    let (a, b) = (self.value(*u), self.value(*v));
                    let d = &node.value;
                    let mut gu = Array2::zeros(a.dim());
                    let mut gv = Array2::zeros(b.dim());
                    for i in 0..a.nrows() {
                        for j in 0..b.nrows() {
                            let w = g[[i, j]] / d[[i, j]];
                            let diff = &a.row(i) - &b.row(j);
                            gu.row_mut(i).scaled_add(w, &diff);
                            gv.row_mut(j).scaled_add(-w, &diff);
                        }
                    }
                    accumulate(&mut grads, *u, gu);
                    accumulate(&mut grads, *v, gv);
                }
                Op::CrossEntropy(logits, labels) => {
                    let z = self.value(*logits);
                    let scale = g[[0, 0]] / labels.len() as f64;
                    let mut gz = z.clone();
                    for (mut row, &y) in gz.rows_mut().into_iter().zip(labels) {
                        let lse = log_sum_exp(row.iter().copied());
                        row.mapv_inplace(|v| (v - lse).exp());
                        row[y] -= 1.0;
                        row *= scale;
                    }
                    accumulate(&mut grads, *logits, gz);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Stable `log Σ exp(x)`.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` with respect to every entry of
    /// each input, compared to the tape's gradients.
    fn check(inputs: Vec<Array2<f64>>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |xs: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.scalar(o)
        };
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "input {k} entry ({r},{c}): analytic {a}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matrix_ops() {
        let mut rng = crate::seed::rng(1);
        let (a, b, row) = (random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 1, 4));
        check(vec![a.clone(), b, row.clone()], |t, v| {
            let x = t.add_row(v[0], v[2]);
            let x = t.mul_row(x, v[2]);
            let x = t.relu(x);
            let y = t.matmul(x, v[1]);
            let y = t.softmax_rows(y);
            let y = t.scale(y, 1.7);
            let y = t.add_scalar(y, 0.3);
            let z = t.mul(y, y);
            t.mean_all(z)
        });
        check(vec![a.clone(), a], |t, v| {
            let x = t.add(v[0], v[1]);
            let x = t.transpose(x);
            let x = t.layer_norm_rows(x, 1e-5);
            let w = t.mean_rows(x);
            let w = t.mul(w, w);
            t.mean_all(w)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = crate::seed::rng(2);
        let (a, b) = (random(&mut rng, 5, 3), random(&mut rng, 2, 3));
        check(vec![a, b], |t, v| {
            let c = t.im2col(v[0], 3, 1);
            let c2 = t.im2col(v[0], 2, 0);
            let l = t.slice_cols(c, 2, 7);
            let r = t.concat_rows(&[v[0], v[1]]);
            let r = t.concat_cols(&[r, r]);
            let q = t.mul(r, r);
            let m1 = t.mean_all(l);
            let m1 = t.mul(m1, m1);
            let m2 = t.mean_all(q);
            let m3 = t.mean_all(c2);
            let m3 = t.mul(m3, m3);
            let s = t.add(m1, m2);
            t.add(s, m3)
        });
    }

    #[test]
    fn loss_ops() {
        let mut rng = crate::seed::rng(3);
        let (u, v, z) = (random(&mut rng, 3, 4), random(&mut rng, 2, 4), random(&mut rng, 4, 3));
        check(vec![u.clone(), v.clone()], |t, x| {
            let a = t.row_normalize(x[0], 1e-12);
            let b = t.row_normalize(x[1], 1e-12);
            let bt = t.transpose(b);
            let s = t.matmul(a, bt);
            t.mean_all(s)
        });
        check(vec![u, v], |t, x| {
            let d = t.pairwise_euclidean(x[0], x[1], 1e-12);
            t.mean_all(d)
        });
        check(vec![z], |t, x| t.cross_entropy(x[0], &[0, 2, 1, 2]));
    }

    #[test]
    fn im2col_layout() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::from_shape_fn((3, 2), |(i, j)| (10 * i + j) as f64));
        let c = t.im2col(x, 3, 1);
        let v = t.value(c);
        assert_eq!(v.dim(), (3, 6));
        assert_eq!(v.row(0).to_vec(), vec![0.0, 0.0, 0.0, 1.0, 10.0, 11.0]);
        assert_eq!(v.row(2).to_vec(), vec![10.0, 11.0, 20.0, 21.0, 0.0, 0.0]);
    }

    #[test]
    fn unused_inputs_have_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Array2::ones((1, 2)));
        let b = t.leaf(Array2::ones((1, 2)));
        let m = t.mean_all(a);
        let g = t.backward(m);
        assert!(g.get(b).is_none());
        assert!(g.get(a).is_some());
    }
}
